//! Instance-level and pixel-level evaluation: COCO-style AP/AR over an IoU
//! grid plus AP at IoU 0.25, fixed-threshold precision/recall tables, ROC
//! AUC via the rank statistic, and per-band SNR noise injection.
//!
//! Matching follows the COCO convention: detections are visited in
//! descending confidence and greedily matched to the unmatched same-class
//! ground truth with the highest IoU above the threshold. The inner/outer
//! criterion replaces the IoU test: a detection is correct when its box has
//! positive-area intersection with the inner ground-truth box and is fully
//! contained in the outer one.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::best_seg_threshold;
use crate::error::{Error, Result};
use crate::hsicube::{Annotation, BBox, BinaryMask, Detection, HyperCube, ScoreMap};

/// Matching rule applied per detection/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Full IoU grid 0.50:0.05:0.95 plus the extra 0.25 column.
    Coco,
    /// Single fixed IoU threshold.
    FixedIou(f64),
    /// Inner/outer boxes centered on each ground-truth center, sizes in
    /// pixels: correct iff the detection overlaps the inner box and stays
    /// inside the outer box.
    InnerOuter { inner: usize, outer: usize },
}

/// Default inner/outer rectangle sizes for GPS-registered ground truth.
pub const INNER_OUTER_DEFAULT: Criterion = Criterion::InnerOuter { inner: 5, outer: 9 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Ascending IoU thresholds for AP/AR averaging.
    pub iou_grid: Vec<f64>,
    /// Extra low thresholds reported separately (AP25/Re25 column).
    pub extra_iou: Vec<f64>,
    /// Per-image cap on detections, by confidence. `None` disables the cap.
    pub max_dets_per_image: Option<usize>,
    pub criterion: Criterion,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_grid: (0..10).map(|i| 0.50 + 0.05 * i as f64).collect(),
            extra_iou: vec![0.25],
            max_dets_per_image: Some(100),
            criterion: Criterion::Coco,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_grid.is_empty() || self.iou_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("iou grid must be non-empty ascending".into()));
        }
        if self.max_dets_per_image == Some(0) {
            return Err(Error::InvalidConfig("max_dets_per_image must be >= 1".into()));
        }
        Ok(())
    }
}

/// One image's detections and ground truths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImagePair {
    pub dets: Vec<Detection>,
    pub gts: Vec<Annotation>,
}

/// Concrete per-pair test used by the matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchRule {
    Iou(f64),
    InnerOuter { inner: f64, outer: f64 },
}

impl MatchRule {
    /// True when `det` is an acceptable match for `gt`.
    fn accepts(&self, det: &BBox, gt: &BBox) -> bool {
        match *self {
            MatchRule::Iou(t) => det.iou(gt) >= t,
            MatchRule::InnerOuter { inner, outer } => {
                let inner_box = BBox::new(gt.cx, gt.cy, inner, inner);
                let outer_box = BBox::new(gt.cx, gt.cy, outer, outer);
                det.intersection_area(&inner_box) > 0.0 && det.contained_in(&outer_box)
            }
        }
    }
}

/// Greedy matching in descending confidence. Returns, per detection (in
/// input order), the matched ground-truth index or `None` (false
/// positive). Each ground truth is matched at most once; among acceptable
/// unmatched candidates of the same class the one with highest IoU wins,
/// ties broken by lower ground-truth index.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], rule: MatchRule) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut matched = vec![None; dets.len()];
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.class_id != det.class_id {
                continue;
            }
            if !rule.accepts(&det.box_, &gt.box_) {
                continue;
            }
            let iou = det.box_.iou(&gt.box_);
            let better = match best {
                None => true,
                Some((b_iou, _)) => iou > b_iou,
            };
            if better {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            gt_taken[gi] = true;
            matched[di] = Some(gi);
        }
    }
    matched
}

/// Cap one image's detections to the top `max_dets` by confidence (ties:
/// input order), preserving input order among survivors.
fn cap_dets(dets: &[Detection], max_dets: Option<usize>) -> Vec<Detection> {
    let Some(cap) = max_dets else {
        return dets.to_vec();
    };
    if dets.len() <= cap {
        return dets.to_vec();
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b))
    });
    let mut keep = vec![false; dets.len()];
    for &i in &order[..cap] {
        keep[i] = true;
    }
    dets.iter().zip(&keep).filter(|(_, &k)| k).map(|(d, _)| *d).collect()
}

/// Per-class (confidence, is_tp) pairs pooled over the dataset, plus the
/// class ground-truth count.
fn class_outcomes(
    images: &[ImagePair],
    class_id: usize,
    rule: MatchRule,
    max_dets: Option<usize>,
) -> (Vec<(f64, bool)>, usize) {
    let per_image: Vec<(Vec<(f64, bool)>, usize)> = images
        .par_iter()
        .map(|img| {
            let dets = cap_dets(&img.dets, max_dets);
            let matched = match_detections(&dets, &img.gts, rule);
            let outcomes: Vec<(f64, bool)> = dets
                .iter()
                .zip(&matched)
                .filter(|(d, _)| d.class_id == class_id)
                .map(|(d, m)| (d.confidence, m.is_some()))
                .collect();
            let n_gt = img.gts.iter().filter(|g| g.class_id == class_id).count();
            (outcomes, n_gt)
        })
        .collect();
    let mut outcomes = Vec::new();
    let mut n_gt = 0;
    for (o, g) in per_image {
        outcomes.extend(o);
        n_gt += g;
    }
    outcomes.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    (outcomes, n_gt)
}

/// COCO 101-point interpolated AP from pooled per-class outcomes.
fn ap_from_outcomes(outcomes: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(outcomes.len()); // (recall, precision)
    for (i, &(_, is_tp)) in outcomes.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // precision envelope: max precision at recall >= r
    let mut sum = 0.0;
    for step in 0..=100u32 {
        let r = step as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// AP of one class at one matching rule over the whole dataset.
pub fn average_precision(
    images: &[ImagePair],
    class_id: usize,
    rule: MatchRule,
    max_dets: Option<usize>,
) -> Result<f64> {
    let (outcomes, n_gt) = class_outcomes(images, class_id, rule, max_dets);
    if n_gt == 0 {
        return Err(Error::NoGtForClass { class_id });
    }
    Ok(ap_from_outcomes(&outcomes, n_gt))
}

/// Recall of one class at one matching rule (all capped detections used).
pub fn recall(
    images: &[ImagePair],
    class_id: usize,
    rule: MatchRule,
    max_dets: Option<usize>,
) -> Result<f64> {
    let (outcomes, n_gt) = class_outcomes(images, class_id, rule, max_dets);
    if n_gt == 0 {
        return Err(Error::NoGtForClass { class_id });
    }
    let tp = outcomes.iter().filter(|(_, t)| *t).count();
    Ok(tp as f64 / n_gt as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    /// AP per grid threshold, parallel to `EvalConfig::iou_grid`.
    pub ap_per_iou: Vec<f64>,
    /// Mean AP over the grid.
    pub ap: f64,
    /// AP at the extra threshold (IoU 0.25 by default).
    pub ap25: f64,
    /// Recall averaged over the grid.
    pub ar: f64,
    /// Recall at the extra threshold.
    pub re25: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub criterion: Criterion,
    pub per_class: Vec<ClassMetrics>,
    pub map: f64,
    pub map25: f64,
    pub mar: f64,
    pub mre25: f64,
    /// Classes present in config/detections but absent from ground truth;
    /// excluded from all means.
    pub skipped_classes: Vec<usize>,
    /// Mean pixel ROC AUC over classes, when masks were supplied.
    pub mauc: Option<f64>,
    /// Mean best-threshold pixel IoU over classes, when masks supplied.
    pub miou: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-class markdown table with the dataset means appended.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| class | AP | AP25 | AR | Re25 |\n|---|---|---|---|---|\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                c.class_id, c.ap, c.ap25, c.ar, c.re25
            ));
        }
        out.push_str(&format!(
            "| mean | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            self.map, self.map25, self.mar, self.mre25
        ));
        if let (Some(auc), Some(iou)) = (self.mauc, self.miou) {
            out.push_str(&format!("\nmAUC: {auc:.3}  mIoU: {iou:.3}\n"));
        }
        if !self.skipped_classes.is_empty() {
            out.push_str(&format!(
                "\nclasses without ground truth (excluded from means): {:?}\n",
                self.skipped_classes
            ));
        }
        out
    }
}

/// The matching rules implied by a criterion: grid rules averaged into
/// AP/AR, plus the extra rule for the AP25/Re25 column. Non-grid criteria
/// collapse both to the single stated rule.
fn criterion_rules(config: &EvalConfig) -> (Vec<MatchRule>, MatchRule) {
    match config.criterion {
        Criterion::Coco => (
            config.iou_grid.iter().map(|&t| MatchRule::Iou(t)).collect(),
            MatchRule::Iou(config.extra_iou.first().copied().unwrap_or(0.25)),
        ),
        Criterion::FixedIou(t) => (vec![MatchRule::Iou(t)], MatchRule::Iou(t)),
        Criterion::InnerOuter { inner, outer } => {
            let rule = MatchRule::InnerOuter { inner: inner as f64, outer: outer as f64 };
            (vec![rule], rule)
        }
    }
}

/// Evaluate a dataset. Classes are the union of ground-truth classes;
/// classes appearing only in detections are listed as skipped.
pub fn evaluate(images: &[ImagePair], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let mut gt_classes: Vec<usize> =
        images.iter().flat_map(|i| i.gts.iter().map(|g| g.class_id)).collect();
    gt_classes.sort_unstable();
    gt_classes.dedup();
    if gt_classes.is_empty() {
        return Err(Error::EmptyGt);
    }
    let mut det_classes: Vec<usize> =
        images.iter().flat_map(|i| i.dets.iter().map(|d| d.class_id)).collect();
    det_classes.sort_unstable();
    det_classes.dedup();
    let skipped: Vec<usize> =
        det_classes.into_iter().filter(|c| !gt_classes.contains(c)).collect();

    let (grid_rules, extra_rule) = criterion_rules(config);
    let cap = config.max_dets_per_image;
    let mut per_class = Vec::with_capacity(gt_classes.len());
    for &class_id in &gt_classes {
        let ap_per_iou: Vec<f64> = grid_rules
            .iter()
            .map(|&r| average_precision(images, class_id, r, cap))
            .collect::<Result<_>>()?;
        let ar_per_iou: Vec<f64> = grid_rules
            .iter()
            .map(|&r| recall(images, class_id, r, cap))
            .collect::<Result<_>>()?;
        let ap = ap_per_iou.iter().sum::<f64>() / ap_per_iou.len() as f64;
        let ar = ar_per_iou.iter().sum::<f64>() / ar_per_iou.len() as f64;
        per_class.push(ClassMetrics {
            class_id,
            ap,
            ap25: average_precision(images, class_id, extra_rule, cap)?,
            ar,
            re25: recall(images, class_id, extra_rule, cap)?,
            ap_per_iou,
        });
    }
    let n = per_class.len() as f64;
    Ok(EvalReport {
        criterion: config.criterion,
        map: per_class.iter().map(|c| c.ap).sum::<f64>() / n,
        map25: per_class.iter().map(|c| c.ap25).sum::<f64>() / n,
        mar: per_class.iter().map(|c| c.ar).sum::<f64>() / n,
        mre25: per_class.iter().map(|c| c.re25).sum::<f64>() / n,
        per_class,
        skipped_classes: skipped,
        mauc: None,
        miou: None,
    })
}

/// Attach pixel metrics to a report: mean ROC AUC and mean best-threshold
/// pixel IoU over the given per-class (score map, ground-truth mask) pairs.
pub fn attach_pixel_metrics(
    report: &mut EvalReport,
    pairs: &[(&ScoreMap, &BinaryMask)],
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyGt);
    }
    let mut aucs = Vec::new();
    let mut ious = Vec::new();
    for (map, mask) in pairs {
        aucs.push(roc_auc(map, mask)?);
        ious.push(best_seg_threshold(map, mask)?.1);
    }
    report.mauc = Some(aucs.iter().sum::<f64>() / aucs.len() as f64);
    report.miou = Some(ious.iter().sum::<f64>() / ious.len() as f64);
    Ok(())
}

/// One row of the fixed-confidence-threshold table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub threshold: f64,
    /// Detections at or above the threshold.
    pub num: usize,
    pub tp: usize,
    pub precision: f64,
    pub recall: f64,
    /// False when no detection passed the threshold (precision reported 0).
    pub precision_defined: bool,
}

/// Precision/recall at fixed confidence thresholds, matching with `rule`.
/// All classes pooled; matching runs on the thresholded subset.
pub fn fixed_threshold_pr(
    images: &[ImagePair],
    rule: MatchRule,
    thresholds: &[f64],
) -> Vec<PrRow> {
    let total_gt: usize = images.iter().map(|i| i.gts.len()).sum();
    thresholds
        .iter()
        .map(|&t| {
            let mut num = 0usize;
            let mut tp = 0usize;
            for img in images {
                let dets: Vec<Detection> =
                    img.dets.iter().filter(|d| d.confidence >= t).copied().collect();
                num += dets.len();
                let matched = match_detections(&dets, &img.gts, rule);
                tp += matched.iter().filter(|m| m.is_some()).count();
            }
            let defined = num > 0;
            PrRow {
                threshold: t,
                num,
                tp,
                precision: if defined { tp as f64 / num as f64 } else { 0.0 },
                recall: if total_gt > 0 { tp as f64 / total_gt as f64 } else { 0.0 },
                precision_defined: defined,
            }
        })
        .collect()
}

/// ROC AUC of a score map against a binary mask via the Mann-Whitney rank
/// statistic with tie averaging. Needs at least one positive and one
/// negative pixel.
pub fn roc_auc(map: &ScoreMap, gt: &BinaryMask) -> Result<f64> {
    if map.height != gt.height || map.width != gt.width {
        return Err(Error::ShapeMismatch {
            context: format!(
                "score map {}x{} vs mask {}x{}",
                map.height, map.width, gt.height, gt.width
            ),
        });
    }
    let n_pos = gt.count_true();
    let n_neg = gt.bits.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateGt);
    }
    // average ranks (1-based) with ties sharing the mean rank of their run
    let n = map.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map.scores[a].partial_cmp(&map.scores[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && map.scores[order[j + 1]] == map.scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 =
        gt.bits.iter().zip(&ranks).filter(|(&g, _)| g).map(|(_, &r)| r).sum();
    Ok((rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// SNR settings used by the robustness study, in dB.
pub const SNR_GRID_DB: [f64; 6] = [10.0, 15.0, 20.0, 25.0, 30.0, 35.0];

/// Add independent zero-mean Gaussian noise per band with variance
/// `sigma_signal_i^2 / 10^(snr_db/10)`, where the signal variance is the
/// per-band population variance over pixels.
pub fn inject_noise(cube: &HyperCube, snr_db: f64, rng: &mut impl Rng) -> Result<HyperCube> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument("snr_db must be finite".into()));
    }
    let (h, w, bands) = (cube.height(), cube.width(), cube.bands());
    let plane = h * w;
    let data = cube.data();
    let mut out = data.to_vec();
    let atten = 10f64.powf(snr_db / 10.0);
    for b in 0..bands {
        let slice = &data[b * plane..(b + 1) * plane];
        let mean: f64 = slice.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var: f64 =
            slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
        if var <= 0.0 {
            return Err(Error::ZeroVarianceBand { band: b });
        }
        let sigma = (var / atten).sqrt();
        let normal = Normal::new(0.0, sigma).unwrap();
        for v in &mut out[b * plane..(b + 1) * plane] {
            *v = (*v as f64 + normal.sample(rng)) as f32;
        }
    }
    HyperCube::new(h, w, bands, out, cube.wavelengths().map(|w| w.to_vec()), cube.unit())
}
