//! Set-prediction machinery: forced Hungarian + dynamic Max-IoU label
//! assignment, center-shifting contrastive denoising query generation, the
//! matching cost terms, and NMS. All testable independently of any network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsicube::{BBox, Detection};

/// Generalized IoU in [-1, 1]; the loss form is `1 - giou`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let ex = (a.x_max().max(b.x_max()) - a.x_min().min(b.x_min())).max(0.0);
    let ey = (a.y_max().max(b.y_max()) - a.y_min().min(b.y_min())).max(0.0);
    let enclosing = ex * ey;
    if enclosing > 0.0 {
        iou - (enclosing - union) / enclosing
    } else {
        iou
    }
}

/// Focal classification cost with gamma=2, alpha=0.25 on sigmoid scores:
/// `-alpha * (1 - p)^2 * ln(p)` for the ground-truth class.
pub fn focal_cls_cost(pred_scores: &[f64], gt_class: usize) -> f64 {
    const GAMMA: f64 = 2.0;
    const ALPHA: f64 = 0.25;
    let p = pred_scores[gt_class].clamp(1e-12, 1.0);
    -ALPHA * (1.0 - p).powf(GAMMA) * p.ln()
}

/// L1 distance over the four normalized (cx, cy, w, h) components.
pub fn l1_cost(pred_box: &BBox, gt_box: &BBox) -> f64 {
    (pred_box.cx - gt_box.cx).abs()
        + (pred_box.cy - gt_box.cy).abs()
        + (pred_box.w - gt_box.w).abs()
        + (pred_box.h - gt_box.h).abs()
}

/// Loss-term weights; the training loss uses (cls 1.0, l1 5.0, giou 2.0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.0, l1: 5.0, giou: 2.0 }
    }
}

/// Minimum-total-cost injective assignment of every row (gt) to a distinct
/// column (pred), by shortest augmenting paths with potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if n > m {
        return Err(Error::Infeasible { gts: n, preds: m });
    }
    for row in cost {
        if row.len() != m {
            return Err(Error::ShapeMismatch { context: "ragged cost matrix".into() });
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite cost".into()));
        }
    }

    // 1-based potentials; p[j] = row matched to column j, 0 = unmatched.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_by_key(|&(g, _)| g);
    Ok(pairs)
}

/// A ground-truth sample for assignment, boxes in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtSample {
    pub box_: BBox,
    pub class_id: usize,
}

/// A prediction for assignment: box plus per-class sigmoid scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PredSample {
    pub box_: BBox,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOrigin {
    Forced,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignedPair {
    pub gt_index: usize,
    pub pred_index: usize,
    pub origin: PairOrigin,
}

/// Positive-sample set: each gt has exactly one forced pair and at most
/// `t_cap` dynamic pairs; no prediction index repeats.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssignResult {
    pub pairs: Vec<AssignedPair>,
}

/// Paper defaults for the hybrid assigner.
pub const DEFAULT_TAU_IOU: f64 = 0.95;
pub const DEFAULT_T_CAP: usize = 9;

/// Hybrid one-to-many assignment.
///
/// Step 1 (forced): Hungarian matching on the combined cost
/// `L_giou + L_l1 + L_cls` (unweighted sum when `weights` is `None`).
/// Step 2 (dynamic): per gt, candidates with IoU > `tau_iou`, sorted by
/// descending IoU, top `t_cap` kept; predictions already assigned (forced
/// or dynamically to an earlier gt) are excluded so pair sets stay disjoint.
pub fn hybrid_assign(
    gts: &[GtSample],
    preds: &[PredSample],
    weights: Option<&LossWeights>,
    tau_iou: f64,
    t_cap: usize,
) -> Result<AssignResult> {
    if gts.len() > preds.len() {
        return Err(Error::Infeasible { gts: gts.len(), preds: preds.len() });
    }
    if gts.is_empty() {
        return Ok(AssignResult::default());
    }
    let cost: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| {
            preds
                .iter()
                .map(|p| {
                    let l_giou = 1.0 - giou(&g.box_, &p.box_);
                    let l_l1 = l1_cost(&p.box_, &g.box_);
                    let l_cls = focal_cls_cost(&p.scores, g.class_id);
                    match weights {
                        Some(w) => w.giou * l_giou + w.l1 * l_l1 + w.cls * l_cls,
                        None => l_giou + l_l1 + l_cls,
                    }
                })
                .collect()
        })
        .collect();
    let forced = hungarian(&cost)?;

    let mut taken = vec![false; preds.len()];
    let mut pairs = Vec::new();
    for &(g, p) in &forced {
        taken[p] = true;
        pairs.push(AssignedPair { gt_index: g, pred_index: p, origin: PairOrigin::Forced });
    }
    for (g, gt) in gts.iter().enumerate() {
        let mut candidates: Vec<(usize, f64)> = preds
            .iter()
            .enumerate()
            .filter(|(p, _)| !taken[*p])
            .map(|(p, pred)| (p, gt.box_.iou(&pred.box_)))
            .filter(|(_, iou)| *iou > tau_iou)
            .collect();
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(p, _) in candidates.iter().take(t_cap) {
            taken[p] = true;
            pairs.push(AssignedPair { gt_index: g, pred_index: p, origin: PairOrigin::Dynamic });
        }
    }
    Ok(AssignResult { pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// A noised ground-truth box used as an extra decoder query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisedQuery {
    pub box_: BBox,
    pub polarity: Polarity,
    pub gt_index: usize,
}

/// Paper defaults for CCDN.
pub const DEFAULT_TAU1: f64 = 0.5;
pub const DEFAULT_TAU2: f64 = 1.5;
pub const DEFAULT_DN_PAIRS: usize = 200;

const BOX_CLAMP_EPS: f64 = 1e-6;
const MIN_BOX_DIM: f64 = 1e-4;

fn clamp01(v: f64) -> f64 {
    v.clamp(BOX_CLAMP_EPS, 1.0 - BOX_CLAMP_EPS)
}

/// Center-shifting contrastive denoising query generation.
///
/// For each of `n_pairs` and each gt box (x, y, w, h) in normalized units:
/// a positive query with center noise |n_x| < 0.5*tau1*w, |n_y| < 0.5*tau1*h
/// and a negative query with both |n_x| in [0.5*tau1*w, tau1*w] and |n_y| in
/// [0.5*tau1*h, tau1*h]. Width/height are resampled in
/// [max(eps, w - tau2*w), w + tau2*w]. Components clamp to (0, 1); negatives
/// whose clamped center lands inside the positive region are resampled up to
/// 10 times before clamping is accepted.
pub fn ccdn_generate(
    gts: &[GtSample],
    tau1: f64,
    tau2: f64,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Vec<NoisedQuery> {
    assert!(tau1 > 0.0 && tau2 > 0.0, "tau1 and tau2 must be positive");
    let mut out = Vec::with_capacity(2 * n_pairs * gts.len());
    for _ in 0..n_pairs {
        for (gi, gt) in gts.iter().enumerate() {
            let b = gt.box_;
            // positive
            let nx = rng.gen_range(-0.5 * tau1 * b.w..0.5 * tau1 * b.w);
            let ny = rng.gen_range(-0.5 * tau1 * b.h..0.5 * tau1 * b.h);
            out.push(NoisedQuery {
                box_: scaled_box(&b, nx, ny, tau2, rng),
                polarity: Polarity::Positive,
                gt_index: gi,
            });
            // negative: both axes in the outer band; retry when clamping
            // would push the center back into the positive region
            let mut chosen = None;
            for _ in 0..10 {
                let nx = annulus_sample(tau1 * b.w, rng);
                let ny = annulus_sample(tau1 * b.h, rng);
                let candidate = scaled_box(&b, nx, ny, tau2, rng);
                let inside_pos = (candidate.cx - b.cx).abs() < 0.5 * tau1 * b.w
                    && (candidate.cy - b.cy).abs() < 0.5 * tau1 * b.h;
                if !inside_pos {
                    chosen = Some(candidate);
                    break;
                }
                chosen = Some(candidate);
            }
            out.push(NoisedQuery {
                box_: chosen.expect("at least one candidate"),
                polarity: Polarity::Negative,
                gt_index: gi,
            });
        }
    }
    out
}

/// Sample from [-limit, -limit/2] U [limit/2, limit].
fn annulus_sample(limit: f64, rng: &mut impl Rng) -> f64 {
    let mag = rng.gen_range(0.5 * limit..=limit);
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn scaled_box(b: &BBox, nx: f64, ny: f64, tau2: f64, rng: &mut impl Rng) -> BBox {
    let w = rng.gen_range((b.w - tau2 * b.w).max(MIN_BOX_DIM)..=b.w + tau2 * b.w);
    let h = rng.gen_range((b.h - tau2 * b.h).max(MIN_BOX_DIM)..=b.h + tau2 * b.h);
    BBox::new(clamp01(b.cx + nx), clamp01(b.cy + ny), clamp01(w), clamp01(h))
}

/// Default NMS IoU threshold; kept boxes are considered non-overlapping.
pub const DEFAULT_NMS_IOU: f64 = 0.01;

/// Greedy NMS by descending confidence (ties break by original index);
/// suppresses any box with IoU > `iou_thresh` against a kept box. Kept
/// detections come out in descending-confidence order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        if kept.iter().all(|k| k.box_.iou(&dets[i].box_) <= iou_thresh) {
            kept.push(dets[i]);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn giou_identical_boxes() {
        let b = BBox::new(3.0, 4.0, 2.0, 5.0);
        assert!((giou(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_limit_for_far_boxes() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let far = BBox::new(1e7, 0.0, 1.0, 1.0);
        assert!(giou(&a, &far) < -0.999);
    }

    #[test]
    fn giou_hand_oracle() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        // IoU = 1/7, enclosing 3x3 = 9, union 7: giou = 1/7 - 2/9 = -5/63
        assert!((giou(&a, &b) - (-5.0 / 63.0)).abs() < 1e-12);
    }

    #[test]
    fn focal_zero_loss_limit() {
        assert_eq!(focal_cls_cost(&[1.0], 0), 0.0);
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(l1_cost(&b, &b), 0.0);
    }

    #[test]
    fn focal_half_score_oracle() {
        // -0.25 * 0.25 * ln(0.5)
        let expect = -0.25 * 0.25 * 0.5f64.ln();
        assert!((focal_cls_cost(&[0.5], 0) - expect).abs() < 1e-12);
        assert!((expect - 0.0433).abs() < 1e-4);
    }

    #[test]
    fn hungarian_trivial_cases() {
        assert_eq!(hungarian(&[vec![3.0]]).unwrap(), vec![(0, 0)]);
        assert_eq!(
            hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap(),
            vec![(0, 0), (1, 1)]
        );
    }

    #[test]
    fn hungarian_infeasible() {
        assert!(matches!(
            hungarian(&[vec![1.0], vec![2.0]]),
            Err(Error::Infeasible { gts: 2, preds: 1 })
        ));
    }

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.len() {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost[row][j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let _ = n;
        rec(cost, 0, &mut vec![false; m], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(n..=8);
            let cost: Vec<Vec<f64>> =
                (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
            let pairs = hungarian(&cost).unwrap();
            let total: f64 = pairs.iter().map(|&(g, p)| cost[g][p]).sum();
            let best = brute_force_min(&cost);
            assert!((total - best).abs() < 1e-9, "total {total} vs brute {best}");
            // injectivity
            let mut seen = vec![false; m];
            for &(_, p) in &pairs {
                assert!(!seen[p]);
                seen[p] = true;
            }
            assert_eq!(pairs.len(), n);
        }
    }

    fn unit_pred(b: BBox, score: f64) -> PredSample {
        PredSample { box_: b, scores: vec![score] }
    }

    #[test]
    fn hybrid_single_pair() {
        let gts = [GtSample { box_: BBox::new(0.5, 0.5, 0.1, 0.1), class_id: 0 }];
        let preds = [unit_pred(BBox::new(0.51, 0.5, 0.1, 0.1), 0.9)];
        let res = hybrid_assign(&gts, &preds, None, DEFAULT_TAU_IOU, DEFAULT_T_CAP).unwrap();
        assert_eq!(res.pairs.len(), 1);
        assert_eq!(res.pairs[0].origin, PairOrigin::Forced);
    }

    #[test]
    fn hybrid_caps_dynamic_pairs() {
        let gt_box = BBox::new(0.5, 0.5, 0.1, 0.1);
        let gts = [GtSample { box_: gt_box, class_id: 0 }];
        // 12 predictions essentially identical to the gt box
        let preds: Vec<PredSample> = (0..12)
            .map(|i| unit_pred(BBox::new(0.5 + 1e-5 * i as f64, 0.5, 0.1, 0.1), 0.5))
            .collect();
        let res = hybrid_assign(&gts, &preds, None, 0.95, 9).unwrap();
        let forced = res.pairs.iter().filter(|p| p.origin == PairOrigin::Forced).count();
        let dynamic = res.pairs.iter().filter(|p| p.origin == PairOrigin::Dynamic).count();
        assert_eq!(forced, 1);
        assert_eq!(dynamic, 9);
        assert_eq!(res.pairs.len(), 10);
    }

    #[test]
    fn hybrid_weighted_cost_changes_forced_choice() {
        // pred 0: good box, bad score; pred 1: bad box, good score.
        let gts = [GtSample { box_: BBox::new(0.5, 0.5, 0.2, 0.2), class_id: 0 }];
        let preds = [
            unit_pred(BBox::new(0.5, 0.5, 0.2, 0.2), 0.02),
            unit_pred(BBox::new(0.62, 0.62, 0.2, 0.2), 0.98),
        ];
        let unweighted =
            hybrid_assign(&gts, &preds, None, 2.0, 0).unwrap().pairs[0].pred_index;
        let weighted = hybrid_assign(&gts, &preds, Some(&LossWeights::default()), 2.0, 0)
            .unwrap()
            .pairs[0]
            .pred_index;
        // with l1 weighted 5x the box-accurate prediction must win
        assert_eq!(weighted, 0);
        // the unweighted choice is determined by the plain sum; just verify
        // both are valid indices and the weighted case is box-driven
        assert!(unweighted < 2);
    }

    #[test]
    fn hungarian_beats_random_injections() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let cost: Vec<Vec<f64>> =
            (0..5).map(|_| (0..7).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let pairs = hungarian(&cost).unwrap();
        let total: f64 = pairs.iter().map(|&(g, p)| cost[g][p]).sum();
        for _ in 0..1000 {
            // random injection
            let mut cols: Vec<usize> = (0..7).collect();
            for i in 0..5 {
                let j = rng.gen_range(i..7);
                cols.swap(i, j);
            }
            let sample: f64 = (0..5).map(|g| cost[g][cols[g]]).sum();
            assert!(total <= sample + 1e-12);
        }
    }

    #[test]
    fn ccdn_zero_noise_limit() {
        let gts = [GtSample { box_: BBox::new(0.5, 0.5, 0.1, 0.1), class_id: 0 }];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let queries = ccdn_generate(&gts, 1e-9, 1.5, 50, &mut rng);
        for q in queries.iter().filter(|q| q.polarity == Polarity::Positive) {
            assert!((q.box_.cx - 0.5).abs() < 1e-9);
            assert!((q.box_.cy - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn ccdn_ranges_and_disjointness() {
        let gt = GtSample { box_: BBox::new(0.5, 0.5, 0.2, 0.1), class_id: 0 };
        let (tau1, tau2) = (DEFAULT_TAU1, DEFAULT_TAU2);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let queries = ccdn_generate(&[gt], tau1, tau2, 2000, &mut rng);
        for q in &queries {
            let dx = (q.box_.cx - 0.5).abs();
            let dy = (q.box_.cy - 0.5).abs();
            match q.polarity {
                Polarity::Positive => {
                    assert!(dx < 0.5 * tau1 * 0.2 + 1e-12);
                    assert!(dy < 0.5 * tau1 * 0.1 + 1e-12);
                }
                Polarity::Negative => {
                    assert!((0.5 * tau1 * 0.2..=tau1 * 0.2 + 1e-12).contains(&dx), "dx {dx}");
                    assert!((0.5 * tau1 * 0.1..=tau1 * 0.1 + 1e-12).contains(&dy), "dy {dy}");
                }
            }
            assert!(q.box_.w > 0.0 && q.box_.h > 0.0);
            assert!((0.0..=1.0).contains(&q.box_.cx) && (0.0..=1.0).contains(&q.box_.cy));
        }
    }

    #[test]
    fn nms_disjoint_unchanged() {
        let dets = vec![
            Detection { box_: BBox::new(1.0, 1.0, 1.0, 1.0), class_id: 0, confidence: 0.9 },
            Detection { box_: BBox::new(5.0, 5.0, 1.0, 1.0), class_id: 0, confidence: 0.8 },
        ];
        assert_eq!(nms(&dets, 0.01).len(), 2);
    }

    #[test]
    fn nms_suppresses_duplicates() {
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        let dets = vec![
            Detection { box_: b, class_id: 0, confidence: 0.8 },
            Detection { box_: b, class_id: 0, confidence: 0.9 },
        ];
        let kept = nms(&dets, 0.01);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn nms_output_pairwise_below_threshold() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let dets: Vec<Detection> = (0..40)
            .map(|_| Detection {
                box_: BBox::new(
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                ),
                class_id: 0,
                confidence: rng.gen_range(0.0..1.0),
            })
            .collect();
        let kept = nms(&dets, 0.01);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                assert!(kept[i].box_.iou(&kept[j].box_) <= 0.01);
            }
        }
    }

    #[test]
    fn nms_order_invariant_for_equal_confidence_disjoint() {
        let dets = vec![
            Detection { box_: BBox::new(1.0, 1.0, 1.0, 1.0), class_id: 0, confidence: 0.5 },
            Detection { box_: BBox::new(4.0, 4.0, 1.0, 1.0), class_id: 0, confidence: 0.5 },
        ];
        let mut swapped = dets.clone();
        swapped.swap(0, 1);
        let a = nms(&dets, 0.01);
        let b = nms(&swapped, 0.01);
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        let mut ax: Vec<f64> = a.iter().map(|d| d.box_.cx).collect();
        let mut bx: Vec<f64> = b.iter().map(|d| d.box_.cx).collect();
        ax.sort_by(|x, y| x.partial_cmp(y).unwrap());
        bx.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(ax, bx);
    }
}
