//! Conversion between pixel-level representations (masks, score maps) and
//! instance-level representations (annotations, detections).
//!
//! Connectivity is eight-connected everywhere, matching the label
//! construction used for the datasets; four-connected is available behind a
//! flag for ablation.

use crate::error::{Error, Result};
use crate::hsicube::{Annotation, BBox, BinaryMask, Detection, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    #[default]
    Eight,
    Four,
}

/// Labeling of a mask into maximal connected components, ids 1..=count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub height: usize,
    pub width: usize,
    /// 0 = background, k >= 1 = component id.
    pub labels: Vec<u32>,
    pub count: usize,
}

const NEIGHBORS_8: [(i64, i64); 8] =
    [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
const NEIGHBORS_4: [(i64, i64); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

/// Label connected components by BFS. Component ids are assigned in
/// row-major order of their first pixel, so labeling is deterministic.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let neighbors: &[(i64, i64)] = match connectivity {
        Connectivity::Eight => &NEIGHBORS_8,
        Connectivity::Four => &NEIGHBORS_4,
    };
    let mut queue = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push(start);
        while let Some(idx) = queue.pop() {
            let (x, y) = ((idx % w) as i64, (idx / w) as i64);
            for (dx, dy) in neighbors {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let nidx = ny as usize * w + nx as usize;
                if mask.bits[nidx] && labels[nidx] == 0 {
                    labels[nidx] = count;
                    queue.push(nidx);
                }
            }
        }
    }
    ComponentLabeling { height: h, width: w, labels, count: count as usize }
}

/// Tight bbox over the pixels of each eight-connected component.
///
/// Pixel (x, y) spans [x, x+1] x [y, y+1]; the box of a component covering
/// columns [x0, x1] has width x1 - x0 + 1 and center (x0 + x1 + 1) / 2.
pub fn mask_to_objects(mask: &BinaryMask) -> Vec<Annotation> {
    mask_to_objects_with(mask, Connectivity::Eight)
}

pub fn mask_to_objects_with(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Annotation> {
    let labeling = label_components(mask, connectivity);
    let mut extents = vec![(usize::MAX, 0usize, usize::MAX, 0usize); labeling.count];
    for (idx, &label) in labeling.labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let (x, y) = (idx % mask.width, idx / mask.width);
        let e = &mut extents[label as usize - 1];
        e.0 = e.0.min(x);
        e.1 = e.1.max(x);
        e.2 = e.2.min(y);
        e.3 = e.3.max(y);
    }
    extents
        .iter()
        .enumerate()
        .map(|(i, &(x0, x1, y0, y1))| Annotation {
            box_: BBox::new(
                (x0 + x1 + 1) as f64 / 2.0,
                (y0 + y1 + 1) as f64 / 2.0,
                (x1 - x0 + 1) as f64,
                (y1 - y0 + 1) as f64,
            ),
            class_id: mask.class_id,
            instance_id: i,
        })
        .collect()
}

/// Min-max normalize a score map to [0, 1]. Errors with `FlatMap` when all
/// scores are equal.
pub fn normalize_scores(map: &ScoreMap) -> Result<ScoreMap> {
    let min = map.scores.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = map.scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max <= min {
        return Err(Error::FlatMap);
    }
    let range = max - min;
    ScoreMap::new(
        map.height,
        map.width,
        map.class_id,
        map.scores.iter().map(|&s| (s - min) / range).collect(),
    )
}

/// Result of converting a score map to detections. `flat_map` is set when
/// the map could not be normalized (all scores equal); detections are then
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDetections {
    pub detections: Vec<Detection>,
    pub flat_map: bool,
}

/// Normalize, binarize at `threshold` (pixels >= threshold), componentize,
/// and report one detection per component with confidence equal to the
/// maximum normalized score inside it.
pub fn scores_to_detections(map: &ScoreMap, threshold: f64) -> ScoreDetections {
    let normalized = match normalize_scores(map) {
        Ok(m) => m,
        Err(_) => return ScoreDetections { detections: Vec::new(), flat_map: true },
    };
    let mask = BinaryMask::new(
        map.height,
        map.width,
        map.class_id,
        normalized.scores.iter().map(|&s| s as f64 >= threshold).collect(),
    )
    .expect("mask dims match map");
    let labeling = label_components(&mask, Connectivity::Eight);
    let objects = mask_to_objects(&mask);
    let mut max_scores = vec![f64::NEG_INFINITY; labeling.count];
    for (idx, &label) in labeling.labels.iter().enumerate() {
        if label != 0 {
            let s = normalized.scores[idx] as f64;
            let m = &mut max_scores[label as usize - 1];
            if s > *m {
                *m = s;
            }
        }
    }
    let detections = objects
        .into_iter()
        .enumerate()
        .map(|(i, ann)| Detection {
            box_: ann.box_,
            class_id: map.class_id,
            confidence: max_scores[i],
        })
        .collect();
    ScoreDetections { detections, flat_map: false }
}

/// Pixel IoU between a thresholded prediction mask and a ground-truth mask.
fn pixel_iou(pred: &[bool], gt: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Scan thresholds 0.00, 0.01, ..., 1.00 on the normalized map and return
/// the (threshold, iou) pair maximizing pixel IoU against `gt_mask`. Ties
/// break toward the larger threshold.
pub fn best_seg_threshold(map: &ScoreMap, gt_mask: &BinaryMask) -> Result<(f64, f64)> {
    if map.height != gt_mask.height || map.width != gt_mask.width {
        return Err(Error::ShapeMismatch {
            context: format!(
                "score map {}x{} vs mask {}x{}",
                map.height, map.width, gt_mask.height, gt_mask.width
            ),
        });
    }
    if gt_mask.count_true() == 0 {
        return Err(Error::EmptyGt);
    }
    let normalized = normalize_scores(map)?;
    let mut best = (0.0, f64::NEG_INFINITY);
    for step in 0..=100u32 {
        let t = step as f64 / 100.0;
        let pred: Vec<bool> = normalized.scores.iter().map(|&s| s as f64 >= t).collect();
        let iou = pixel_iou(&pred, &gt_mask.bits);
        if iou >= best.1 {
            best = (t, iou);
        }
    }
    Ok(best)
}

/// Pooled variant: per-image normalization, IoU over the union of all
/// (map, mask) pairs at each grid threshold.
pub fn best_seg_threshold_pooled(pairs: &[(&ScoreMap, &BinaryMask)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyGt);
    }
    let mut normalized = Vec::with_capacity(pairs.len());
    let mut any_gt = false;
    for (map, mask) in pairs {
        if map.height != mask.height || map.width != mask.width {
            return Err(Error::ShapeMismatch { context: "pooled threshold shapes".into() });
        }
        any_gt |= mask.count_true() > 0;
        // flat maps contribute an all-false prediction at t > 0
        normalized.push(normalize_scores(map).ok());
    }
    if !any_gt {
        return Err(Error::EmptyGt);
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    for step in 0..=100u32 {
        let t = step as f64 / 100.0;
        let mut inter = 0usize;
        let mut union = 0usize;
        for ((_, mask), norm) in pairs.iter().zip(&normalized) {
            for (i, &g) in mask.bits.iter().enumerate() {
                let p = norm.as_ref().map(|n| n.scores[i] as f64 >= t).unwrap_or(false);
                if p && g {
                    inter += 1;
                }
                if p || g {
                    union += 1;
                }
            }
        }
        let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if iou >= best.1 {
            best = (t, iou);
        }
    }
    Ok(best)
}

/// Mask with exactly the k highest-scoring pixels true; ties broken by
/// row-major order.
pub fn select_topk_mask(map: &ScoreMap, k: usize) -> Result<BinaryMask> {
    let n = map.height * map.width;
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, max: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        map.scores[b].partial_cmp(&map.scores[a]).unwrap().then(a.cmp(&b))
    });
    let mut bits = vec![false; n];
    for &idx in &order[..k] {
        bits[idx] = true;
    }
    BinaryMask::new(map.height, map.width, map.class_id, bits)
}
