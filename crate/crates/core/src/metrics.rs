//! Class-agnostic evaluation.
//!
//! Recall counts a ground-truth entity as found when some predicted segment
//! overlaps it with IoU strictly above threshold; predictions that match
//! nothing are not penalized (annotations are incomplete by nature, so false
//! positives are not meaningful here). Boundary IoU restricts both masks to a
//! band around their outer contours before intersecting, which makes it
//! sensitive to boundary placement and blind to deep interiors.

use crate::cluster::Segmentation;
use crate::geometry::{self, FeatureMap};
use crate::labels::EntityLabels;

/// |a and b| / |a or b|; two empty masks give 0 by convention.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f32 / union as f32
    }
}

/// Mask pixels on the outer contour: adjacent (4-connectivity) to the
/// border-connected background region, or on the image border itself.
/// Interior holes do not produce contour pixels.
fn outer_contour(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut exterior = vec![false; h * w];
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || y == h - 1 || x == 0 || x == w - 1) && !mask[y * w + x] {
                if !exterior[y * w + x] {
                    exterior[y * w + x] = true;
                    queue.push_back((y, x));
                }
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let mut push = |yy: isize, xx: isize| {
            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                let i = yy as usize * w + xx as usize;
                if !mask[i] && !exterior[i] {
                    exterior[i] = true;
                    queue.push_back((yy as usize, xx as usize));
                }
            }
        };
        push(y as isize - 1, x as isize);
        push(y as isize + 1, x as isize);
        push(y as isize, x as isize - 1);
        push(y as isize, x as isize + 1);
    }

    let mut contour = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
                contour[i] = true;
                continue;
            }
            if exterior[(y - 1) * w + x]
                || exterior[(y + 1) * w + x]
                || exterior[y * w + x - 1]
                || exterior[y * w + x + 1]
            {
                contour[i] = true;
            }
        }
    }
    contour
}

/// Pixels within L-inf distance `r` of any true pixel: r rounds of 3x3
/// dilation (exact for the Chebyshev metric).
fn dilate_linf(seed: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut cur = seed.to_vec();
    for _ in 0..r {
        let mut next = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if cur[y * w + x] {
                    continue;
                }
                'scan: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0
                            && yy < h as i64
                            && xx >= 0
                            && xx < w as i64
                            && cur[yy as usize * w + xx as usize]
                        {
                            next[y * w + x] = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Band radius: `dilation_frac` of the image diagonal, floored at one pixel.
pub fn boundary_band_radius(h: usize, w: usize, dilation_frac: f32) -> usize {
    let diag = ((h * h + w * w) as f32).sqrt();
    ((dilation_frac * diag).round() as usize).max(1)
}

/// IoU of the boundary regions of the two masks.
pub fn boundary_iou(a: &[bool], b: &[bool], h: usize, w: usize, dilation_frac: f32) -> f32 {
    let r = boundary_band_radius(h, w, dilation_frac);
    let region = |mask: &[bool]| -> Vec<bool> {
        let contour = outer_contour(mask, h, w);
        let band = dilate_linf(&contour, h, w, r);
        mask.iter().zip(&band).map(|(&m, &d)| m && d).collect()
    };
    mask_iou(&region(a), &region(b))
}

#[derive(Debug, Clone)]
pub struct EntityMatch {
    pub entity: u32,
    pub matched: bool,
    pub best_iou: f32,
    /// Prediction achieving the best IoU.
    pub pred: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct MatchReport {
    pub per_entity: Vec<EntityMatch>,
    pub recall: f32,
}

/// Per-entity best-IoU matching. For thresholds at or above 0.5 a prediction
/// can exceed the threshold with at most one entity and vice versa, so
/// best-IoU matching is automatically one-to-one.
pub fn recall_at(pred: &Segmentation, gt: &EntityLabels, thr: f32) -> MatchReport {
    let pred_masks: Vec<Vec<bool>> = (1..=pred.modes.len() as u32)
        .map(|id| pred.segment_mask(id))
        .collect();
    let mut per_entity = Vec::new();
    for ent in 1..=gt.k as u32 {
        let gt_mask = gt.entity_mask(ent);
        if !gt_mask.iter().any(|&v| v) {
            continue;
        }
        let mut best = (0.0f32, None);
        for (pi, pm) in pred_masks.iter().enumerate() {
            let iou = mask_iou(&gt_mask, pm);
            if iou > best.0 {
                best = (iou, Some(pi as u32 + 1));
            }
        }
        per_entity.push(EntityMatch {
            entity: ent,
            matched: best.0 > thr,
            best_iou: best.0,
            pred: best.1,
        });
    }
    let matched = per_entity.iter().filter(|e| e.matched).count();
    let recall = if per_entity.is_empty() {
        0.0
    } else {
        matched as f32 / per_entity.len() as f32
    };
    MatchReport { per_entity, recall }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApReport {
    pub ap50: f32,
    pub ap75: f32,
    /// Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95.
    pub map: f32,
}

/// Greedy confidence-ordered matching with an all-point interpolated PR
/// curve, averaged over ten IoU thresholds. Returns `None` without ground
/// truth entities (AP is undefined then).
pub fn average_precision(pred: &Segmentation, gt: &EntityLabels) -> Option<ApReport> {
    let gt_masks: Vec<Vec<bool>> = (1..=gt.k as u32)
        .map(|ent| gt.entity_mask(ent))
        .filter(|m| m.iter().any(|&v| v))
        .collect();
    if gt_masks.is_empty() {
        return None;
    }
    // Sort predictions by confidence, id breaking ties for determinism.
    let mut order: Vec<usize> = (0..pred.modes.len()).collect();
    order.sort_by(|&a, &b| {
        pred.modes[b]
            .mean_similarity
            .partial_cmp(&pred.modes[a].mean_similarity)
            .unwrap()
            .then(a.cmp(&b))
    });
    let pred_masks: Vec<Vec<bool>> = order
        .iter()
        .map(|&i| pred.segment_mask(i as u32 + 1))
        .collect();

    // IoU table computed once; matching reruns per threshold.
    let iou: Vec<Vec<f32>> = pred_masks
        .iter()
        .map(|pm| gt_masks.iter().map(|gm| mask_iou(pm, gm)).collect())
        .collect();

    let ap_at = |thr: f32| -> f32 {
        let mut taken = vec![false; gt_masks.len()];
        let mut tp_flags = Vec::with_capacity(pred_masks.len());
        for pi in 0..pred_masks.len() {
            let mut best = (0.0f32, None);
            for gi in 0..gt_masks.len() {
                if !taken[gi] && iou[pi][gi] > best.0 {
                    best = (iou[pi][gi], Some(gi));
                }
            }
            match best.1 {
                Some(gi) if best.0 > thr => {
                    taken[gi] = true;
                    tp_flags.push(true);
                }
                _ => tp_flags.push(false),
            }
        }
        // All-point interpolation: precision envelope from the right.
        let mut tp = 0usize;
        let precisions: Vec<f32> = tp_flags
            .iter()
            .enumerate()
            .map(|(rank, &is_tp)| {
                if is_tp {
                    tp += 1;
                }
                tp as f32 / (rank + 1) as f32
            })
            .collect();
        let mut envelope = precisions.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let dr = 1.0 / gt_masks.len() as f32;
        tp_flags
            .iter()
            .zip(&envelope)
            .filter(|(&is_tp, _)| is_tp)
            .map(|(_, &p)| dr * p)
            .sum()
    };

    let thresholds: Vec<f32> = (0..10).map(|i| 0.50 + 0.05 * i as f32).collect();
    let aps: Vec<f32> = thresholds.iter().map(|&t| ap_at(t)).collect();
    Some(ApReport {
        ap50: aps[0],
        ap75: aps[5],
        map: aps.iter().sum::<f32>() / aps.len() as f32,
    })
}

/// Feature-space diagnostics: mean |mu_k . mu_l| over entity pairs (needs at
/// least two entities) and mean |f_i . mu_label(i)| over valid entity pixels.
pub fn ablation_similarities(
    features: &FeatureMap,
    gt: &EntityLabels,
) -> (Option<f32>, Option<f32>) {
    let mut means: Vec<(u32, Vec<f32>)> = Vec::new();
    for ent in 1..=gt.k as u32 {
        let px = gt.entity_pixels(ent);
        if px.is_empty() {
            continue;
        }
        let feats: Vec<&[f32]> = px.iter().map(|&i| features.feature(i)).collect();
        let avg = geometry::orientation_average(&feats).expect("non-empty");
        means.push((ent, avg.mu.to_vec()));
    }

    let inter = if means.len() < 2 {
        None
    } else {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let dot: f64 = means[i]
                    .1
                    .iter()
                    .zip(&means[j].1)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                acc += dot.abs();
                count += 1;
            }
        }
        Some((acc / count as f64) as f32)
    };

    let by_id: std::collections::BTreeMap<u32, &Vec<f32>> =
        means.iter().map(|(e, m)| (*e, m)).collect();
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in 0..gt.labels.len() {
        if !gt.valid[i] || gt.labels[i] == 0 {
            continue;
        }
        if let Some(mu) = by_id.get(&gt.labels[i]) {
            let dot: f64 = features
                .feature(i)
                .iter()
                .zip(mu.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            acc += dot.abs();
            count += 1;
        }
    }
    let intra = if count == 0 {
        None
    } else {
        Some((acc / count as f64) as f32)
    };
    (inter, intra)
}

/// Per-image evaluation record.
#[derive(Debug, Clone, Default)]
pub struct EvalSummary {
    pub recall: f32,
    pub n_entities: usize,
    /// Mean IoU over matched entities only.
    pub mean_matched_iou: Option<f32>,
    pub mean_matched_boundary_iou: Option<f32>,
    pub ap: Option<ApReport>,
    pub inter_mean: Option<f32>,
    pub intra_entity: Option<f32>,
}

/// Evaluates one prediction against one ground truth; similarity diagnostics
/// are filled only when features are available.
pub fn evaluate(
    pred: &Segmentation,
    gt: &EntityLabels,
    features: Option<&FeatureMap>,
) -> EvalSummary {
    let report = recall_at(pred, gt, 0.5);
    let matched: Vec<&EntityMatch> = report.per_entity.iter().filter(|e| e.matched).collect();
    let mean_matched_iou = if matched.is_empty() {
        None
    } else {
        Some(matched.iter().map(|e| e.best_iou).sum::<f32>() / matched.len() as f32)
    };
    let mean_matched_boundary_iou = if matched.is_empty() {
        None
    } else {
        let mut acc = 0.0f32;
        for e in &matched {
            let gm = gt.entity_mask(e.entity);
            let pm = pred.segment_mask(e.pred.expect("matched entities carry a prediction"));
            acc += boundary_iou(&gm, &pm, gt.h, gt.w, 0.02);
        }
        Some(acc / matched.len() as f32)
    };
    let (inter_mean, intra_entity) = match features {
        Some(f) => ablation_similarities(f, gt),
        None => (None, None),
    };
    EvalSummary {
        recall: report.recall,
        n_entities: report.per_entity.len(),
        mean_matched_iou,
        mean_matched_boundary_iou,
        ap: average_precision(pred, gt),
        inter_mean,
        intra_entity,
    }
}
