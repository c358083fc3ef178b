//! Inference-time clustering.
//!
//! Mean-shift on the projective sphere: a flat kernel whose neighborhood is
//! |f . c| >= bandwidth (cosine of the separation angle), iterating each seed
//! center to the orientation average of its window. Converged seeds merge
//! when their centers fall within the bandwidth of each other; every pixel is
//! then assigned to the mode with the highest |f . c|, so the segmentation is
//! total.
//!
//! Multi-resolution refinement runs the model and mean-shift per resolution,
//! then walks resolutions coarse to fine: a new cluster replaces an existing
//! segment it overlaps heavily (a sharper version of the same thing), is
//! carved out as a new segment when mostly contained in one (a smaller object
//! the coarse pass missed), and is dropped otherwise.

use rayon::prelude::*;

use crate::error::TrainError;
use crate::geometry::{self, FeatureMap, LineFeature};
use crate::network::{self, Model};
use crate::tensor::kernels::{self, ResampleMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Mode {
    pub center: LineFeature,
    pub support: usize,
    /// Average |f . center| over assigned pixels; doubles as the segment
    /// confidence in evaluation.
    pub mean_similarity: f32,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub h: usize,
    pub w: usize,
    /// Row-major segment ids 1..=modes.len(); 0 would mean unassigned but the
    /// default policy assigns every pixel.
    pub labels: Vec<u32>,
    pub modes: Vec<Mode>,
}

impl Segmentation {
    pub fn segment_mask(&self, id: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftParams {
    /// Similarity threshold: cos 45 degrees by default.
    pub bandwidth: f32,
    pub seed_stride: usize,
    pub max_iter: usize,
    pub tol: f32,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        MeanShiftParams {
            bandwidth: std::f32::consts::FRAC_1_SQRT_2,
            seed_stride: 4,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(debug_assertions)]
fn window_objectives(features: &FeatureMap, window: &[usize], c: &[f32]) -> (f64, f64) {
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    for &i in window {
        let d = dot(features.feature(i), c).abs() as f64;
        abs_sum += d;
        sq_sum += d * d;
    }
    (abs_sum, sq_sum)
}

struct SeedResult {
    center: Vec<f32>,
    basin: usize,
}

fn run_seed(features: &FeatureMap, start: usize, p: &MeanShiftParams) -> Option<SeedResult> {
    let n = features.n_pixels();
    let mut c: Vec<f32> = features.feature(start).to_vec();
    let mut basin = 0usize;
    for _ in 0..p.max_iter {
        let mut window = Vec::new();
        for i in 0..n {
            if dot(features.feature(i), &c).abs() >= p.bandwidth {
                window.push(i);
            }
        }
        if window.is_empty() {
            return None;
        }
        basin = window.len();
        let feats: Vec<&[f32]> = window.iter().map(|&i| features.feature(i)).collect();
        let next = geometry::orientation_average_from(&feats, &c)
            .expect("window is non-empty")
            .mu;
        #[cfg(debug_assertions)]
        {
            // The update maximizes the quadratic window objective, which is
            // therefore monotone up to rounding; the |.| objective tracks it
            // but can dip by a fraction of a percent (observed ~0.01%).
            let (abs_before, sq_before) = window_objectives(features, &window, &c);
            let (abs_after, sq_after) = window_objectives(features, &window, &next);
            debug_assert!(
                sq_after >= sq_before * (1.0 - 1e-6),
                "mean-shift quadratic objective decreased: {sq_before} -> {sq_after}"
            );
            debug_assert!(
                abs_after >= abs_before * (1.0 - 1e-3),
                "mean-shift |.| objective dropped beyond slack: {abs_before} -> {abs_after}"
            );
        }
        let moved = geometry::line_distance(&next, &c);
        c.copy_from_slice(&next);
        if moved < p.tol {
            break;
        }
    }
    Some(SeedResult { center: c, basin })
}

/// Merge converged centers transitively while any pair sits within the
/// bandwidth; group centers are basin-weighted orientation averages.
fn merge_modes(mut groups: Vec<(Vec<f32>, f64)>, bandwidth: f32) -> Vec<Vec<f32>> {
    for _ in 0..groups.len() + 1 {
        let m = groups.len();
        if m <= 1 {
            break;
        }
        let mut parent: Vec<usize> = (0..m).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let r = find(parent, parent[i]);
                parent[i] = r;
            }
            parent[i]
        }
        let mut merged_any = false;
        for i in 0..m {
            for j in (i + 1)..m {
                if dot(&groups[i].0, &groups[j].0).abs() >= bandwidth {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.min(rj)] = ri.min(rj);
                        parent[ri.max(rj)] = ri.min(rj);
                        merged_any = true;
                    }
                }
            }
        }
        if !merged_any {
            break;
        }
        let mut sets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..m {
            let r = find(&mut parent, i);
            sets.entry(r).or_default().push(i);
        }
        let mut next = Vec::with_capacity(sets.len());
        for (_, members) in sets {
            if members.len() == 1 {
                next.push(groups[members[0]].clone());
            } else {
                let feats: Vec<&[f32]> = members.iter().map(|&i| groups[i].0.as_slice()).collect();
                let weights: Vec<f64> = members.iter().map(|&i| groups[i].1).collect();
                let avg = geometry::orientation_average_weighted(&feats, &weights)
                    .expect("non-empty group");
                let total: f64 = weights.iter().sum();
                next.push((avg.mu.to_vec(), total));
            }
        }
        groups = next;
    }
    groups.into_iter().map(|(c, _)| c).collect()
}

/// Mean-shift clustering of a unit feature map. Seeds sit on a regular grid
/// every `seed_stride` pixels; the result is independent of seed enumeration
/// order up to relabeling (labels are canonicalized by first assigned pixel).
pub fn mean_shift(features: &FeatureMap, p: &MeanShiftParams) -> Segmentation {
    let (h, w) = (features.h, features.w);
    let stride = p.seed_stride.max(1);
    let mut seeds = Vec::new();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            seeds.push(y * w + x);
        }
    }
    mean_shift_with_seeds(features, &seeds, p)
}

/// Mean-shift from an explicit seed pixel list. The mode set may not depend
/// on the ordering of `seeds` (up to canonical relabeling); the grid wrapper
/// is the normal entry point.
pub fn mean_shift_with_seeds(
    features: &FeatureMap,
    seeds: &[usize],
    p: &MeanShiftParams,
) -> Segmentation {
    let results: Vec<Option<SeedResult>> = seeds
        .par_iter()
        .map(|&s| run_seed(features, s, p))
        .collect();
    let mut groups: Vec<(Vec<f32>, f64)> = results
        .into_iter()
        .flatten()
        .map(|r| (r.center, r.basin as f64))
        .collect();
    if groups.is_empty() {
        // Cannot happen with grid seeds (a seed's own pixel is always in its
        // window), but fall back to a single global mode for safety.
        let feats: Vec<&[f32]> = (0..features.n_pixels()).map(|i| features.feature(i)).collect();
        let avg = geometry::orientation_average(&feats).expect("non-empty image");
        groups.push((avg.mu.to_vec(), feats.len() as f64));
    }
    let centers = merge_modes(groups, p.bandwidth);

    // Assign every pixel to its best mode.
    let n = features.n_pixels();
    let mut assignment = vec![0u32; n];
    assignment
        .par_iter_mut()
        .enumerate()
        .for_each(|(i, out)| {
            let f = features.feature(i);
            let mut best = 0usize;
            let mut best_sim = -1.0f32;
            for (j, c) in centers.iter().enumerate() {
                let s = dot(f, c).abs();
                if s > best_sim {
                    best_sim = s;
                    best = j;
                }
            }
            *out = best as u32;
        });

    finalize(features, assignment, centers)
}

/// Drops empty modes, relabels by first assigned pixel, and fills in support
/// and mean similarity.
fn finalize(features: &FeatureMap, assignment: Vec<u32>, centers: Vec<Vec<f32>>) -> Segmentation {
    let n = assignment.len();
    let mut first_pixel = vec![usize::MAX; centers.len()];
    for i in 0..n {
        let m = assignment[i] as usize;
        if first_pixel[m] == usize::MAX {
            first_pixel[m] = i;
        }
    }
    let mut order: Vec<usize> = (0..centers.len())
        .filter(|&m| first_pixel[m] != usize::MAX)
        .collect();
    order.sort_by_key(|&m| first_pixel[m]);
    let mut relabel = vec![0u32; centers.len()];
    for (new_id, &m) in order.iter().enumerate() {
        relabel[m] = new_id as u32 + 1;
    }
    let labels: Vec<u32> = assignment.iter().map(|&m| relabel[m as usize]).collect();

    let mut support = vec![0usize; order.len()];
    let mut sim = vec![0.0f64; order.len()];
    for i in 0..n {
        let id = labels[i] as usize - 1;
        support[id] += 1;
        sim[id] += dot(features.feature(i), &centers[order[id]]).abs() as f64;
    }
    let modes: Vec<Mode> = order
        .iter()
        .enumerate()
        .map(|(id, &m)| Mode {
            center: geometry::normalize(&centers[m]).expect("unit center"),
            support: support[id],
            mean_similarity: (sim[id] / support[id] as f64) as f32,
        })
        .collect();
    Segmentation {
        h: features.h,
        w: features.w,
        labels,
        modes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiresParams {
    /// Scale factors relative to the input size, ascending.
    pub resolutions: Vec<f32>,
    pub theta_refine: f32,
    pub theta_contain: f32,
    pub min_pixels: usize,
    pub ms: MeanShiftParams,
}

impl Default for MultiresParams {
    fn default() -> Self {
        MultiresParams {
            resolutions: vec![1.0, 2.0],
            theta_refine: 0.7,
            theta_contain: 0.8,
            min_pixels: 16,
            ms: MeanShiftParams::default(),
        }
    }
}

/// Nearest-neighbor resize of an integer label map.
pub fn resize_labels_nearest(
    labels: &[u32],
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<u32> {
    let mut out = vec![0u32; th * tw];
    for oy in 0..th {
        let sy = ((((oy as f32 + 0.5) * h as f32 / th as f32).floor()) as usize).min(h - 1);
        for ox in 0..tw {
            let sx = ((((ox as f32 + 0.5) * w as f32 / tw as f32).floor()) as usize).min(w - 1);
            out[oy * tw + ox] = labels[sy * w + sx];
        }
    }
    out
}

fn snap_up(v: usize, stride: usize) -> usize {
    v.div_ceil(stride) * stride
}

/// Runs the model and mean-shift at each resolution and merges coarse to
/// fine. Returns the segmentation on the finest grid.
pub fn multires_segment(
    model: &Model,
    image: &Tensor,
    p: &MultiresParams,
) -> Result<Segmentation, TrainError> {
    assert!(!p.resolutions.is_empty(), "need at least one resolution");
    assert!(
        p.resolutions.windows(2).all(|w| w[0] < w[1]),
        "resolutions must be ascending"
    );
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let stride = model.config.stride();

    let mut segs: Vec<Segmentation> = Vec::new();
    let mut fine_features = None;
    for &r in &p.resolutions {
        let th = snap_up(((h as f32 * r).round() as usize).max(1), stride);
        let tw = snap_up(((w as f32 * r).round() as usize).max(1), stride);
        let scaled = if (th, tw) == (h, w) {
            image.clone()
        } else {
            kernels::resample_forward(image, th, tw, ResampleMode::Bilinear)
                .map_err(TrainError::Tensor)?
        };
        let (features, _) = network::infer_features(model, &scaled)?;
        segs.push(mean_shift(&features, &p.ms));
        fine_features = Some(features);
    }
    Ok(multires_merge(&segs, &fine_features.expect("at least one resolution"), p))
}

/// The coarse-to-fine merge on precomputed per-resolution segmentations.
/// `fine_features` must match the last (finest) segmentation's grid; it
/// supplies the mean similarities of the merged modes.
pub fn multires_merge(
    per_res: &[Segmentation],
    fine_features: &FeatureMap,
    p: &MultiresParams,
) -> Segmentation {
    let last = per_res.last().expect("at least one resolution");
    let (fh, fw) = (last.h, last.w);
    assert_eq!((fine_features.h, fine_features.w), (fh, fw));

    // Working map starts as the coarsest segmentation on the finest grid.
    let coarse = &per_res[0];
    let mut map = resize_labels_nearest(&coarse.labels, coarse.h, coarse.w, fh, fw);
    let mut centers: Vec<Vec<f32>> = coarse.modes.iter().map(|m| m.center.to_vec()).collect();
    // map ids are 1-based indexes into centers

    for seg in per_res.iter().skip(1) {
        let up = resize_labels_nearest(&seg.labels, seg.h, seg.w, fh, fw);
        for (cid, mode) in seg.modes.iter().enumerate() {
            let cid = cid as u32 + 1;
            let cluster: Vec<usize> = (0..fh * fw).filter(|&i| up[i] == cid).collect();
            if cluster.len() < p.min_pixels {
                continue;
            }
            // Overlap statistics against the current map.
            let mut inter: std::collections::BTreeMap<u32, usize> = Default::default();
            for &i in &cluster {
                if map[i] != 0 {
                    *inter.entry(map[i]).or_default() += 1;
                }
            }
            let mut area = vec![0usize; centers.len() + 1];
            for &l in map.iter() {
                if l != 0 {
                    area[l as usize] += 1;
                }
            }
            let mut best_iou = (0.0f64, 0u32);
            let mut best_contain = (0.0f64, 0u32);
            for (&sid, &ov) in &inter {
                let iou = ov as f64 / (cluster.len() + area[sid as usize] - ov) as f64;
                if iou > best_iou.0 {
                    best_iou = (iou, sid);
                }
                let contain = ov as f64 / cluster.len() as f64;
                if contain > best_contain.0 {
                    best_contain = (contain, sid);
                }
            }
            if best_iou.0 >= p.theta_refine as f64 {
                // Refined version of the same segment: swap in the new mask.
                let sid = best_iou.1;
                for v in map.iter_mut() {
                    if *v == sid {
                        *v = 0;
                    }
                }
                for &i in &cluster {
                    map[i] = sid;
                }
                centers[(sid - 1) as usize] = mode.center.to_vec();
            } else if best_contain.0 >= p.theta_contain as f64 {
                // A smaller object inside an existing segment: carve it out.
                centers.push(mode.center.to_vec());
                let nid = centers.len() as u32;
                for &i in &cluster {
                    map[i] = nid;
                }
            }
            // else: discard the cluster
        }
    }

    fill_orphans(&mut map, fh, fw);

    // Re-express as assignment indices for the shared finalizer.
    let mut used: Vec<u32> = map.iter().copied().filter(|&l| l != 0).collect();
    used.sort_unstable();
    used.dedup();
    let mut compact = vec![0u32; centers.len() + 1];
    let mut kept_centers = Vec::with_capacity(used.len());
    for (j, &sid) in used.iter().enumerate() {
        compact[sid as usize] = j as u32;
        kept_centers.push(centers[(sid - 1) as usize].clone());
    }
    let assignment: Vec<u32> = map.iter().map(|&l| compact[l as usize]).collect();
    finalize(fine_features, assignment, kept_centers)
}

/// Assigns any zero pixels (left by mask replacement) to the majority label
/// among their labeled 4-neighbors, looping until the map is total.
fn fill_orphans(map: &mut [u32], h: usize, w: usize) {
    loop {
        let mut changed = false;
        let mut any_zero = false;
        let snapshot: Vec<u32> = map.to_vec();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if snapshot[i] != 0 {
                    continue;
                }
                any_zero = true;
                let mut counts: std::collections::BTreeMap<u32, usize> = Default::default();
                let mut consider = |yy: isize, xx: isize| {
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        let l = snapshot[yy as usize * w + xx as usize];
                        if l != 0 {
                            *counts.entry(l).or_default() += 1;
                        }
                    }
                };
                consider(y as isize - 1, x as isize);
                consider(y as isize + 1, x as isize);
                consider(y as isize, x as isize - 1);
                consider(y as isize, x as isize + 1);
                if let Some((&label, _)) = counts.iter().max_by_key(|(&l, &c)| (c, std::cmp::Reverse(l))) {
                    map[i] = label;
                    changed = true;
                }
            }
        }
        if !any_zero || !changed {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from_lines(h: usize, w: usize, lines: &[(Vec<f32>, Vec<usize>)], d: usize) -> FeatureMap {
        let mut data = vec![0.0f32; h * w * d];
        for (line, pixels) in lines {
            for &i in pixels {
                data[i * d..(i + 1) * d].copy_from_slice(line);
            }
        }
        FeatureMap::new(h, w, d, data)
    }

    #[test]
    fn two_orthogonal_regions_give_two_modes() {
        let d = 8;
        let mut a = vec![0.0f32; d];
        a[0] = 1.0;
        let mut b = vec![0.0f32; d];
        b[1] = 1.0;
        let (h, w) = (16, 16);
        let left: Vec<usize> = (0..h * w).filter(|i| i % w < w / 2).collect();
        let right: Vec<usize> = (0..h * w).filter(|i| i % w >= w / 2).collect();
        let fm = map_from_lines(h, w, &[(a, left.clone()), (b, right.clone())], d);
        let seg = mean_shift(&fm, &MeanShiftParams::default());
        assert_eq!(seg.modes.len(), 2);
        for &i in &left {
            assert_eq!(seg.labels[i], seg.labels[left[0]]);
        }
        for &i in &right {
            assert_eq!(seg.labels[i], seg.labels[right[0]]);
        }
        assert_ne!(seg.labels[left[0]], seg.labels[right[0]]);
        // pairwise separation of modes after merging
        let c0 = &seg.modes[0].center;
        let c1 = &seg.modes[1].center;
        assert!(dot(c0, c1).abs() < std::f32::consts::FRAC_1_SQRT_2);
    }

    #[test]
    fn uniform_map_gives_one_mode() {
        let d = 8;
        let mut a = vec![0.0f32; d];
        a[2] = 1.0;
        let all: Vec<usize> = (0..64).collect();
        let fm = map_from_lines(8, 8, &[(a, all)], d);
        let seg = mean_shift(&fm, &MeanShiftParams::default());
        assert_eq!(seg.modes.len(), 1);
        assert!(seg.labels.iter().all(|&l| l == 1));
        assert_eq!(seg.modes[0].support, 64);
        assert!((seg.modes[0].mean_similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sign_flips_do_not_change_the_segmentation() {
        let d = 6;
        let mut a = vec![0.0f32; d];
        a[0] = 1.0;
        let mut b = vec![0.0f32; d];
        b[1] = 1.0;
        let (h, w) = (12, 12);
        let top: Vec<usize> = (0..h * w / 2).collect();
        let bottom: Vec<usize> = (h * w / 2..h * w).collect();
        let fm = map_from_lines(h, w, &[(a.clone(), top.clone()), (b.clone(), bottom.clone())], d);
        let mut flipped = fm.clone();
        // Flip signs of a scattered subset.
        for i in (0..h * w).step_by(3) {
            for v in flipped.feature_mut(i) {
                *v = -*v;
            }
        }
        let s1 = mean_shift(&fm, &MeanShiftParams::default());
        let s2 = mean_shift(&flipped, &MeanShiftParams::default());
        assert_eq!(s1.labels, s2.labels);
    }

    #[test]
    fn every_pixel_is_assigned_and_segments_nonempty() {
        let d = 4;
        let mut a = vec![0.0f32; d];
        a[0] = 1.0;
        let mut b = vec![0.0f32; d];
        b[1] = 1.0;
        let fm = map_from_lines(
            8,
            8,
            &[(a, (0..32).collect()), (b, (32..64).collect())],
            d,
        );
        let seg = mean_shift(&fm, &MeanShiftParams::default());
        assert!(seg.labels.iter().all(|&l| l >= 1));
        for (i, m) in seg.modes.iter().enumerate() {
            assert!(m.support > 0, "mode {i} empty");
        }
        let total: usize = seg.modes.iter().map(|m| m.support).sum();
        assert_eq!(total, 64);
    }

    #[test]
    fn orphan_fill_uses_neighbor_majority() {
        let mut map = vec![1, 1, 0, 2, 2, 0, 0, 0, 2];
        fill_orphans(&mut map, 3, 3);
        // Top-right joins 1 through its left neighbor; the rest join 2.
        assert_eq!(map, vec![1, 1, 1, 2, 2, 2, 2, 2, 2]);
    }
}
