//! The feature space: unit vectors with antipodal equivalence (lines through
//! the origin), their metric, and orientation averaging.
//!
//! Averaging a set of lines euclidean-style can cancel to zero, so the mean
//! orientation is the dominant eigenvector of the scatter matrix
//! `M = sum_i f_i f_i^T`, found by power iteration with f64 accumulation.

use crate::error::GeometryError;
use crate::tensor::Tensor;

/// Unit-length feature vector; `v` and `-v` name the same line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineFeature(Vec<f32>);

impl LineFeature {
    /// Wraps a vector that is already unit length (within 1e-5).
    pub fn from_unit(v: Vec<f32>) -> LineFeature {
        debug_assert!(
            {
                let n: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                (n - 1.0).abs() < 1e-5
            },
            "LineFeature::from_unit on a non-unit vector"
        );
        LineFeature(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl std::ops::Deref for LineFeature {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

/// Mean orientation of an entity: the line plus its provenance.
#[derive(Debug, Clone)]
pub struct TargetLine {
    pub mu: LineFeature,
    pub entity_id: u32,
    pub support: usize,
    /// Top two scatter eigenvalues tied within 1e-9: the set has no single
    /// dominant orientation and the result picked one arbitrarily.
    pub ambiguous: bool,
}

/// Unit-normalizes a vector, rejecting near-zero input.
pub fn normalize(v: &[f32]) -> Result<LineFeature, GeometryError> {
    let norm: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(GeometryError::DegenerateFeature { norm });
    }
    Ok(LineFeature(v.iter().map(|&x| (x as f64 / norm) as f32).collect()))
}

/// Distance between lines: 1 - |f1 . f2|, in [0, 1]. Zero iff parallel up to
/// sign, one iff orthogonal.
pub fn line_distance(f1: &[f32], f2: &[f32]) -> f32 {
    let dot: f64 = f1
        .iter()
        .zip(f2)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    (1.0 - dot.abs()).clamp(0.0, 1.0) as f32
}

/// Outcome of an orientation average.
#[derive(Debug, Clone)]
pub struct OrientationAverage {
    pub mu: LineFeature,
    pub ambiguous: bool,
}

/// Scatter matrix in f64, upper triangle mirrored.
fn scatter_matrix(features: &[&[f32]], weights: Option<&[f64]>) -> Vec<f64> {
    let d = features[0].len();
    let mut m = vec![0.0f64; d * d];
    for (idx, f) in features.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[idx]);
        for r in 0..d {
            let fr = f[r] as f64 * w;
            for c in r..d {
                m[r * d + c] += fr * f[c] as f64;
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            m[r * d + c] = m[c * d + r];
        }
    }
    m
}

fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for r in 0..d {
        let row = &m[r * d..(r + 1) * d];
        let mut acc = 0.0;
        for c in 0..d {
            acc += row[c] * v[c];
        }
        out[r] = acc;
    }
}

fn vnorm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn line_dist64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot.abs()).max(0.0)
}

/// Power iteration on a scatter matrix from the given start direction.
/// Stops when successive iterates are closer than 1e-12 in line distance
/// (line distance is quadratic in the angle, so this still leaves the result
/// within ~1e-8 of the true eigenvector even at modest spectral gaps),
/// capped at 200 iterations.
fn power_iterate(m: &[f64], d: usize, init: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = init.to_vec();
    let n = vnorm(&v);
    if n <= 0.0 {
        v = vec![0.0; d];
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= n);
    }
    let mut w = vec![0.0; d];
    for _ in 0..200 {
        matvec(m, &v, &mut w);
        let wn = vnorm(&w);
        if wn <= 1e-300 {
            break; // zero scatter in this direction; keep current v
        }
        let next: Vec<f64> = w.iter().map(|x| x / wn).collect();
        let dist = line_dist64(&next, &v);
        v = next;
        if dist < 1e-12 {
            break;
        }
    }
    v
}

/// Estimated gap between the two largest eigenvalues, for ambiguity flags.
fn eigen_gap(m: &[f64], d: usize, v1: &[f64]) -> f64 {
    let mut w = vec![0.0; d];
    matvec(m, v1, &mut w);
    let lambda1: f64 = v1.iter().zip(&w).map(|(a, b)| a * b).sum();
    // Deflate and run a short power iteration for lambda2.
    let mut m2 = m.to_vec();
    for r in 0..d {
        for c in 0..d {
            m2[r * d + c] -= lambda1 * v1[r] * v1[c];
        }
    }
    // Start least aligned with v1 for a fair shot at the second eigenvector.
    let amin = (0..d)
        .min_by(|&a, &b| v1[a].abs().partial_cmp(&v1[b].abs()).unwrap())
        .unwrap();
    let mut u = vec![0.0; d];
    u[amin] = 1.0;
    for _ in 0..40 {
        matvec(&m2, &u, &mut w);
        let wn = vnorm(&w);
        if wn <= 1e-300 {
            return lambda1; // deflated matrix is ~zero: gap is lambda1 itself
        }
        for (ui, wi) in u.iter_mut().zip(&w) {
            *ui = wi / wn;
        }
    }
    matvec(&m2, &u, &mut w);
    let lambda2: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    lambda1 - lambda2
}

/// Flips the sign so the largest-magnitude coordinate is positive; lines are
/// sign-free, this just makes outputs reproducible to the eye.
fn canonical_sign(v: &mut [f64]) {
    let imax = (0..v.len())
        .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
        .unwrap();
    if v[imax] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn finish(m: &[f64], d: usize, init: &[f64]) -> OrientationAverage {
    let mut v = power_iterate(m, d, init);
    let gap = eigen_gap(m, d, &v);
    canonical_sign(&mut v);
    let n = vnorm(&v);
    let mu: Vec<f32> = v.iter().map(|&x| (x / n) as f32).collect();
    OrientationAverage {
        mu: LineFeature(mu),
        ambiguous: gap < 1e-9,
    }
}

/// Dominant eigenvector of `sum_i f_i f_i^T`, initialized from the input
/// feature with the largest image under the scatter matrix.
pub fn orientation_average(features: &[&[f32]]) -> Result<OrientationAverage, GeometryError> {
    if features.is_empty() {
        return Err(GeometryError::EmptyFeatureSet);
    }
    let d = features[0].len();
    let m = scatter_matrix(features, None);
    // init = argmax_f ||M f||
    let mut best = vec![0.0f64; d];
    let mut best_norm = -1.0;
    let mut w = vec![0.0; d];
    for f in features {
        let fv: Vec<f64> = f.iter().map(|&x| x as f64).collect();
        matvec(&m, &fv, &mut w);
        let n = vnorm(&w);
        if n > best_norm {
            best_norm = n;
            best.copy_from_slice(&w);
        }
    }
    if best_norm <= 0.0 {
        best[0] = 1.0;
    }
    Ok(finish(&m, d, &best))
}

/// Orientation average warm-started from a known nearby line. Converges to
/// the same fixed point as [`orientation_average`]; used by mean-shift where
/// the previous center is an excellent start.
pub fn orientation_average_from(
    features: &[&[f32]],
    init: &[f32],
) -> Result<OrientationAverage, GeometryError> {
    if features.is_empty() {
        return Err(GeometryError::EmptyFeatureSet);
    }
    let d = features[0].len();
    let m = scatter_matrix(features, None);
    let init64: Vec<f64> = init.iter().map(|&x| x as f64).collect();
    Ok(finish(&m, d, &init64))
}

/// Weighted orientation average (weights scale each feature's scatter
/// contribution); used when merging mean-shift modes by basin size.
pub fn orientation_average_weighted(
    features: &[&[f32]],
    weights: &[f64],
) -> Result<OrientationAverage, GeometryError> {
    if features.is_empty() {
        return Err(GeometryError::EmptyFeatureSet);
    }
    let d = features[0].len();
    let m = scatter_matrix(features, Some(weights));
    let mut best = vec![0.0f64; d];
    let mut best_norm = -1.0;
    let mut w = vec![0.0; d];
    for f in features {
        let fv: Vec<f64> = f.iter().map(|&x| x as f64).collect();
        matvec(&m, &fv, &mut w);
        let n = vnorm(&w);
        if n > best_norm {
            best_norm = n;
            best.copy_from_slice(&w);
        }
    }
    if best_norm <= 0.0 {
        best[0] = 1.0;
    }
    Ok(finish(&m, d, &best))
}

/// Mean and minimum of |f . mu| over a feature set.
pub fn scatter_stats(features: &[&[f32]], mu: &[f32]) -> (f32, f32) {
    let mut acc = 0.0f64;
    let mut min = f64::INFINITY;
    for f in features {
        let dot: f64 = f.iter().zip(mu).map(|(&a, &b)| a as f64 * b as f64).sum();
        let a = dot.abs();
        acc += a;
        min = min.min(a);
    }
    ((acc / features.len() as f64) as f32, min as f32)
}

/// Per-pixel features in pixel-major layout: `data[(y*w + x)*d ..][..d]`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f32>) -> FeatureMap {
        assert_eq!(data.len(), h * w * d);
        FeatureMap { h, w, d, data }
    }

    /// Transposes a `[d, h, w]` tensor into pixel-major order.
    pub fn from_channel_major(t: &Tensor) -> FeatureMap {
        let (d, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let src = t.data();
        let mut data = vec![0.0f32; d * h * w];
        for c in 0..d {
            for p in 0..h * w {
                data[p * d + c] = src[c * h * w + p];
            }
        }
        FeatureMap { h, w, d, data }
    }

    pub fn n_pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn feature(&self, pixel: usize) -> &[f32] {
        &self.data[pixel * self.d..(pixel + 1) * self.d]
    }

    pub fn feature_mut(&mut self, pixel: usize) -> &mut [f32] {
        &mut self.data[pixel * self.d..(pixel + 1) * self.d]
    }
}
