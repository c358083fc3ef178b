//! Direct-loop f64 references for every loss term.
//!
//! Conventions shared with the production code, restated here so the oracle
//! stands on its own:
//!
//! * pixels are indexed row-major, label 0 is the background category,
//!   entities are 1..=k;
//! * only pixels with `valid[i]` participate in any loss;
//! * features and means are lines: every dot product enters through |.|;
//! * the segmentation MSE averages over valid pixels, the multi-scale
//!   gradient MSE zeroes masked stencil entries in both operands and divides
//!   by the full stencil count.

/// Label map plus the erosion validity mask.
pub struct RefLabels<'a> {
    pub labels: &'a [u32],
    pub valid: &'a [bool],
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl<'a> RefLabels<'a> {
    fn entity_pixels(&self, ent: u32) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == ent && self.valid[i])
            .collect()
    }

    fn background_pixels(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == 0 && self.valid[i])
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Validity under 5x5 erosion: a pixel is valid iff every pixel of the 5x5
/// window centered on it (clamped at the borders) carries the same label.
pub fn erode(labels: &[u32], h: usize, w: usize) -> Vec<bool> {
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let me = labels[y * w + x];
            let mut ok = true;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    if labels[yy * w + xx] != me {
                        ok = false;
                    }
                }
            }
            valid[y * w + x] = ok;
        }
    }
    valid
}

/// sum_i |1 - ||raw_i||| over valid pixels, divided by the valid count.
pub fn unit_loss(raw: &[Vec<f64>], valid: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (f, &v) in raw.iter().zip(valid) {
        if v {
            let norm = dot(f, f).sqrt();
            acc += (1.0 - norm).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// (1/K) sum_k (1/|E_k|) sum_{i in E_k} (1 - |f_i . mu_k|).
pub fn attraction(features: &[Vec<f64>], labels: &RefLabels, means: &[Vec<f64>]) -> f64 {
    if labels.k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for ent in 1..=labels.k as u32 {
        let px = labels.entity_pixels(ent);
        if px.is_empty() {
            continue;
        }
        let mu = &means[ent as usize - 1];
        let mut acc = 0.0;
        for &i in &px {
            acc += 1.0 - dot(&features[i], mu).abs();
        }
        total += acc / px.len() as f64;
    }
    total / labels.k as f64
}

/// (1/sqrt(K+1)) * ( bg terms + sum_k (1/|E_k|) sum_{l != k} sum_{i in E_k} |f_i . mu_l| ).
pub fn repulsion(
    features: &[Vec<f64>],
    labels: &RefLabels,
    means: &[Vec<f64>],
    bg_mean: Option<&[f64]>,
) -> f64 {
    let k = labels.k;
    if k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for ent in 1..=k as u32 {
        let px = labels.entity_pixels(ent);
        if px.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &i in &px {
            for (l, mu) in means.iter().enumerate() {
                if l + 1 != ent as usize {
                    acc += dot(&features[i], mu).abs();
                }
            }
            if let Some(bg) = bg_mean {
                acc += dot(&features[i], bg).abs();
            }
        }
        total += acc / px.len() as f64;
    }
    if bg_mean.is_some() {
        let bg_px = labels.background_pixels();
        if !bg_px.is_empty() {
            let mut acc = 0.0;
            for &i in &bg_px {
                for mu in means {
                    acc += dot(&features[i], mu).abs();
                }
            }
            total += acc / bg_px.len() as f64;
        }
    }
    total / ((k + 1) as f64).sqrt()
}

/// InfoNCE over explicit query pixels: positive key is the query's entity
/// mean, the key set is every entity mean plus the background mean.
pub fn regional_contrast(
    features: &[Vec<f64>],
    means: &[Vec<f64>],
    bg_mean: Option<&[f64]>,
    tau: f64,
    queries: &[(usize, usize)],
) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &(ent, i) in queries {
        let f = &features[i];
        let pos = dot(f, &means[ent - 1]).abs() / tau;
        let mut denom = 0.0;
        for mu in means {
            denom += (dot(f, mu).abs() / tau).exp();
        }
        if let Some(bg) = bg_mean {
            denom += (dot(f, bg).abs() / tau).exp();
        }
        total += denom.ln() - pos;
    }
    total / queries.len() as f64
}

/// Left inverse of A = [mu_1 ... mu_K] via Gaussian elimination on the
/// normal equations. Returns `None` when the Gram matrix is numerically
/// singular.
pub fn projection(means: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let k = means.len();
    let d = means[0].len();
    // Gram matrix G = A^T A (k x k) and right-hand side A^T (k x d).
    let mut g = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            g[i][j] = dot(&means[i], &means[j]);
        }
    }
    let mut rhs: Vec<Vec<f64>> = means.to_vec();
    // Forward elimination with partial pivoting.
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&a, &b| g[a][col].abs().partial_cmp(&g[b][col].abs()).unwrap())
            .unwrap();
        if g[piv][col].abs() < 1e-12 {
            return None;
        }
        g.swap(col, piv);
        rhs.swap(col, piv);
        for row in (col + 1)..k {
            let f = g[row][col] / g[col][col];
            for c in col..k {
                g[row][c] -= f * g[col][c];
            }
            for c in 0..d {
                rhs[row][c] -= f * rhs[col][c];
            }
        }
    }
    // Back substitution.
    let mut p = vec![vec![0.0; d]; k];
    for row in (0..k).rev() {
        for c in 0..d {
            let mut v = rhs[row][c];
            for col in (row + 1)..k {
                v -= g[row][col] * p[col][c];
            }
            p[row][c] = v / g[row][row];
        }
    }
    Some(p)
}

/// Per-pixel segment-space map: S_k(i) = |(P f_i)_k| (or the signed value).
pub fn segment_space(p: &[Vec<f64>], features: &[Vec<f64>], signed: bool) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|f| {
            p.iter()
                .map(|row| {
                    let v = dot(row, f);
                    if signed {
                        v
                    } else {
                        v.abs()
                    }
                })
                .collect()
        })
        .collect()
}

/// (1/K) sum_k MSE(S_k, binary mask of k) over valid pixels.
pub fn segmentation_loss(s: &[Vec<f64>], labels: &RefLabels) -> f64 {
    let k = labels.k;
    if k == 0 {
        return 0.0;
    }
    let n_valid = labels.valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for ent in 1..=k {
        let mut acc = 0.0;
        for i in 0..labels.labels.len() {
            if labels.valid[i] {
                let target = if labels.labels[i] == ent as u32 { 1.0 } else { 0.0 };
                let diff = s[i][ent - 1] - target;
                acc += diff * diff;
            }
        }
        total += acc / n_valid as f64;
    }
    total / k as f64
}

fn pool2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x2 in 0..ow {
            out[y * ow + x2] = 0.25
                * (x[(2 * y) * w + 2 * x2]
                    + x[(2 * y) * w + 2 * x2 + 1]
                    + x[(2 * y + 1) * w + 2 * x2]
                    + x[(2 * y + 1) * w + 2 * x2 + 1]);
        }
    }
    out
}

fn pool2_and(v: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = v[(2 * y) * w + 2 * x]
                && v[(2 * y) * w + 2 * x + 1]
                && v[(2 * y + 1) * w + 2 * x]
                && v[(2 * y + 1) * w + 2 * x + 1];
        }
    }
    out
}

/// Multi-scale forward-difference loss between per-channel maps `s` and
/// `s_hat`, each flat [k][h][w]. Scales halve the resolution via 2x2 average
/// pooling; validity pools with logical AND; a stencil entry is zeroed in
/// both operands when either endpoint is invalid. Each (channel, scale) MSE
/// divides by the full stencil count of that scale.
pub fn gradient_loss(
    s: &[f64],
    s_hat: &[f64],
    valid: &[bool],
    k: usize,
    h: usize,
    w: usize,
    scales: usize,
) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for ent in 0..k {
        let mut sc: Vec<f64> = s[ent * h * w..(ent + 1) * h * w].to_vec();
        let mut tc: Vec<f64> = s_hat[ent * h * w..(ent + 1) * h * w].to_vec();
        let mut vc: Vec<bool> = valid.to_vec();
        let (mut ch, mut cw) = (h, w);
        for m in 0..scales {
            if m > 0 {
                if ch < 2 || cw < 2 || ch % 2 != 0 || cw % 2 != 0 {
                    break;
                }
                sc = pool2(&sc, ch, cw);
                tc = pool2(&tc, ch, cw);
                vc = pool2_and(&vc, ch, cw);
                ch /= 2;
                cw /= 2;
            }
            if ch < 2 && cw < 2 {
                break;
            }
            let mut acc = 0.0;
            let mut count = 0usize;
            // x stencil
            for y in 0..ch {
                for x in 0..cw.saturating_sub(1) {
                    count += 1;
                    if vc[y * cw + x] && vc[y * cw + x + 1] {
                        let ds = sc[y * cw + x + 1] - sc[y * cw + x];
                        let dt = tc[y * cw + x + 1] - tc[y * cw + x];
                        acc += (ds - dt) * (ds - dt);
                    }
                }
            }
            // y stencil
            for y in 0..ch.saturating_sub(1) {
                for x in 0..cw {
                    count += 1;
                    if vc[y * cw + x] && vc[(y + 1) * cw + x] {
                        let ds = sc[(y + 1) * cw + x] - sc[y * cw + x];
                        let dt = tc[(y + 1) * cw + x] - tc[y * cw + x];
                        acc += (ds - dt) * (ds - dt);
                    }
                }
            }
            if count > 0 {
                total += acc / count as f64;
            }
        }
    }
    total / k as f64
}

/// Mean and min of |f . mu| over a feature set.
pub fn scatter_stats(features: &[Vec<f64>], mu: &[f64]) -> (f64, f64) {
    let mut acc = 0.0;
    let mut min = f64::INFINITY;
    for f in features {
        let a = dot(f, mu).abs();
        acc += a;
        min = min.min(a);
    }
    (acc / features.len() as f64, min)
}
