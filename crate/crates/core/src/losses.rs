//! The training objective.
//!
//! Six terms over per-pixel line features:
//!
//! * attraction: pull each entity pixel toward its mean orientation;
//! * repulsion: push pixels orthogonal to every other mean and to the
//!   background orientation, scaled by 1/sqrt(K+1);
//! * regional contrast: sampled InfoNCE with entity/background means as keys,
//!   covering the case where two entities collapse onto similar lines;
//! * unit: |1 - ||raw||| on the pre-normalization output;
//! * segmentation: MSE between the segment-space map S_k = |(P f)_k| and the
//!   binary entity masks, where P is the left inverse of the mean matrix;
//! * multi-scale gradient: MSE of forward differences of S_k across an
//!   average-pooling pyramid.
//!
//! Total: la + lr + ls + 0.125*lrc + 0.025*lg + 0.05*lu. When the means are
//! too collinear for a stable left inverse the projection is Degenerate and
//! the segment-space terms drop out for that sample.
//!
//! Means are constants during backpropagation (no gradient through the
//! eigenvector); `mu_straight_through` switches to a differentiable
//! sign-aligned average for experimentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::geometry::{self, FeatureMap, LineFeature, TargetLine};
use crate::labels::EntityLabels;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::kernels::ResampleMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_rc: f32,
    pub lambda_g: f32,
    pub lambda_u: f32,
    pub tau: f32,
    pub rc_queries: usize,
    /// Threshold on the smallest singular value of the mean matrix below
    /// which the projection is declared degenerate.
    pub sigma_min: f32,
    pub grad_scales: usize,
    /// Use the signed projection in segment space instead of |.|.
    pub signed_segment_space: bool,
    /// Let gradient flow into the means via a sign-aligned average.
    pub mu_straight_through: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_rc: 0.125,
            lambda_g: 0.025,
            lambda_u: 0.05,
            tau: 0.5,
            rc_queries: 256,
            sigma_min: 1e-3,
            grad_scales: 4,
            signed_segment_space: false,
            mu_straight_through: false,
        }
    }
}

/// Which terms participate; `ablate` and `--ablate-losses` switch these off
/// by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub la: bool,
    pub lr: bool,
    pub lrc: bool,
    pub lu: bool,
    pub ls: bool,
    pub lg: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            la: true,
            lr: true,
            lrc: true,
            lu: true,
            ls: true,
            lg: true,
        }
    }
}

impl LossToggles {
    /// Disables the named components ("la,lr,lrc,lu,ls,lg").
    pub fn disable_list(list: &str) -> Result<LossToggles, String> {
        let mut t = LossToggles::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "la" => t.la = false,
                "lr" => t.lr = false,
                "lrc" => t.lrc = false,
                "lu" => t.lu = false,
                "ls" => t.ls = false,
                "lg" => t.lg = false,
                other => return Err(format!("unknown loss component '{other}'")),
            }
        }
        Ok(t)
    }
}

/// Scalar values of every component for one sample (or an epoch average).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub la: f32,
    pub lr: f32,
    pub lrc: f32,
    pub lu: f32,
    pub ls: f32,
    pub lg: f32,
    pub total: f32,
    pub degenerate_projection: bool,
}

impl LossReport {
    pub fn components(&self) -> [f32; 7] {
        [
            self.la, self.lr, self.lrc, self.lu, self.ls, self.lg, self.total,
        ]
    }

    pub fn is_finite(&self) -> Option<&'static str> {
        let names = ["la", "lr", "lrc", "lu", "ls", "lg", "total"];
        for (v, n) in self.components().iter().zip(names) {
            if !v.is_finite() {
                return Some(n);
            }
        }
        None
    }
}

/// Entity means plus the background orientation when background pixels exist.
#[derive(Debug, Clone)]
pub struct MeanSet {
    pub entities: Vec<TargetLine>,
    pub background: Option<TargetLine>,
}

impl MeanSet {
    pub fn k(&self) -> usize {
        self.entities.len()
    }
}

/// Orientation-averages the valid pixels of every entity and of the
/// background. Means are detached from the graph by construction.
pub fn compute_means(features: &FeatureMap, labels: &EntityLabels) -> MeanSet {
    let mut entities = Vec::with_capacity(labels.k);
    for ent in 1..=labels.k as u32 {
        let px = labels.entity_pixels(ent);
        let feats: Vec<&[f32]> = px.iter().map(|&i| features.feature(i)).collect();
        let avg = geometry::orientation_average(&feats)
            .expect("entity has at least one valid pixel by construction");
        entities.push(TargetLine {
            mu: avg.mu,
            entity_id: ent,
            support: px.len(),
            ambiguous: avg.ambiguous,
        });
    }
    let bg_px = labels.background_pixels();
    let background = if bg_px.is_empty() {
        None
    } else {
        let feats: Vec<&[f32]> = bg_px.iter().map(|&i| features.feature(i)).collect();
        let avg = geometry::orientation_average(&feats).expect("non-empty");
        Some(TargetLine {
            mu: avg.mu,
            entity_id: 0,
            support: bg_px.len(),
            ambiguous: avg.ambiguous,
        })
    };
    MeanSet {
        entities,
        background,
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn valid_mask_tensor(labels: &EntityLabels) -> Tensor {
    Tensor::new(
        &[1, labels.n_pixels()],
        labels
            .valid
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("mask shape")
}

/// Rows of entity means as a [K, d] var, plus the background mean as [1, d].
/// Constants by default; with `mu_straight_through` the entity rows become a
/// differentiable sign-aligned average of member features.
fn mean_rows(
    g: &mut Graph,
    features: Var,
    labels: &EntityLabels,
    means: &MeanSet,
    cfg: &LossConfig,
) -> Result<(Option<Var>, Option<Var>), TensorError> {
    let k = means.k();
    let d = if k > 0 {
        means.entities[0].mu.dim()
    } else if let Some(bg) = &means.background {
        bg.mu.dim()
    } else {
        return Ok((None, None));
    };
    let n = labels.n_pixels();

    let entity_rows = if k == 0 {
        None
    } else if !cfg.mu_straight_through {
        let mut data = Vec::with_capacity(k * d);
        for t in &means.entities {
            data.extend_from_slice(&t.mu);
        }
        Some(g.constant(Tensor::new(&[k, d], data)?))
    } else {
        let fvals = g.value(features).data().to_vec();
        let mut rows = Vec::with_capacity(k);
        for t in &means.entities {
            let px = labels.entity_pixels(t.entity_id);
            let mut wdata = vec![0.0f32; n];
            for &i in &px {
                let mut dot = 0.0f64;
                for c in 0..d {
                    dot += fvals[c * n + i] as f64 * t.mu[c] as f64;
                }
                let sign = if dot < 0.0 { -1.0 } else { 1.0 };
                wdata[i] = sign / px.len() as f32;
            }
            let w = g.constant(Tensor::new(&[n, 1], wdata)?);
            let v = g.matmul(features, w)?; // [d, 1]
            let norm_ok = {
                let vd = g.value(v).data();
                vd.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() > 1e-12
            };
            if norm_ok {
                let sq = g.square(v)?;
                let nsq = g.reduce(crate::tensor::kernels::ReduceOp::Sum, sq, Some(&[0]), true)?;
                let nn = g.sqrt(nsq)?;
                let unit = g.div(v, nn)?;
                rows.push(g.reshape(unit, &[1, d])?);
            } else {
                // Signs cancelled; fall back to the detached mean.
                rows.push(g.constant(Tensor::new(&[1, d], t.mu.to_vec())?));
            }
        }
        Some(g.concat0(&rows)?)
    };

    let bg_row = match &means.background {
        None => None,
        Some(bg) => Some(g.constant(Tensor::new(&[1, d], bg.mu.to_vec())?)),
    };
    Ok((entity_rows, bg_row))
}

/// Unit-length regularizer on the raw network output:
/// sum over valid pixels of |1 - ||raw_i|||, divided by the valid count.
pub fn unit_loss(
    g: &mut Graph,
    raw_flat: Var,
    labels: &EntityLabels,
) -> Result<Var, TensorError> {
    let n_valid = labels.valid_count();
    if n_valid == 0 {
        return Ok(zero(g));
    }
    let sq = g.square(raw_flat)?;
    let nsq = g.reduce(crate::tensor::kernels::ReduceOp::Sum, sq, Some(&[0]), true)?;
    let norms = g.sqrt(nsq)?; // [1, N]
    let neg = g.mul_scalar(norms, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let dev = g.abs(one_minus)?;
    let mask = g.constant(valid_mask_tensor(labels));
    let masked = g.mul(dev, mask)?;
    let total = g.sum_all(masked)?;
    g.mul_scalar(total, 1.0 / n_valid as f32)
}

/// (1/K) sum_k (1/|E_k|) sum_{i in E_k} (1 - |f_i . mu_k|), valid pixels only.
pub fn attraction_loss(
    g: &mut Graph,
    features: Var,
    labels: &EntityLabels,
    means: &MeanSet,
    cfg: &LossConfig,
) -> Result<Var, TensorError> {
    let k = means.k();
    if k == 0 {
        return Ok(zero(g));
    }
    let n = labels.n_pixels();
    let (rows, _) = mean_rows(g, features, labels, means, cfg)?;
    let rows = rows.expect("k > 0");
    let dots = g.matmul(rows, features)?; // [K, N]
    let adots = g.abs(dots)?;
    let neg = g.mul_scalar(adots, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;

    let mut wdata = vec![0.0f32; k * n];
    for t in &means.entities {
        let px = labels.entity_pixels(t.entity_id);
        let w = 1.0 / (k as f32 * px.len() as f32);
        let row = (t.entity_id - 1) as usize;
        for &i in &px {
            wdata[row * n + i] = w;
        }
    }
    let weights = g.constant(Tensor::new(&[k, n], wdata)?);
    let weighted = g.mul(one_minus, weights)?;
    g.sum_all(weighted)
}

/// (1/sqrt(K+1)) * ( cross-entity |f . mu_l| terms + background terms ).
pub fn repulsion_loss(
    g: &mut Graph,
    features: Var,
    labels: &EntityLabels,
    means: &MeanSet,
    cfg: &LossConfig,
) -> Result<Var, TensorError> {
    let k = means.k();
    if k == 0 {
        return Ok(zero(g));
    }
    let n = labels.n_pixels();
    let (rows, bg_row) = mean_rows(g, features, labels, means, cfg)?;
    let rows = rows.expect("k > 0");
    let stacked = match bg_row {
        Some(bg) => g.concat0(&[rows, bg])?,
        None => rows,
    };
    let n_rows = k + means.background.is_some() as usize;
    let dots = g.matmul(stacked, features)?; // [n_rows, N]
    let adots = g.abs(dots)?;

    let scale = 1.0 / ((k + 1) as f32).sqrt();
    let mut wdata = vec![0.0f32; n_rows * n];
    for t in &means.entities {
        let px = labels.entity_pixels(t.entity_id);
        let w = scale / px.len() as f32;
        for &i in &px {
            for l in 0..k {
                if l != (t.entity_id - 1) as usize {
                    wdata[l * n + i] = w;
                }
            }
            if means.background.is_some() {
                wdata[k * n + i] = w;
            }
        }
    }
    if means.background.is_some() {
        let bg_px = labels.background_pixels();
        if !bg_px.is_empty() {
            let w = scale / bg_px.len() as f32;
            for &i in &bg_px {
                for l in 0..k {
                    wdata[l * n + i] = w;
                }
            }
        }
    }
    let weights = g.constant(Tensor::new(&[n_rows, n], wdata)?);
    let weighted = g.mul(adots, weights)?;
    g.sum_all(weighted)
}

/// Samples `min(queries, |E_k|)` valid pixels per entity without
/// replacement. Deterministic given the rng state; callers replicating the
/// draw (tests, reference computations) can clone the rng beforehand.
pub fn sample_queries(
    labels: &EntityLabels,
    queries_per_entity: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(u32, Vec<usize>)> {
    let mut out = Vec::with_capacity(labels.k);
    for ent in 1..=labels.k as u32 {
        let mut px = labels.entity_pixels(ent);
        let m = queries_per_entity.min(px.len());
        for i in 0..m {
            let j = i + rng.gen_range(0..px.len() - i);
            px.swap(i, j);
        }
        px.truncate(m);
        out.push((ent, px));
    }
    out
}

/// Sparse InfoNCE: queries are sampled valid pixel features of each entity,
/// the positive key is the entity mean, negatives are the other means plus
/// the background mean. Returns 0 when fewer than two entities exist.
pub fn regional_contrast_loss(
    g: &mut Graph,
    features: Var,
    labels: &EntityLabels,
    means: &MeanSet,
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var, TensorError> {
    let k = means.k();
    if k < 2 {
        return Ok(zero(g));
    }
    let n = labels.n_pixels();
    let (rows, bg_row) = mean_rows(g, features, labels, means, cfg)?;
    let rows = rows.expect("k >= 2");

    let edots = g.matmul(rows, features)?; // [K, N]
    let eabs = g.abs(edots)?;
    let escaled = g.mul_scalar(eabs, 1.0 / cfg.tau)?;
    let eexp = g.exp(escaled)?;
    let mut denom = g.reduce(
        crate::tensor::kernels::ReduceOp::Sum,
        eexp,
        Some(&[0]),
        true,
    )?; // [1, N]
    if let Some(bg) = bg_row {
        let bdots = g.matmul(bg, features)?;
        let babs = g.abs(bdots)?;
        let bscaled = g.mul_scalar(babs, 1.0 / cfg.tau)?;
        let bexp = g.exp(bscaled)?;
        denom = g.add(denom, bexp)?;
    }
    let lse = g.ln(denom)?; // [1, N]
    let ones = g.constant(Tensor::full(&[k, 1], 1.0));
    let lse_rep = g.matmul(ones, lse)?; // [K, N]
    let terms = g.sub(lse_rep, escaled)?; // -log softmax numerator per (k, i)

    let sampled = sample_queries(labels, cfg.rc_queries, rng);
    let total_queries: usize = sampled.iter().map(|(_, px)| px.len()).sum();
    if total_queries == 0 {
        return Ok(zero(g));
    }
    let mut wdata = vec![0.0f32; k * n];
    for (ent, px) in &sampled {
        let row = (*ent - 1) as usize;
        for &i in px {
            wdata[row * n + i] = 1.0 / total_queries as f32;
        }
    }
    let weights = g.constant(Tensor::new(&[k, n], wdata)?);
    let weighted = g.mul(terms, weights)?;
    g.sum_all(weighted)
}

/// Left inverse of the matrix of mean columns, or Degenerate when the means
/// are too collinear to invert stably.
#[derive(Debug, Clone)]
pub enum Projection {
    Valid(ProjectionMatrix),
    Degenerate { condition: f32 },
}

#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    /// [K, d]; rows satisfy P mu_k = e_k.
    pub p: Tensor,
    pub means: Vec<LineFeature>,
    /// Smallest singular value of the mean matrix.
    pub condition: f32,
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi sweeps
/// (values only; k is tiny).
fn sym_eig_min(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    for _ in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-15 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for kk in 0..n {
                    let mkp = m[kk * n + p];
                    let mkq = m[kk * n + q];
                    m[kk * n + p] = c * mkp - s * mkq;
                    m[kk * n + q] = s * mkp + c * mkq;
                }
                for kk in 0..n {
                    let mpk = m[p * n + kk];
                    let mqk = m[q * n + kk];
                    m[p * n + kk] = c * mpk - s * mqk;
                    m[q * n + kk] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i * n + i]).fold(f64::INFINITY, f64::min)
}

/// P = (A^T A)^-1 A^T via Gauss-Jordan on the Gram matrix, f64 throughout.
pub fn projection_matrix(means: &[TargetLine], sigma_min: f32) -> Projection {
    let k = means.len();
    if k == 0 {
        return Projection::Degenerate { condition: 0.0 };
    }
    let d = means[0].mu.dim();
    let cols: Vec<Vec<f64>> = means
        .iter()
        .map(|t| t.mu.iter().map(|&x| x as f64).collect())
        .collect();
    let mut gram = vec![0.0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
        }
    }
    let lam_min = sym_eig_min(&gram, k);
    let condition = lam_min.max(0.0).sqrt() as f32;
    if lam_min < (sigma_min as f64) * (sigma_min as f64) {
        return Projection::Degenerate { condition };
    }

    // Gauss-Jordan inverse of the Gram matrix with partial pivoting.
    let mut aug = vec![0.0f64; k * 2 * k];
    for i in 0..k {
        for j in 0..k {
            aug[i * 2 * k + j] = gram[i * k + j];
        }
        aug[i * 2 * k + k + i] = 1.0;
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&a, &b| {
                aug[a * 2 * k + col]
                    .abs()
                    .partial_cmp(&aug[b * 2 * k + col].abs())
                    .unwrap()
            })
            .unwrap();
        if aug[piv * 2 * k + col].abs() < 1e-12 {
            return Projection::Degenerate { condition };
        }
        if piv != col {
            for j in 0..2 * k {
                aug.swap(col * 2 * k + j, piv * 2 * k + j);
            }
        }
        let pv = aug[col * 2 * k + col];
        for j in 0..2 * k {
            aug[col * 2 * k + j] /= pv;
        }
        for row in 0..k {
            if row != col {
                let f = aug[row * 2 * k + col];
                if f != 0.0 {
                    for j in 0..2 * k {
                        aug[row * 2 * k + j] -= f * aug[col * 2 * k + j];
                    }
                }
            }
        }
    }
    // P = G^-1 A^T: row i of P = sum_j inv[i][j] * mu_j.
    let mut p = vec![0.0f32; k * d];
    for i in 0..k {
        for c in 0..d {
            let mut acc = 0.0f64;
            for j in 0..k {
                acc += aug[i * 2 * k + k + j] * cols[j][c];
            }
            p[i * d + c] = acc as f32;
        }
    }
    Projection::Valid(ProjectionMatrix {
        p: Tensor::new(&[k, d], p).expect("projection shape"),
        means: means.iter().map(|t| t.mu.clone()).collect(),
        condition,
    })
}

/// Segment-space map S = |P f| (signed when configured), shape [K, N].
/// P is a constant; gradient flows through the features only.
pub fn segment_space(
    g: &mut Graph,
    projection: &ProjectionMatrix,
    features: Var,
    signed: bool,
) -> Result<Var, TensorError> {
    let p = g.constant(projection.p.clone());
    let proj = g.matmul(p, features)?;
    if signed {
        Ok(proj)
    } else {
        g.abs(proj)
    }
}

/// (1/K) sum_k MSE(S_k, binary mask of k) over valid pixels; background
/// pixels have target 0 in every channel.
pub fn segmentation_loss(
    g: &mut Graph,
    s: Var,
    labels: &EntityLabels,
) -> Result<Var, TensorError> {
    let k = labels.k;
    let n = labels.n_pixels();
    let n_valid = labels.valid_count();
    if k == 0 || n_valid == 0 {
        return Ok(zero(g));
    }
    let mut shat = vec![0.0f32; k * n];
    for i in 0..n {
        let l = labels.labels[i];
        if l > 0 {
            shat[(l as usize - 1) * n + i] = 1.0;
        }
    }
    let shat = g.constant(Tensor::new(&[k, n], shat)?);
    let diff = g.sub(s, shat)?;
    let sq = g.square(diff)?;
    let mask = g.constant(valid_mask_tensor(labels));
    let masked = g.mul(sq, mask)?;
    let total = g.sum_all(masked)?;
    g.mul_scalar(total, 1.0 / (k as f32 * n_valid as f32))
}

/// Multi-scale forward-difference loss between S and the binary masks.
/// Coarser scales average-pool both operands (targets go soft) and AND-pool
/// validity; stencil entries touching invalid pixels are zeroed in both
/// operands. Scales stop early when a dimension is odd or below 2.
pub fn multiscale_gradient_loss(
    g: &mut Graph,
    s: Var,
    labels: &EntityLabels,
    scales: usize,
) -> Result<Var, TensorError> {
    let k = labels.k;
    let (h, w) = (labels.h, labels.w);
    if k == 0 || scales == 0 {
        return Ok(zero(g));
    }
    let n = labels.n_pixels();
    let mut shat = vec![0.0f32; k * n];
    for i in 0..n {
        let l = labels.labels[i];
        if l > 0 {
            shat[(l as usize - 1) * n + i] = 1.0;
        }
    }

    let mut s_m = g.reshape(s, &[k, h, w])?;
    let mut shat_m = Tensor::new(&[k, h, w], shat)?;
    let mut valid_m = labels.valid.clone();
    let (mut ch, mut cw) = (h, w);

    let mut total = zero(g);
    for m in 0..scales {
        if m > 0 {
            if ch < 2 || cw < 2 || ch % 2 != 0 || cw % 2 != 0 {
                break;
            }
            s_m = g.resample(s_m, ch / 2, cw / 2, ResampleMode::AvgPool)?;
            shat_m = crate::tensor::kernels::resample_forward(
                &shat_m,
                ch / 2,
                cw / 2,
                ResampleMode::AvgPool,
            )?;
            valid_m = and_pool(&valid_m, ch, cw);
            ch /= 2;
            cw /= 2;
        }
        if ch < 2 && cw < 2 {
            break;
        }
        let mut scale_sum: Option<Var> = None;
        let mut stencil_count = 0usize;
        if cw >= 2 {
            let dx = g.diff_x(s_m)?;
            let dxh = crate::tensor::kernels::diff_forward(&shat_m, true)?;
            let dxh = g.constant(dxh);
            let maskx = stencil_mask(&valid_m, ch, cw, true);
            let maskx = g.constant(maskx);
            let diff = g.sub(dx, dxh)?;
            let masked = g.mul(diff, maskx)?;
            let sq = g.square(masked)?;
            let ssum = g.sum_all(sq)?;
            scale_sum = Some(ssum);
            stencil_count += ch * (cw - 1);
        }
        if ch >= 2 {
            let dy = g.diff_y(s_m)?;
            let dyh = crate::tensor::kernels::diff_forward(&shat_m, false)?;
            let dyh = g.constant(dyh);
            let masky = stencil_mask(&valid_m, ch, cw, false);
            let masky = g.constant(masky);
            let diff = g.sub(dy, dyh)?;
            let masked = g.mul(diff, masky)?;
            let sq = g.square(masked)?;
            let ssum = g.sum_all(sq)?;
            scale_sum = Some(match scale_sum {
                Some(x) => g.add(x, ssum)?,
                None => ssum,
            });
            stencil_count += (ch - 1) * cw;
        }
        if let Some(sv) = scale_sum {
            let term = g.mul_scalar(sv, 1.0 / (k as f32 * stencil_count as f32))?;
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

fn and_pool(valid: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = valid[(2 * y) * w + 2 * x]
                && valid[(2 * y) * w + 2 * x + 1]
                && valid[(2 * y + 1) * w + 2 * x]
                && valid[(2 * y + 1) * w + 2 * x + 1];
        }
    }
    out
}

/// 0/1 mask over stencil entries whose both endpoints are valid, shaped
/// [1, h, w-1] (x) or [1, h-1, w] (y) to broadcast over channels.
fn stencil_mask(valid: &[bool], h: usize, w: usize, along_x: bool) -> Tensor {
    if along_x {
        let mut data = vec![0.0f32; h * (w - 1)];
        for y in 0..h {
            for x in 0..w - 1 {
                if valid[y * w + x] && valid[y * w + x + 1] {
                    data[y * (w - 1) + x] = 1.0;
                }
            }
        }
        Tensor::new(&[1, h, w - 1], data).expect("mask shape")
    } else {
        let mut data = vec![0.0f32; (h - 1) * w];
        for y in 0..h - 1 {
            for x in 0..w {
                if valid[y * w + x] && valid[(y + 1) * w + x] {
                    data[y * w + x] = 1.0;
                }
            }
        }
        Tensor::new(&[1, h - 1, w], data).expect("mask shape")
    }
}

/// Everything `total_loss` hands back: the scalar node for backward plus the
/// per-component report.
pub struct TotalLoss {
    pub total: Var,
    pub report: LossReport,
}

/// Builds the weighted objective with the configured toggles. The projection
/// is computed only when a segment-space term is enabled; a degenerate
/// projection zeroes ls and lg and sets the report flag.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    raw_flat: Var,
    features: Var,
    labels: &EntityLabels,
    means: &MeanSet,
    cfg: &LossConfig,
    toggles: LossToggles,
    rc_rng: &mut ChaCha8Rng,
) -> Result<TotalLoss, TensorError> {
    let mut report = LossReport::default();
    let mut total = zero(g);

    if toggles.la {
        let v = attraction_loss(g, features, labels, means, cfg)?;
        report.la = g.scalar_value(v);
        total = g.add(total, v)?;
    }
    if toggles.lr {
        let v = repulsion_loss(g, features, labels, means, cfg)?;
        report.lr = g.scalar_value(v);
        total = g.add(total, v)?;
    }
    if toggles.lrc {
        let v = regional_contrast_loss(g, features, labels, means, cfg, rc_rng)?;
        report.lrc = g.scalar_value(v);
        let wv = g.mul_scalar(v, cfg.lambda_rc)?;
        total = g.add(total, wv)?;
    }
    if toggles.lu {
        let v = unit_loss(g, raw_flat, labels)?;
        report.lu = g.scalar_value(v);
        let wv = g.mul_scalar(v, cfg.lambda_u)?;
        total = g.add(total, wv)?;
    }
    if toggles.ls || toggles.lg {
        match projection_matrix(&means.entities, cfg.sigma_min) {
            Projection::Valid(p) => {
                let s = segment_space(g, &p, features, cfg.signed_segment_space)?;
                if toggles.ls {
                    let v = segmentation_loss(g, s, labels)?;
                    report.ls = g.scalar_value(v);
                    total = g.add(total, v)?;
                }
                if toggles.lg {
                    let v = multiscale_gradient_loss(g, s, labels, cfg.grad_scales)?;
                    report.lg = g.scalar_value(v);
                    let wv = g.mul_scalar(v, cfg.lambda_g)?;
                    total = g.add(total, wv)?;
                }
            }
            Projection::Degenerate { .. } => {
                report.degenerate_projection = true;
            }
        }
    }
    report.total = g.scalar_value(total);
    Ok(TotalLoss { total, report })
}
