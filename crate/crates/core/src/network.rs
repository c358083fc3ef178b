//! Small convolutional encoder-decoder emitting d-channel line features.
//!
//! Layout per stage: two 3x3 convs with leaky activations, then a 2x
//! average-pool downsample; the decoder mirrors it with bilinear upsampling
//! and skip concatenation; the head is a 3x3 conv into a 1x1 conv with a
//! final tanh. Raw tanh output is normalized per pixel onto the projective
//! sphere; a pixel whose raw vector is numerically zero falls back to the
//! first basis vector and is counted, not fatal.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{TensorError, TrainError};
use crate::geometry::FeatureMap;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::kernels::{ReduceOp, ResampleMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimensionality (16 at desk scale, 128 at paper scale).
    pub d: usize,
    /// Encoder widths, one per stage.
    pub widths: Vec<usize>,
    /// Expected input size; inference accepts any size divisible by the
    /// stride, training asserts this one.
    pub input_hw: (usize, usize),
    pub seed: u64,
    /// Negative slope of the leaky rectifier.
    pub act_slope: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            widths: vec![16, 32, 64],
            input_hw: (64, 64),
            seed: 7,
            act_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d < 2 {
            return Err("feature dimension must be at least 2".into());
        }
        if self.widths.is_empty() {
            return Err("at least one encoder stage is required".into());
        }
        let s = self.stride();
        if self.input_hw.0 % s != 0 || self.input_hw.1 % s != 0 {
            return Err(format!(
                "input {}x{} not divisible by stride {}",
                self.input_hw.0, self.input_hw.1, s
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Param>,
}

/// Standard normal via Box-Muller over the seeded stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        if u1 > 1e-12 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

fn conv_param(
    rng: &mut ChaCha8Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    gain: f64,
) -> (Param, Param) {
    let fan_in = ci * k * k;
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let data: Vec<f32> = (0..co * ci * k * k)
        .map(|_| (normal(rng) * std) as f32)
        .collect();
    let kernel = Param {
        name: format!("{name}.k"),
        value: Tensor::new(&[co, ci, k, k], data).expect("kernel shape"),
    };
    let bias = Param {
        name: format!("{name}.b"),
        value: Tensor::zeros(&[co]),
    };
    (kernel, bias)
}

impl Model {
    /// He-style fan-in initialization, deterministic per seed.
    pub fn init(config: ModelConfig) -> Model {
        config.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let w = &config.widths;
        let s = w.len();

        let push = |pair: (Param, Param), params: &mut Vec<Param>| {
            params.push(pair.0);
            params.push(pair.1);
        };

        push(conv_param(&mut rng, "stem", w[0], 3, 3, 1.0), &mut params);
        for i in 0..s {
            let cin = if i == 0 { w[0] } else { w[i - 1] };
            push(conv_param(&mut rng, &format!("enc{i}.c1"), w[i], cin, 3, 1.0), &mut params);
            push(conv_param(&mut rng, &format!("enc{i}.c2"), w[i], w[i], 3, 1.0), &mut params);
        }
        for i in (0..s).rev() {
            let cin = if i == s - 1 { w[s - 1] } else { w[i + 1] } + w[i];
            push(conv_param(&mut rng, &format!("dec{i}.c"), w[i], cin, 3, 1.0), &mut params);
        }
        // Damped head: the tanh must start in its linear range (saturated
        // channels freeze every angular gradient) and per-pixel norms near 1
        // keep the unit regularizer a correction, not a rescue.
        push(conv_param(&mut rng, "head.c1", w[0], w[0], 3, 1.0), &mut params);
        push(
            conv_param(&mut rng, "head.c2", config.d, w[0], 1, 0.35),
            &mut params,
        );

        Model { config, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Graph leaves for every parameter, in `Model::params` order.
pub struct ModelVars {
    pub vars: Vec<Var>,
}

pub fn register(g: &mut Graph, model: &Model, trainable: bool) -> ModelVars {
    ModelVars {
        vars: model
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect(),
    }
}

pub struct ForwardOut {
    /// Pre-normalization tanh output, [d, h, w].
    pub raw: Var,
    /// Same values as [d, h*w].
    pub raw_flat: Var,
    /// Unit per-pixel features, [d, h*w].
    pub features: Var,
    /// Pixels that hit the zero-norm fallback.
    pub degenerate_pixels: usize,
}

struct Cursor<'m, 'v> {
    model: &'m Model,
    vars: &'v [Var],
    at: usize,
}

impl<'m, 'v> Cursor<'m, 'v> {
    fn take(&mut self, name: &str) -> (Var, Var) {
        debug_assert_eq!(
            self.model.params[self.at].name,
            format!("{name}.k"),
            "parameter order drifted"
        );
        let k = self.vars[self.at];
        let b = self.vars[self.at + 1];
        self.at += 2;
        (k, b)
    }
}

fn conv_block(
    g: &mut Graph,
    x: Var,
    kernel: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var, TensorError> {
    let y = g.conv2d(x, kernel, stride, padding)?;
    let co = g.value(bias).numel();
    let b3 = g.reshape(bias, &[co, 1, 1])?;
    g.add(y, b3)
}

/// Runs the network on one [3, h, w] image in [0, 1].
pub fn forward(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    image: &Tensor,
) -> Result<ForwardOut, TrainError> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(TrainError::Tensor(TensorError::Invalid {
            op: "forward",
            msg: format!("expected [3,h,w] image, got {shape:?}"),
        }));
    }
    let (h, w) = (shape[1], shape[2]);
    let stride = model.config.stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(TrainError::BadInputSize { h, w, stride });
    }
    let slope = model.config.act_slope;
    let widths = &model.config.widths;
    let s = widths.len();
    let mut cur = Cursor {
        model,
        vars: &vars.vars,
        at: 0,
    };

    let x = g.leaf(image.clone(), false);
    let (k, b) = cur.take("stem");
    let mut x = conv_block(g, x, k, b, 1, 1)?;
    x = g.leaky_relu(x, slope)?;

    let mut skips = Vec::with_capacity(s);
    let mut dims = (h, w);
    for i in 0..s {
        let (k, b) = cur.take(&format!("enc{i}.c1"));
        x = conv_block(g, x, k, b, 1, 1)?;
        x = g.leaky_relu(x, slope)?;
        let (k, b) = cur.take(&format!("enc{i}.c2"));
        x = conv_block(g, x, k, b, 1, 1)?;
        x = g.leaky_relu(x, slope)?;
        skips.push((x, dims));
        dims = (dims.0 / 2, dims.1 / 2);
        x = g.resample(x, dims.0, dims.1, ResampleMode::AvgPool)?;
    }

    for i in (0..s).rev() {
        let (skip, sdims) = skips[i];
        x = g.resample(x, sdims.0, sdims.1, ResampleMode::Bilinear)?;
        x = g.concat0(&[x, skip])?;
        let (k, b) = cur.take(&format!("dec{i}.c"));
        x = conv_block(g, x, k, b, 1, 1)?;
        x = g.leaky_relu(x, slope)?;
    }

    let (k, b) = cur.take("head.c1");
    x = conv_block(g, x, k, b, 1, 1)?;
    let (k, b) = cur.take("head.c2");
    x = conv_block(g, x, k, b, 1, 0)?;
    let raw = g.tanh(x)?;

    let d = model.config.d;
    let n = h * w;
    let raw_flat = g.reshape(raw, &[d, n])?;
    let (features, degenerate_pixels) = normalize_pixels(g, raw_flat, d, n)?;
    Ok(ForwardOut {
        raw,
        raw_flat,
        features,
        degenerate_pixels,
    })
}

/// Normalizes each column of a [d, n] map to unit length. Columns with norm
/// at most 1e-12 are replaced by e1 (flagged via the returned count) and
/// receive zero gradient.
pub fn normalize_pixels(
    g: &mut Graph,
    raw_flat: Var,
    d: usize,
    n: usize,
) -> Result<(Var, usize), TensorError> {
    let sq = g.square(raw_flat)?;
    let ssum = g.reduce(ReduceOp::Sum, sq, Some(&[0]), true)?; // [1, n]
    let degenerate: Vec<usize> = g
        .value(ssum)
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= 1e-24)
        .map(|(i, _)| i)
        .collect();
    if degenerate.is_empty() {
        let norms = g.sqrt(ssum)?;
        let features = g.div(raw_flat, norms)?;
        return Ok((features, 0));
    }
    let mut keep = vec![1.0f32; n];
    let mut degm = vec![0.0f32; n];
    for &i in &degenerate {
        keep[i] = 0.0;
        degm[i] = 1.0;
    }
    let keep = g.constant(Tensor::new(&[1, n], keep)?);
    let degm = g.constant(Tensor::new(&[1, n], degm)?);
    let mut e1 = vec![0.0f32; d];
    e1[0] = 1.0;
    let e1 = g.constant(Tensor::new(&[d, 1], e1)?);
    let kept = g.mul(raw_flat, keep)?;
    let fallback = g.matmul(e1, degm)?; // [d, n] with e1 at degenerate columns
    let safe = g.add(kept, fallback)?;
    let sq = g.square(safe)?;
    let ssum = g.reduce(ReduceOp::Sum, sq, Some(&[0]), true)?;
    let norms = g.sqrt(ssum)?;
    let features = g.div(safe, norms)?;
    Ok((features, degenerate.len()))
}

/// Inference helper: runs the model without gradients and returns per-pixel
/// unit features.
pub fn infer_features(model: &Model, image: &Tensor) -> Result<(FeatureMap, usize), TrainError> {
    let mut g = Graph::new();
    let vars = register(&mut g, model, false);
    let out = forward(&mut g, model, &vars, image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let t = g
        .value(out.features)
        .reshaped(&[model.config.d, h, w])
        .expect("feature shape");
    Ok((FeatureMap::from_channel_major(&t), out.degenerate_pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 4,
            widths: vec![4, 8],
            input_hw: (16, 16),
            seed: 11,
            act_slope: 0.01,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::init(tiny_config());
        let b = Model::init(tiny_config());
        assert_eq!(a.params, b.params);
        let c = Model::init(ModelConfig {
            seed: 12,
            ..tiny_config()
        });
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn kernel_variance_tracks_fan_in() {
        // A wide layer has enough samples for the variance to settle.
        let cfg = ModelConfig {
            d: 8,
            widths: vec![32, 64],
            input_hw: (16, 16),
            seed: 3,
            act_slope: 0.01,
        };
        let model = Model::init(cfg);
        let p = model
            .params
            .iter()
            .find(|p| p.name == "enc1.c1.k")
            .unwrap();
        let fan_in = 32 * 9;
        let want = 2.0 / fan_in as f64;
        let var: f64 = p
            .value
            .data()
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            / p.value.numel() as f64;
        assert!(
            (var - want).abs() < 0.2 * want,
            "variance {var} vs expected {want}"
        );
    }

    #[test]
    fn forward_output_shape_and_ranges() {
        let model = Model::init(tiny_config());
        let image = Tensor::full(&[3, 16, 16], 0.5);
        let mut g = Graph::new();
        let vars = register(&mut g, &model, false);
        let out = forward(&mut g, &model, &vars, &image).unwrap();
        assert_eq!(g.value(out.raw).shape(), &[4, 16, 16]);
        assert!(g.value(out.raw).data().iter().all(|v| v.abs() < 1.0));
        // every feature column unit norm
        let f = g.value(out.features).data();
        let n = 256;
        for i in 0..n {
            let norm: f32 = (0..4).map(|c| f[c * n + i] * f[c * n + i]).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "pixel {i} norm {norm}");
        }
        assert_eq!(out.degenerate_pixels, 0);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let model = Model::init(tiny_config());
        let image = Tensor::full(&[3, 15, 16], 0.5);
        let mut g = Graph::new();
        let vars = register(&mut g, &model, false);
        assert!(matches!(
            forward(&mut g, &model, &vars, &image),
            Err(TrainError::BadInputSize { .. })
        ));
    }

    #[test]
    fn degenerate_pixel_falls_back_to_e1() {
        // Drive the normalization path directly with a zero column.
        let mut g = Graph::new();
        let raw = g.leaf(
            Tensor::new(&[2, 3], vec![0.6, 0.0, 0.3, 0.8, 0.0, -0.4]).unwrap(),
            true,
        );
        let (features, count) = normalize_pixels(&mut g, raw, 2, 3).unwrap();
        assert_eq!(count, 1);
        let f = g.value(features).data();
        assert_eq!((f[1], f[4]), (1.0, 0.0), "fallback column is e1");
        let loss = g.sum_all(features).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(raw).unwrap();
        assert_eq!((grad[1], grad[4]), (0.0, 0.0), "no gradient into the zero column");
    }
}
