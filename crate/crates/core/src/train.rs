//! Training: per-image losses, backward, Adam.
//!
//! Batch size is one image (the losses are defined per image). Everything
//! derives deterministically from (seed, epoch, sample index): the shuffle
//! order, the contrast-loss query sampling, and therefore the whole run, so
//! a resumed checkpoint continues bit-exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Scene;
use crate::error::TrainError;
use crate::geometry::FeatureMap;
use crate::labels::EntityLabels;
use crate::losses::{self, LossConfig, LossReport, LossToggles};
use crate::network::{self, Model};
use crate::tensor::adam::{adam_step, AdamHyper, AdamState};
use crate::tensor::graph::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub seed: u64,
    pub loss: LossConfig,
    pub toggles: LossToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            seed: 1,
            loss: LossConfig::default(),
            toggles: LossToggles::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Samples processed.
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
    /// Component averages of the last completed epoch.
    pub running: LossReport,
}

impl TrainState {
    pub fn new(model: Model) -> TrainState {
        let params: Vec<_> = model.params.iter().map(|p| p.value.clone()).collect();
        TrainState {
            adam: AdamState::new(&params),
            model,
            step: 0,
            epoch: 0,
            running: LossReport::default(),
        }
    }
}

/// SplitMix64 over (seed, a, b): one stream per (epoch, sample).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [a.wrapping_add(0x9E3779B97F4A7C15), b.wrapping_add(0x517CC1B727220A95)] {
        z = z.wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
    }
    z
}

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, 0xD1CE));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// One optimization step on one scene. Returns the loss report; a non-finite
/// component aborts with its name.
pub fn train_step(
    state: &mut TrainState,
    scene: &Scene,
    cfg: &TrainConfig,
    epoch: u64,
    scene_index: usize,
) -> Result<LossReport, TrainError> {
    let labels = EntityLabels::from_raw(&scene.labels, scene.h, scene.w);

    let mut g = Graph::new();
    let vars = network::register(&mut g, &state.model, true);
    let out = network::forward(&mut g, &state.model, &vars, &scene.image)?;

    let d = state.model.config.d;
    let fmap = {
        let t = g
            .value(out.features)
            .reshaped(&[d, scene.h, scene.w])
            .expect("feature shape");
        FeatureMap::from_channel_major(&t)
    };
    let means = losses::compute_means(&fmap, &labels);

    let mut rc_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch, scene_index as u64));
    let tl = losses::total_loss(
        &mut g,
        out.raw_flat,
        out.features,
        &labels,
        &means,
        &cfg.loss,
        cfg.toggles,
        &mut rc_rng,
    )?;
    if let Some(component) = tl.report.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            component,
            step: state.step,
        });
    }

    if g.requires_grad(tl.total) {
        g.backward(tl.total)?;
        let grads: Vec<Vec<f32>> = vars
            .vars
            .iter()
            .zip(&state.model.params)
            .map(|(&v, p)| {
                g.grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
            .collect();
        let mut params: Vec<_> = state.model.params.iter().map(|p| p.value.clone()).collect();
        adam_step(
            &mut params,
            &grads,
            &mut state.adam,
            AdamHyper {
                lr: cfg.lr,
                ..AdamHyper::default()
            },
        );
        for (p, v) in state.model.params.iter_mut().zip(params) {
            p.value = v;
        }
        debug_assert!(state.model.all_finite(), "non-finite parameter after step");
    }
    state.step += 1;
    Ok(tl.report)
}

/// Runs `epochs` additional epochs. The per-epoch average reports are
/// returned and also passed to `on_epoch` as they complete.
pub fn train(
    state: &mut TrainState,
    scenes: &[Scene],
    cfg: &TrainConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(u64, &LossReport),
) -> Result<Vec<LossReport>, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = state.epoch;
        let order = shuffled_indices(scenes.len(), cfg.seed, epoch);
        let mut sums = [0.0f64; 7];
        let mut degenerate = 0usize;
        for &idx in &order {
            let report = train_step(state, &scenes[idx], cfg, epoch, idx)?;
            for (s, v) in sums.iter_mut().zip(report.components()) {
                *s += v as f64;
            }
            degenerate += report.degenerate_projection as usize;
        }
        let n = scenes.len() as f64;
        let avg = LossReport {
            la: (sums[0] / n) as f32,
            lr: (sums[1] / n) as f32,
            lrc: (sums[2] / n) as f32,
            lu: (sums[3] / n) as f32,
            ls: (sums[4] / n) as f32,
            lg: (sums[5] / n) as f32,
            total: (sums[6] / n) as f32,
            degenerate_projection: degenerate > 0,
        };
        state.epoch += 1;
        state.running = avg;
        on_epoch(state.epoch, &avg);
        history.push(avg);
    }
    Ok(history)
}
