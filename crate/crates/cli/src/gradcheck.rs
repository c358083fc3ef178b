//! Central finite-difference verification of every registered tensor op and
//! every loss component.
//!
//! Numeric gradients run through the f64 reference implementations (an f32
//! forward pass cannot resolve 1e-4 relative accuracy at eps = 1e-3), the
//! analytic side is the production f32 backward pass. Inputs sit away from
//! |.| kinks and argmax ties by construction or re-sampling.
//!
//! The env var `PSEG_GRADCHECK_CORRUPT=<op>` perturbs the analytic gradient
//! of one op; it exists so the failure path itself is testable.

use pseg_core::geometry::FeatureMap;
use pseg_core::labels::EntityLabels;
use pseg_core::losses::{self, LossConfig, Projection};
use pseg_core::network;
use pseg_core::tensor::graph::{Graph, Var, ALL_OPS};
use pseg_core::tensor::kernels::{ReduceOp, ResampleMode};
use pseg_core::tensor::Tensor;
use pseg_testkit::naive::{self, Arr};
use pseg_testkit::{fd, SplitMix64};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;
pub const EPS: f64 = 1e-3;
pub const SEEDS_PER_CHECK: u64 = 20;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub worst_rel: f64,
    pub pass: bool,
    pub note: &'static str,
}

pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
    pub all_pass: bool,
}

fn corrupt_target() -> Option<String> {
    std::env::var("PSEG_GRADCHECK_CORRUPT").ok()
}

struct InputSpec {
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    /// Re-sample while any |element| is below this (abs-style kinks).
    off_zero: f64,
    /// Re-sample while any pair of elements is closer than this (max ties).
    min_gap: f64,
}

impl InputSpec {
    fn plain(shape: &[usize]) -> InputSpec {
        InputSpec {
            shape: shape.to_vec(),
            lo: -1.0,
            hi: 1.0,
            off_zero: 0.0,
            min_gap: 0.0,
        }
    }

    fn positive(shape: &[usize], lo: f64, hi: f64) -> InputSpec {
        InputSpec {
            shape: shape.to_vec(),
            lo,
            hi,
            off_zero: 0.0,
            min_gap: 0.0,
        }
    }

    fn off_zero(shape: &[usize], margin: f64) -> InputSpec {
        InputSpec {
            shape: shape.to_vec(),
            lo: -1.0,
            hi: 1.0,
            off_zero: margin,
            min_gap: 0.0,
        }
    }

    fn sample(&self, rng: &mut SplitMix64) -> Arr {
        let n: usize = self.shape.iter().product();
        'outer: loop {
            let data: Vec<f64> = (0..n).map(|_| rng.uniform(self.lo, self.hi)).collect();
            if self.off_zero > 0.0 && data.iter().any(|v| v.abs() < self.off_zero) {
                continue;
            }
            if self.min_gap > 0.0 {
                for i in 0..n {
                    for j in (i + 1)..n {
                        if (data[i] - data[j]).abs() < self.min_gap {
                            continue 'outer;
                        }
                    }
                }
            }
            // round through f32 so both sides see identical inputs
            let rounded: Vec<f64> = data.iter().map(|&v| v as f32 as f64).collect();
            return Arr::new(&self.shape, rounded);
        }
    }
}

/// One op check: analytic f32 gradient of a weighted-sum probe versus f64
/// central differences through the naive reference.
fn check_op(
    name: &str,
    seed: u64,
    inputs: &[InputSpec],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    reference: impl Fn(&[Arr]) -> Arr,
) -> CheckRow {
    let mut worst = 0.0f64;
    for s in 0..SEEDS_PER_CHECK {
        let mut rng = SplitMix64::new(seed ^ (0x9E37 + s * 0x1234_5678));
        let args: Vec<Arr> = inputs.iter().map(|spec| spec.sample(&mut rng)).collect();

        // probe weights sized to the op output
        let out_ref = reference(&args);
        let weights: Vec<f64> = (0..out_ref.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();

        // analytic side
        let mut g = Graph::new();
        let vars: Vec<Var> = args
            .iter()
            .map(|a| {
                let t = Tensor::new(&a.shape, a.data.iter().map(|&v| v as f32).collect()).unwrap();
                g.leaf(t, true)
            })
            .collect();
        let out = build(&mut g, &vars);
        let wvar = g.constant(
            Tensor::new(
                g.value(out).shape(),
                weights.iter().map(|&v| v as f32).collect(),
            )
            .unwrap(),
        );
        let weighted = g.mul(out, wvar).expect("probe mul");
        let probe = g.sum_all(weighted).expect("probe sum");
        g.backward(probe).expect("backward");

        for (ai, (arg, &var)) in args.iter().zip(&vars).enumerate() {
            let mut analytic: Vec<f64> = g
                .grad(var)
                .map(|s| s.iter().map(|&x| x as f64).collect())
                .unwrap_or_else(|| vec![0.0; arg.numel()]);
            if corrupt_target().as_deref() == Some(name) {
                analytic[0] += 1e-2;
            }
            let others: Vec<Arr> = args.clone();
            let numeric = fd::grad(&arg.data, EPS, |x| {
                let mut patched = others.clone();
                patched[ai] = Arr::new(&arg.shape, x.to_vec());
                naive::probe(&reference(&patched), &weights)
            });
            worst = worst.max(pseg_testkit::max_rel_err(&analytic, &numeric));
        }
    }
    CheckRow {
        name: name.to_string(),
        worst_rel: worst,
        pass: worst < OP_TOLERANCE,
        note: "",
    }
}

fn op_rows(seed: u64) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    let sh: &[usize] = &[4, 6];
    let b_sh: &[usize] = &[1, 6];

    rows.push(check_op(
        "add",
        seed,
        &[InputSpec::plain(sh), InputSpec::plain(b_sh)],
        |g, v| g.add(v[0], v[1]).unwrap(),
        |a| naive::add(&a[0], &a[1]),
    ));
    rows.push(check_op(
        "sub",
        seed + 1,
        &[InputSpec::plain(sh), InputSpec::plain(b_sh)],
        |g, v| g.sub(v[0], v[1]).unwrap(),
        |a| naive::sub(&a[0], &a[1]),
    ));
    rows.push(check_op(
        "mul",
        seed + 2,
        &[InputSpec::plain(sh), InputSpec::plain(b_sh)],
        |g, v| g.mul(v[0], v[1]).unwrap(),
        |a| naive::mul(&a[0], &a[1]),
    ));
    rows.push(check_op(
        "div",
        seed + 3,
        &[InputSpec::plain(sh), InputSpec::positive(b_sh, 0.4, 1.6)],
        |g, v| g.div(v[0], v[1]).unwrap(),
        |a| naive::div(&a[0], &a[1]),
    ));
    rows.push(check_op(
        "add_scalar",
        seed + 4,
        &[InputSpec::plain(sh)],
        |g, v| g.add_scalar(v[0], 0.37).unwrap(),
        |a| naive::add_scalar(&a[0], 0.37f32 as f64),
    ));
    rows.push(check_op(
        "mul_scalar",
        seed + 5,
        &[InputSpec::plain(sh)],
        |g, v| g.mul_scalar(v[0], -1.75).unwrap(),
        |a| naive::mul_scalar(&a[0], -1.75),
    ));
    rows.push(check_op(
        "abs",
        seed + 6,
        &[InputSpec::off_zero(sh, 5.0 * EPS)],
        |g, v| g.abs(v[0]).unwrap(),
        |a| naive::abs(&a[0]),
    ));
    rows.push(check_op(
        "tanh",
        seed + 7,
        &[InputSpec::plain(sh)],
        |g, v| g.tanh(v[0]).unwrap(),
        |a| naive::tanh(&a[0]),
    ));
    rows.push(check_op(
        "square",
        seed + 8,
        &[InputSpec::plain(sh)],
        |g, v| g.square(v[0]).unwrap(),
        |a| naive::square(&a[0]),
    ));
    rows.push(check_op(
        "sqrt",
        seed + 9,
        &[InputSpec::positive(sh, 0.1, 2.0)],
        |g, v| g.sqrt(v[0]).unwrap(),
        |a| naive::sqrt(&a[0]),
    ));
    rows.push(check_op(
        "exp",
        seed + 10,
        &[InputSpec::plain(sh)],
        |g, v| g.exp(v[0]).unwrap(),
        |a| naive::exp(&a[0]),
    ));
    rows.push(check_op(
        "ln",
        seed + 11,
        &[InputSpec::positive(sh, 0.2, 3.0)],
        |g, v| g.ln(v[0]).unwrap(),
        |a| naive::ln(&a[0]),
    ));
    rows.push(check_op(
        "leaky_relu",
        seed + 12,
        &[InputSpec::off_zero(sh, 5.0 * EPS)],
        |g, v| g.leaky_relu(v[0], 0.01).unwrap(),
        |a| naive::leaky_relu(&a[0], 0.01f32 as f64),
    ));
    rows.push(check_op(
        "sum",
        seed + 13,
        &[InputSpec::plain(&[3, 4, 2])],
        |g, v| g.reduce(ReduceOp::Sum, v[0], Some(&[1]), true).unwrap(),
        |a| naive::sum(&a[0], Some(&[1]), true),
    ));
    rows.push(check_op(
        "mean",
        seed + 14,
        &[InputSpec::plain(&[3, 4, 2])],
        |g, v| g.reduce(ReduceOp::Mean, v[0], Some(&[0, 2]), false).unwrap(),
        |a| naive::mean(&a[0], Some(&[0, 2]), false),
    ));
    rows.push(check_op(
        "max",
        seed + 15,
        &[InputSpec {
            shape: vec![3, 5],
            lo: -1.0,
            hi: 1.0,
            off_zero: 0.0,
            min_gap: 4.0 * EPS,
        }],
        |g, v| g.max_all(v[0]).unwrap(),
        |a| {
            // max over everything; reference as a 1-element array
            let m = a[0].data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Arr::new(&[], vec![m])
        },
    ));
    rows.push(check_op(
        "matmul",
        seed + 16,
        &[InputSpec::plain(&[5, 4]), InputSpec::plain(&[4, 3])],
        |g, v| g.matmul(v[0], v[1]).unwrap(),
        |a| naive::matmul(&a[0], &a[1]),
    ));
    rows.push(check_op(
        "conv2d",
        seed + 17,
        &[InputSpec::plain(&[2, 5, 5]), InputSpec::plain(&[2, 2, 3, 3])],
        |g, v| g.conv2d(v[0], v[1], 1, 1).unwrap(),
        |a| naive::conv2d(&a[0], &a[1], 1, 1),
    ));
    rows.push(check_op(
        "resample_bilinear",
        seed + 18,
        &[InputSpec::plain(&[2, 4, 4])],
        |g, v| g.resample(v[0], 7, 5, ResampleMode::Bilinear).unwrap(),
        |a| naive::bilinear(&a[0], 7, 5),
    ));
    rows.push(check_op(
        "resample_avgpool",
        seed + 19,
        &[InputSpec::plain(&[2, 4, 6])],
        |g, v| g.resample(v[0], 2, 3, ResampleMode::AvgPool).unwrap(),
        |a| naive::avg_pool(&a[0], 2, 3),
    ));
    rows.push(CheckRow {
        name: "resample_nearest".into(),
        worst_rel: 0.0,
        pass: corrupt_target().as_deref() != Some("resample_nearest"),
        note: "forward-only (not differentiable by contract)",
    });
    rows.push(check_op(
        "diff_x",
        seed + 20,
        &[InputSpec::plain(&[2, 4, 5])],
        |g, v| g.diff_x(v[0]).unwrap(),
        |a| naive::diff_x(&a[0]),
    ));
    rows.push(check_op(
        "diff_y",
        seed + 21,
        &[InputSpec::plain(&[2, 5, 4])],
        |g, v| g.diff_y(v[0]).unwrap(),
        |a| naive::diff_y(&a[0]),
    ));
    rows.push(check_op(
        "concat",
        seed + 22,
        &[InputSpec::plain(&[2, 3]), InputSpec::plain(&[4, 3])],
        |g, v| g.concat0(&[v[0], v[1]]).unwrap(),
        |a| naive::concat0(&[&a[0], &a[1]]),
    ));
    rows.push(check_op(
        "reshape",
        seed + 23,
        &[InputSpec::plain(&[3, 8])],
        |g, v| g.reshape(v[0], &[4, 6]).unwrap(),
        |a| Arr::new(&[4, 6], a[0].data.clone()),
    ));
    rows
}

/// End-to-end check of one loss component: d(component)/d(raw) with means,
/// projection, and query sampling frozen.
fn check_loss(name: &'static str, seed: u64) -> CheckRow {
    let (d, h, w) = (8usize, 6usize, 6usize);
    let n = h * w;
    let raw_labels: Vec<u32> = (0..n)
        .map(|i| {
            let x = i % w;
            if x < 2 {
                1
            } else if x < 4 {
                2
            } else {
                0
            }
        })
        .collect();
    let labels = EntityLabels::from_raw_unchecked(raw_labels.clone(), h, w);

    let mut worst = 0.0f64;
    let mut accepted = 0u64;
    let mut attempt = 0u64;
    while accepted < SEEDS_PER_CHECK {
        attempt += 1;
        assert!(attempt < SEEDS_PER_CHECK * 40, "{name}: no kink-free inputs");
        let mut rng = SplitMix64::new(seed ^ (attempt * 0xABCDEF));
        let raw_data: Vec<f32> = (0..d * n).map(|_| rng.uniform(-0.9, 0.9) as f32).collect();
        let raw_t = Tensor::new(&[d, n], raw_data).unwrap();

        let mut g = Graph::new();
        let raw = g.leaf(raw_t.clone(), true);
        let (features, _) = network::normalize_pixels(&mut g, raw, d, n).unwrap();
        let fmap = {
            let t = g.value(features).reshaped(&[d, h, w]).unwrap();
            FeatureMap::from_channel_major(&t)
        };
        let means = losses::compute_means(&fmap, &labels);
        let (m64, bg64) = {
            let ents: Vec<Vec<f64>> = means
                .entities
                .iter()
                .map(|t| t.mu.iter().map(|&x| x as f64).collect())
                .collect();
            let bg: Option<Vec<f64>> = means
                .background
                .as_ref()
                .map(|t| t.mu.iter().map(|&x| x as f64).collect());
            (ents, bg)
        };
        let proj = match losses::projection_matrix(&means.entities, 1e-3) {
            Projection::Valid(p) => p,
            Projection::Degenerate { .. } => continue,
        };
        let p64: Vec<Vec<f64>> = (0..labels.k)
            .map(|r| proj.p.data()[r * d..(r + 1) * d].iter().map(|&x| x as f64).collect())
            .collect();

        // kink screen: dots with means/projection rows and norms off 1
        let feats64: Vec<Vec<f64>> = (0..n)
            .map(|i| fmap.feature(i).iter().map(|&x| x as f64).collect())
            .collect();
        let raw64: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|c| raw_t.data()[c * n + i] as f64).collect())
            .collect();
        let mut kink = false;
        for f in &feats64 {
            for mu in m64.iter().chain(bg64.iter()) {
                if f.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>().abs() < 5.0 * EPS {
                    kink = true;
                }
            }
            for row in &p64 {
                if f.iter().zip(row).map(|(a, b)| a * b).sum::<f64>().abs() < 5.0 * EPS {
                    kink = true;
                }
            }
        }
        for rp in &raw64 {
            let norm: f64 = rp.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (1.0 - norm).abs() < 5.0 * EPS {
                kink = true;
            }
        }
        if kink {
            continue;
        }
        accepted += 1;

        let cfg = LossConfig {
            rc_queries: 16,
            ..LossConfig::default()
        };
        let mut rc_rng = ChaCha8Rng::seed_from_u64(seed ^ attempt);
        let queries: Vec<(usize, usize)> = {
            let mut r = rc_rng.clone();
            losses::sample_queries(&labels, 16, &mut r)
                .into_iter()
                .flat_map(|(ent, px)| px.into_iter().map(move |i| (ent as usize, i)))
                .collect()
        };

        let component = match name {
            "loss_la" => losses::attraction_loss(&mut g, features, &labels, &means, &cfg).unwrap(),
            "loss_lr" => losses::repulsion_loss(&mut g, features, &labels, &means, &cfg).unwrap(),
            "loss_lrc" => losses::regional_contrast_loss(
                &mut g, features, &labels, &means, &cfg, &mut rc_rng,
            )
            .unwrap(),
            "loss_lu" => losses::unit_loss(&mut g, raw, &labels).unwrap(),
            "loss_ls" => {
                let s = losses::segment_space(&mut g, &proj, features, false).unwrap();
                losses::segmentation_loss(&mut g, s, &labels).unwrap()
            }
            "loss_lg" => {
                let s = losses::segment_space(&mut g, &proj, features, false).unwrap();
                losses::multiscale_gradient_loss(&mut g, s, &labels, 4).unwrap()
            }
            other => unreachable!("unknown loss {other}"),
        };
        g.backward(component).expect("backward");
        let mut analytic: Vec<f64> = g
            .grad(raw)
            .map(|s| s.iter().map(|&x| x as f64).collect())
            .unwrap_or_else(|| vec![0.0; d * n]);
        if corrupt_target().as_deref() == Some(name) {
            analytic[0] += 1e-2;
        }

        let rl_labels = labels.labels.clone();
        let rl_valid = labels.valid.clone();
        let k = labels.k;
        let reference = |raw_flat: &[f64]| -> f64 {
            let pixels: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..d).map(|c| raw_flat[c * n + i]).collect())
                .collect();
            let feats: Vec<Vec<f64>> = pixels
                .iter()
                .map(|p| {
                    let norm: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                    p.iter().map(|x| x / norm).collect()
                })
                .collect();
            let rl = pseg_testkit::lossref::RefLabels {
                labels: &rl_labels,
                valid: &rl_valid,
                h,
                w,
                k,
            };
            match name {
                "loss_la" => pseg_testkit::lossref::attraction(&feats, &rl, &m64),
                "loss_lr" => {
                    pseg_testkit::lossref::repulsion(&feats, &rl, &m64, bg64.as_deref())
                }
                "loss_lrc" => pseg_testkit::lossref::regional_contrast(
                    &feats,
                    &m64,
                    bg64.as_deref(),
                    0.5,
                    &queries,
                ),
                "loss_lu" => pseg_testkit::lossref::unit_loss(&pixels, &rl_valid),
                "loss_ls" => {
                    let smap = pseg_testkit::lossref::segment_space(&p64, &feats, false);
                    pseg_testkit::lossref::segmentation_loss(&smap, &rl)
                }
                "loss_lg" => {
                    let smap = pseg_testkit::lossref::segment_space(&p64, &feats, false);
                    let mut s_chw = vec![0.0f64; k * n];
                    for i in 0..n {
                        for (kk, &v) in smap[i].iter().enumerate() {
                            s_chw[kk * n + i] = v;
                        }
                    }
                    let mut shat = vec![0.0f64; k * n];
                    for i in 0..n {
                        let l = rl_labels[i];
                        if l > 0 {
                            shat[(l as usize - 1) * n + i] = 1.0;
                        }
                    }
                    pseg_testkit::lossref::gradient_loss(&s_chw, &shat, &rl_valid, k, h, w, 4)
                }
                other => unreachable!("unknown loss {other}"),
            }
        };
        let raw_flat64: Vec<f64> = raw_t.data().iter().map(|&x| x as f64).collect();
        let numeric = fd::grad(&raw_flat64, EPS, |x| reference(x));
        worst = worst.max(pseg_testkit::max_rel_err(&analytic, &numeric));
    }
    CheckRow {
        name: name.to_string(),
        worst_rel: worst,
        pass: worst < LOSS_TOLERANCE,
        note: "",
    }
}

/// Runs the full suite; `rows` carries one line per registered op plus one
/// per loss component.
pub fn run(seed: u64) -> GradcheckReport {
    let mut rows = op_rows(seed);
    for (i, name) in [
        "loss_la", "loss_lr", "loss_lrc", "loss_lu", "loss_ls", "loss_lg",
    ]
    .into_iter()
    .enumerate()
    {
        rows.push(check_loss(name, seed ^ (0x10055 + i as u64 * 0x77)));
    }
    // every registered op must have a row
    for op in ALL_OPS {
        assert!(
            rows.iter().any(|r| r.name == *op),
            "gradcheck has no row for registered op '{op}'"
        );
    }
    let all_pass = rows.iter().all(|r| r.pass);
    GradcheckReport { rows, all_pass }
}
