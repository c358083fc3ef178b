//! Rough per-component timing probe; ignored by default, run with
//! `cargo test -p pseg-core --test perf_probe -- --ignored --nocapture`.

use pseg_core::data::{self, SceneConfig};
use pseg_core::labels::EntityLabels;
use pseg_core::losses::{self, LossConfig, LossToggles};
use pseg_core::network::{self, Model, ModelConfig};
use pseg_core::geometry::FeatureMap;
use pseg_core::tensor::graph::Graph;
use rand_chacha::rand_core::SeedableRng;
use std::time::Instant;

#[test]
#[ignore = "timing probe, not a correctness test"]
fn component_times() {
    let cfg = ModelConfig {
        d: 16,
        widths: vec![8, 16, 32],
        input_hw: (64, 64),
        seed: 1,
        act_slope: 0.01,
    };
    let model = Model::init(cfg);
    let scene = data::generate(&SceneConfig::default(), 0).unwrap();
    let labels = EntityLabels::from_raw(&scene.labels, scene.h, scene.w);
    let lcfg = LossConfig { sigma_min: 0.25, ..LossConfig::default() };

    let reps = 30;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let vars = network::register(&mut g, &model, true);
        let _ = network::forward(&mut g, &model, &vars, &scene.image).unwrap();
    }
    println!("forward only: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for i in 0..reps {
        let mut g = Graph::new();
        let vars = network::register(&mut g, &model, true);
        let out = network::forward(&mut g, &model, &vars, &scene.image).unwrap();
        let fmap = {
            let t = g.value(out.features).reshaped(&[16, 64, 64]).unwrap();
            FeatureMap::from_channel_major(&t)
        };
        let means = losses::compute_means(&fmap, &labels);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i as u64);
        let tl = losses::total_loss(&mut g, out.raw_flat, out.features, &labels, &means, &lcfg, LossToggles::default(), &mut rng).unwrap();
        std::hint::black_box(tl.report);
    }
    println!("forward+means+loss: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for i in 0..reps {
        let mut g = Graph::new();
        let vars = network::register(&mut g, &model, true);
        let out = network::forward(&mut g, &model, &vars, &scene.image).unwrap();
        let fmap = {
            let t = g.value(out.features).reshaped(&[16, 64, 64]).unwrap();
            FeatureMap::from_channel_major(&t)
        };
        let means = losses::compute_means(&fmap, &labels);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i as u64);
        let tl = losses::total_loss(&mut g, out.raw_flat, out.features, &labels, &means, &lcfg, LossToggles::default(), &mut rng).unwrap();
        g.backward(tl.total).unwrap();
        std::hint::black_box(g.grad(vars.vars[0]));
    }
    println!("forward+loss+backward: {:?}/it", t0.elapsed() / reps);
}

#[test]
#[ignore = "timing probe, not a correctness test"]
fn conv_times() {
    use pseg_core::tensor::kernels;
    use pseg_core::Tensor;
    let reps = 200u32;
    // the heaviest decoder conv: 24 -> 8 at 64x64
    let input = Tensor::full(&[24, 64, 64], 0.3);
    let kernel = Tensor::full(&[8, 24, 3, 3], 0.01);
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(kernels::conv2d_forward(&input, &kernel, 1, 1).unwrap());
    }
    println!("dec0 conv fwd: {:?}/it", t0.elapsed() / reps);
    let gout = vec![0.1f32; 8 * 64 * 64];
    let mut gin = vec![0.0f32; 24 * 64 * 64];
    let t0 = Instant::now();
    for _ in 0..reps {
        kernels::conv2d_backward_input(input.shape(), &kernel, &gout, 1, 1, &mut gin);
    }
    println!("dec0 conv bwd-input: {:?}/it", t0.elapsed() / reps);
    let mut gk = vec![0.0f32; 8 * 24 * 9];
    let t0 = Instant::now();
    for _ in 0..reps {
        kernels::conv2d_backward_kernel(&input, kernel.shape(), &gout, 1, 1, &mut gk);
    }
    println!("dec0 conv bwd-kernel: {:?}/it", t0.elapsed() / reps);
}

#[test]
#[ignore = "timing probe, not a correctness test"]
fn layer_times() {
    use pseg_core::tensor::kernels::{self, BinaryOp, ReduceOp, ResampleMode, UnaryOp};
    use pseg_core::Tensor;
    let reps = 300u32;
    let model = Model::init(ModelConfig {
        d: 16,
        widths: vec![8, 16, 32],
        input_hw: (64, 64),
        seed: 1,
        act_slope: 0.01,
    });
    // all conv layers, value level
    let image = Tensor::full(&[3, 64, 64], 0.4);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let vars = network::register(&mut g, &model, true);
        let out = network::forward(&mut g, &model, &vars, &image).unwrap();
        std::hint::black_box(g.value(out.raw).numel());
    }
    println!("full forward graph: {:?}/it", t0.elapsed() / reps);

    let x = Tensor::full(&[16, 64, 64], 0.3);
    let b = Tensor::full(&[16, 1, 1], 0.1);
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(kernels::binary_forward(BinaryOp::Add, &x, &b).unwrap());
    }
    println!("bias add 16x64x64: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(kernels::unary_forward(UnaryOp::Tanh, &x).unwrap());
    }
    println!("tanh 16x64x64: {:?}/it", t0.elapsed() / reps);

    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(kernels::unary_forward(UnaryOp::LeakyRelu(0.01), &x).unwrap());
    }
    println!("lrelu 16x64x64: {:?}/it", t0.elapsed() / reps);

    let small = Tensor::full(&[32, 8, 8], 0.2);
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(kernels::resample_forward(&small, 16, 16, ResampleMode::Bilinear).unwrap());
    }
    println!("bilinear 32: 8->16: {:?}/it", t0.elapsed() / reps);

    let flat = Tensor::full(&[16, 4096], 0.3);
    let t0 = Instant::now();
    for _ in 0..reps {
        let sq = kernels::unary_forward(UnaryOp::Square, &flat).unwrap();
        let s = kernels::reduce_forward(ReduceOp::Sum, &sq, Some(&[0]), true).unwrap();
        let n = kernels::unary_forward(UnaryOp::Sqrt, &s).unwrap();
        std::hint::black_box(kernels::binary_forward(BinaryOp::Div, &flat, &n).unwrap());
    }
    println!("normalize chain 16x4096: {:?}/it", t0.elapsed() / reps);
}

#[test]
#[ignore = "timing probe, not a correctness test"]
fn mean_shift_times() {
    use pseg_core::cluster::{mean_shift, MeanShiftParams};
    use pseg_testkit::SplitMix64;
    let mut rng = SplitMix64::new(5);
    let (h, w, d, k) = (64usize, 64usize, 16usize, 4usize);
    // k near-orthogonal lines with 5-degree jitter, vertical stripes
    let mut lines = vec![vec![0.0f32; d]; k];
    for (i, l) in lines.iter_mut().enumerate() {
        l[i] = 1.0;
        for v in l.iter_mut() {
            *v += 0.05 * rng.uniform(-1.0, 1.0) as f32;
        }
        let n: f32 = l.iter().map(|x| x * x).sum::<f32>().sqrt();
        l.iter_mut().for_each(|x| *x /= n);
    }
    let mut data = vec![0.0f32; h * w * d];
    for p in 0..h * w {
        let stripe = (p % w) * k / w;
        for c in 0..d {
            data[p * d + c] = lines[stripe][c] + 0.08 * rng.uniform(-1.0, 1.0) as f32;
        }
        let n: f32 = data[p * d..(p + 1) * d].iter().map(|x| x * x).sum::<f32>().sqrt();
        data[p * d..(p + 1) * d].iter_mut().for_each(|x| *x /= n);
    }
    let fm = pseg_core::geometry::FeatureMap::new(h, w, d, data);
    let t0 = Instant::now();
    let reps = 5u32;
    for _ in 0..reps {
        std::hint::black_box(mean_shift(&fm, &MeanShiftParams::default()));
    }
    println!("mean_shift 64x64 d16 k4: {:?}/it", t0.elapsed() / reps);
}
