//! Loss values against independent f64 direct-loop references, the exact
//! plug-in cases, the masking/sign invariances, the projection contract, and
//! the end-to-end gradient check of the full objective.

use pseg_core::geometry::{FeatureMap, LineFeature, TargetLine};
use pseg_core::labels::EntityLabels;
use pseg_core::losses::{self, LossConfig, LossToggles, MeanSet, Projection};
use pseg_core::network;
use pseg_core::tensor::graph::{Graph, Var};
use pseg_core::tensor::Tensor;
use pseg_testkit::lossref::{self, RefLabels};
use pseg_testkit::{fd, SplitMix64};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// shared scaffolding
// ---------------------------------------------------------------------------

fn e(d: usize, i: usize) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn target(d: usize, i: usize, id: u32) -> TargetLine {
    TargetLine {
        mu: LineFeature::from_unit(e(d, i)),
        entity_id: id,
        support: 1,
        ambiguous: false,
    }
}

/// Random labels from a few splattered rectangles, eroded; retries until at
/// least `want_k` entities survive.
fn random_labels(rng: &mut SplitMix64, h: usize, w: usize, want_k: usize) -> EntityLabels {
    loop {
        let mut raw = vec![0u32; h * w];
        for id in 1..=want_k as u32 + 1 {
            let rh = 5 + rng.below(h / 2);
            let rw = 5 + rng.below(w / 2);
            let y0 = rng.below(h - rh.min(h - 1));
            let x0 = rng.below(w - rw.min(w - 1));
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    raw[y * w + x] = id;
                }
            }
        }
        let labels = EntityLabels::from_raw(&raw, h, w);
        if labels.k >= want_k && !labels.background_pixels().is_empty() {
            return labels;
        }
    }
}

/// Random raw map in [d, n] with norms away from 1 kinks and loud columns.
fn random_raw(rng: &mut SplitMix64, d: usize, n: usize) -> Tensor {
    let data: Vec<f32> = (0..d * n)
        .map(|_| rng.uniform(-0.9, 0.9) as f32)
        .collect();
    Tensor::new(&[d, n], data).unwrap()
}

struct Setup {
    g: Graph,
    raw: Var,
    features: Var,
    labels: EntityLabels,
    means: MeanSet,
    fmap: FeatureMap,
}

fn build(rng: &mut SplitMix64, d: usize, h: usize, w: usize, want_k: usize) -> Setup {
    let labels = random_labels(rng, h, w, want_k);
    let mut g = Graph::new();
    let raw_t = random_raw(rng, d, h * w);
    let raw = g.leaf(raw_t, true);
    let (features, _) = network::normalize_pixels(&mut g, raw, d, h * w).unwrap();
    let fmap = {
        let t = g.value(features).reshaped(&[d, h, w]).unwrap();
        FeatureMap::from_channel_major(&t)
    };
    let means = losses::compute_means(&fmap, &labels);
    Setup {
        g,
        raw,
        features,
        labels,
        means,
    fmap,
    }
}

fn ref_labels(labels: &EntityLabels) -> RefLabels<'_> {
    RefLabels {
        labels: &labels.labels,
        valid: &labels.valid,
        h: labels.h,
        w: labels.w,
        k: labels.k,
    }
}

fn pixel_features64(fmap: &FeatureMap) -> Vec<Vec<f64>> {
    (0..fmap.n_pixels())
        .map(|i| fmap.feature(i).iter().map(|&x| x as f64).collect())
        .collect()
}

fn raw_pixels64(g: &Graph, raw: Var, d: usize, n: usize) -> Vec<Vec<f64>> {
    let data = g.value(raw).data();
    (0..n)
        .map(|i| (0..d).map(|c| data[c * n + i] as f64).collect())
        .collect()
}

fn means64(means: &MeanSet) -> (Vec<Vec<f64>>, Option<Vec<f64>>) {
    let ents = means
        .entities
        .iter()
        .map(|t| t.mu.iter().map(|&x| x as f64).collect())
        .collect();
    let bg = means
        .background
        .as_ref()
        .map(|t| t.mu.iter().map(|&x| x as f64).collect());
    (ents, bg)
}

fn close(a: f32, b: f64, what: &str) {
    assert!(
        (a as f64 - b).abs() <= 1e-4 * (1.0 + b.abs()),
        "{what}: {a} vs {b}"
    );
}

// ---------------------------------------------------------------------------
// value oracles on random configurations
// ---------------------------------------------------------------------------

#[test]
fn losses_match_direct_loop_references() {
    let mut rng = SplitMix64::new(2718);
    for trial in 0..5 {
        let (d, h, w) = (8, 16, 16);
        let mut s = build(&mut rng, d, h, w, 3);
        let rl = ref_labels(&s.labels);
        let feats64 = pixel_features64(&s.fmap);
        let raw64 = raw_pixels64(&s.g, s.raw, d, h * w);
        let (m64, bg64) = means64(&s.means);
        let cfg = LossConfig::default();

        let la = losses::attraction_loss(&mut s.g, s.features, &s.labels, &s.means, &cfg).unwrap();
        close(
            s.g.scalar_value(la),
            lossref::attraction(&feats64, &rl, &m64),
            &format!("trial {trial}: attraction"),
        );

        let lr = losses::repulsion_loss(&mut s.g, s.features, &s.labels, &s.means, &cfg).unwrap();
        close(
            s.g.scalar_value(lr),
            lossref::repulsion(&feats64, &rl, &m64, bg64.as_deref()),
            &format!("trial {trial}: repulsion"),
        );

        let lu = losses::unit_loss(&mut s.g, s.raw, &s.labels).unwrap();
        close(
            s.g.scalar_value(lu),
            lossref::unit_loss(&raw64, &s.labels.valid),
            &format!("trial {trial}: unit"),
        );

        // Regional contrast with a replicated query draw.
        let mut rng_a = ChaCha8Rng::seed_from_u64(900 + trial);
        let mut rng_b = rng_a.clone();
        let queries: Vec<(usize, usize)> = losses::sample_queries(&s.labels, 7, &mut rng_a)
            .into_iter()
            .flat_map(|(ent, px)| px.into_iter().map(move |i| (ent as usize, i)))
            .collect();
        let cfg_small = LossConfig {
            rc_queries: 7,
            ..LossConfig::default()
        };
        let lrc = losses::regional_contrast_loss(
            &mut s.g,
            s.features,
            &s.labels,
            &s.means,
            &cfg_small,
            &mut rng_b,
        )
        .unwrap();
        close(
            s.g.scalar_value(lrc),
            lossref::regional_contrast(&feats64, &m64, bg64.as_deref(), 0.5, &queries),
            &format!("trial {trial}: regional contrast"),
        );

        // Segment space and its two losses, against the reference built on
        // the reference projection.
        let proj = match losses::projection_matrix(&s.means.entities, cfg.sigma_min) {
            Projection::Valid(p) => p,
            Projection::Degenerate { .. } => continue,
        };
        let p64: Vec<Vec<f64>> = (0..s.labels.k)
            .map(|r| {
                proj.p.data()[r * d..(r + 1) * d]
                    .iter()
                    .map(|&x| x as f64)
                    .collect()
            })
            .collect();
        let s_var = losses::segment_space(&mut s.g, &proj, s.features, false).unwrap();
        let s_ref = lossref::segment_space(&p64, &feats64, false);
        let s_vals = s.g.value(s_var).data();
        for i in 0..h * w {
            for k in 0..s.labels.k {
                assert!(
                    (s_vals[k * h * w + i] as f64 - s_ref[i][k]).abs() < 1e-4,
                    "segment space ({k},{i})"
                );
            }
        }

        let ls = losses::segmentation_loss(&mut s.g, s_var, &s.labels).unwrap();
        close(
            s.g.scalar_value(ls),
            lossref::segmentation_loss(&s_ref, &rl),
            &format!("trial {trial}: segmentation"),
        );

        let lg = losses::multiscale_gradient_loss(&mut s.g, s_var, &s.labels, 4).unwrap();
        let s_chw: Vec<f64> = (0..s.labels.k)
            .flat_map(|k| (0..h * w).map(move |i| (k, i)))
            .map(|(k, i)| s_ref[i][k])
            .collect();
        let mut shat = vec![0.0f64; s.labels.k * h * w];
        for i in 0..h * w {
            let l = s.labels.labels[i];
            if l > 0 {
                shat[(l as usize - 1) * h * w + i] = 1.0;
            }
        }
        close(
            s.g.scalar_value(lg),
            lossref::gradient_loss(&s_chw, &shat, &s.labels.valid, s.labels.k, h, w, 4),
            &format!("trial {trial}: gradient"),
        );
    }
}

// ---------------------------------------------------------------------------
// plug-in examples
// ---------------------------------------------------------------------------

#[test]
fn unit_loss_single_off_norm_pixel() {
    // n valid pixels, one with norm 2, the rest unit: loss = 1/n.
    let (d, n) = (4, 9);
    let labels = EntityLabels::from_raw_unchecked(vec![1; n], 3, 3);
    let mut g = Graph::new();
    let mut data = vec![0.0f32; d * n];
    for i in 0..n {
        data[i] = if i == 4 { 2.0 } else { 1.0 }; // channel 0 carries the norm
    }
    let raw = g.leaf(Tensor::new(&[d, n], data).unwrap(), false);
    let lu = losses::unit_loss(&mut g, raw, &labels).unwrap();
    assert!((g.scalar_value(lu) - 1.0 / n as f32).abs() < 1e-6);

    // all unit -> 0
    let mut data = vec![0.0f32; d * n];
    for i in 0..n {
        data[n + i] = 1.0;
    }
    let raw = g.leaf(Tensor::new(&[d, n], data).unwrap(), false);
    let lu = losses::unit_loss(&mut g, raw, &labels).unwrap();
    assert_eq!(g.scalar_value(lu), 0.0);
}

fn features_var(g: &mut Graph, d: usize, cols: &[Vec<f32>]) -> Var {
    let n = cols.len();
    let mut data = vec![0.0f32; d * n];
    for (i, col) in cols.iter().enumerate() {
        for c in 0..d {
            data[c * n + i] = col[c];
        }
    }
    g.leaf(Tensor::new(&[d, n], data).unwrap(), false)
}

#[test]
fn attraction_of_orthogonal_single_pixel_is_one() {
    let d = 4;
    let labels = EntityLabels::from_raw_unchecked(vec![1], 1, 1);
    let means = MeanSet {
        entities: vec![target(d, 0, 1)],
        background: None,
    };
    let mut g = Graph::new();
    let f = features_var(&mut g, d, &[e(d, 1)]);
    let la = losses::attraction_loss(&mut g, f, &labels, &means, &LossConfig::default()).unwrap();
    assert!((g.scalar_value(la) - 1.0).abs() < 1e-6);
}

#[test]
fn repulsion_plug_in_is_sqrt_two() {
    // K=1: the entity pixel aligns with the background mean and the
    // background pixel aligns with the entity mean.
    let d = 4;
    let labels = EntityLabels::from_raw_unchecked(vec![1, 0], 1, 2);
    let means = MeanSet {
        entities: vec![target(d, 0, 1)],
        background: Some(target(d, 1, 0)),
    };
    let mut g = Graph::new();
    let f = features_var(&mut g, d, &[e(d, 1), e(d, 0)]);
    let lr = losses::repulsion_loss(&mut g, f, &labels, &means, &LossConfig::default()).unwrap();
    assert!((g.scalar_value(lr) - std::f32::consts::SQRT_2).abs() < 1e-6);
}

#[test]
fn repulsion_of_mutually_orthogonal_configuration_is_zero() {
    let d = 6;
    let labels = EntityLabels::from_raw_unchecked(vec![1, 2, 0], 1, 3);
    let means = MeanSet {
        entities: vec![target(d, 0, 1), target(d, 1, 2)],
        background: Some(target(d, 2, 0)),
    };
    let mut g = Graph::new();
    let f = features_var(&mut g, d, &[e(d, 0), e(d, 1), e(d, 2)]);
    let lr = losses::repulsion_loss(&mut g, f, &labels, &means, &LossConfig::default()).unwrap();
    assert_eq!(g.scalar_value(lr), 0.0);
}

#[test]
fn regional_contrast_plug_in() {
    // K=2 without background, queries perfectly aligned, the other mean
    // orthogonal: per query -log(e^2 / (e^2 + 1)) with tau = 0.5.
    let d = 4;
    let labels = EntityLabels::from_raw_unchecked(vec![1, 2], 1, 2);
    let means = MeanSet {
        entities: vec![target(d, 0, 1), target(d, 1, 2)],
        background: None,
    };
    let mut g = Graph::new();
    let f = features_var(&mut g, d, &[e(d, 0), e(d, 1)]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lrc = losses::regional_contrast_loss(
        &mut g,
        f,
        &labels,
        &means,
        &LossConfig::default(),
        &mut rng,
    )
    .unwrap();
    let expect = -((2f64.exp()) / (2f64.exp() + 1.0)).ln();
    assert!((g.scalar_value(lrc) as f64 - expect).abs() < 1e-5, "{expect}");
}

#[test]
fn regional_contrast_needs_two_entities() {
    let d = 4;
    let labels = EntityLabels::from_raw_unchecked(vec![1, 0], 1, 2);
    let means = MeanSet {
        entities: vec![target(d, 0, 1)],
        background: Some(target(d, 1, 0)),
    };
    let mut g = Graph::new();
    let f = features_var(&mut g, d, &[e(d, 0), e(d, 1)]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lrc = losses::regional_contrast_loss(
        &mut g,
        f,
        &labels,
        &means,
        &LossConfig::default(),
        &mut rng,
    )
    .unwrap();
    assert_eq!(g.scalar_value(lrc), 0.0);
}

#[test]
fn segment_space_nullspace_feature_maps_to_zero() {
    let d = 6;
    let means = vec![target(d, 0, 1), target(d, 1, 2)];
    let proj = match losses::projection_matrix(&means, 1e-3) {
        Projection::Valid(p) => p,
        _ => panic!("orthonormal means must be invertible"),
    };
    let mut g = Graph::new();
    let f = features_var(&mut g, d, &[e(d, 3)]);
    let s = losses::segment_space(&mut g, &proj, f, false).unwrap();
    assert!(g.value(s).data().iter().all(|&x| x.abs() < 1e-6));
}

#[test]
fn segmentation_loss_of_zero_map_is_entity_fraction() {
    let labels = EntityLabels::from_raw_unchecked(vec![1, 1, 0, 0], 1, 4);
    let mut g = Graph::new();
    let s = g.leaf(Tensor::zeros(&[1, 4]), false);
    let ls = losses::segmentation_loss(&mut g, s, &labels).unwrap();
    assert!((g.scalar_value(ls) - 0.5).abs() < 1e-7);
}

#[test]
fn gradient_loss_is_zero_for_constant_maps() {
    // S constant, target constant (single entity covers everything).
    let (h, w) = (8, 8);
    let labels = EntityLabels::from_raw_unchecked(vec![1; h * w], h, w);
    let mut g = Graph::new();
    let s = g.leaf(Tensor::full(&[1, h * w], 0.3), false);
    let lg = losses::multiscale_gradient_loss(&mut g, s, &labels, 4).unwrap();
    assert_eq!(g.scalar_value(lg), 0.0);
}

// ---------------------------------------------------------------------------
// projection contract
// ---------------------------------------------------------------------------

fn gram_schmidt_means(rng: &mut SplitMix64, d: usize, k: usize, noise: f64) -> Vec<TargetLine> {
    // Orthonormal basis perturbed by `noise`, renormalized: well-conditioned
    // by construction for noise well below 1.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, c) in v.iter_mut().zip(b) {
                *x -= dot * c;
            }
        }
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut v: Vec<f64> = b.iter().map(|&x| x + noise * rng.uniform(-1.0, 1.0)).collect();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            TargetLine {
                mu: LineFeature::from_unit(v.iter().map(|&x| x as f32).collect()),
                entity_id: i as u32 + 1,
                support: 1,
                ambiguous: false,
            }
        })
        .collect()
}

#[test]
fn projection_on_basis_vectors_is_the_selector() {
    let d = 8;
    let means = vec![target(d, 0, 1), target(d, 1, 2), target(d, 2, 3)];
    let proj = match losses::projection_matrix(&means, 1e-3) {
        Projection::Valid(p) => p,
        _ => panic!("basis means are invertible"),
    };
    for r in 0..3 {
        for c in 0..d {
            let want = if r == c { 1.0 } else { 0.0 };
            assert!((proj.p.data()[r * d + c] - want).abs() < 1e-6);
        }
    }
    assert!((proj.condition - 1.0).abs() < 1e-5);
}

#[test]
fn projection_residual_on_well_conditioned_sets() {
    // 100 random well-conditioned mean sets: ||P A - I||_max < 1e-6.
    let mut rng = SplitMix64::new(31415);
    for trial in 0..100 {
        let (d, k) = (16, 5);
        let means = gram_schmidt_means(&mut rng, d, k, 0.25);
        let proj = match losses::projection_matrix(&means, 1e-3) {
            Projection::Valid(p) => p,
            Projection::Degenerate { condition } => {
                panic!("trial {trial}: unexpectedly degenerate ({condition})")
            }
        };
        let p = proj.p.data();
        let mut worst = 0.0f64;
        for r in 0..k {
            for c in 0..k {
                let mut acc = 0.0f64;
                for j in 0..d {
                    acc += p[r * d + j] as f64 * means[c].mu[j] as f64;
                }
                let want = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((acc - want).abs());
            }
        }
        assert!(worst < 1e-6, "trial {trial}: residual {worst:e}");
    }
}

#[test]
fn duplicate_means_are_degenerate() {
    let d = 8;
    let means = vec![target(d, 0, 1), target(d, 0, 2)];
    assert!(matches!(
        losses::projection_matrix(&means, 1e-3),
        Projection::Degenerate { .. }
    ));
}

#[test]
fn condition_matches_jacobi_sigma_min() {
    let mut rng = SplitMix64::new(999);
    for _ in 0..20 {
        let (d, k) = (12, 4);
        let means = gram_schmidt_means(&mut rng, d, k, 0.3);
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
        let (vals, _) = pseg_testkit::jacobi::sym_eig(&gram, k);
        let want = vals[k - 1].max(0.0).sqrt();
        match losses::projection_matrix(&means, 1e-3) {
            Projection::Valid(p) => {
                assert!((p.condition as f64 - want).abs() < 1e-5, "{} vs {want}", p.condition)
            }
            Projection::Degenerate { condition } => {
                assert!((condition as f64 - want).abs() < 1e-5)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// invariances and total assembly
// ---------------------------------------------------------------------------

#[test]
fn sign_flips_leave_every_component_bit_identical() {
    let mut rng = SplitMix64::new(606);
    let (d, h, w) = (8, 12, 12);
    let labels = random_labels(&mut rng, h, w, 2);
    let raw_a = random_raw(&mut rng, d, h * w);
    // flip the sign of every third pixel column
    let mut flipped = raw_a.data().to_vec();
    for i in (0..h * w).step_by(3) {
        for c in 0..d {
            flipped[c * h * w + i] = -flipped[c * h * w + i];
        }
    }
    let raw_b = Tensor::new(&[d, h * w], flipped).unwrap();

    let run = |raw_t: Tensor| {
        let mut g = Graph::new();
        let raw = g.leaf(raw_t, false);
        let (features, _) = network::normalize_pixels(&mut g, raw, d, h * w).unwrap();
        let fmap = {
            let t = g.value(features).reshaped(&[d, h, w]).unwrap();
            FeatureMap::from_channel_major(&t)
        };
        let means = losses::compute_means(&fmap, &labels);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let tl = losses::total_loss(
            &mut g,
            raw,
            features,
            &labels,
            &means,
            &LossConfig::default(),
            LossToggles::default(),
            &mut rng,
        )
        .unwrap();
        tl.report
    };
    let ra = run(raw_a);
    let rb = run(raw_b);
    assert_eq!(ra.components(), rb.components());
}

#[test]
fn invalid_and_background_pixels_do_not_move_any_loss() {
    let mut rng = SplitMix64::new(910);
    let (d, h, w) = (8, 14, 14);
    let labels = random_labels(&mut rng, h, w, 2);
    let base = random_raw(&mut rng, d, h * w);

    // Perturb raw values at invalid pixels only.
    let mut tweaked = base.data().to_vec();
    for i in 0..h * w {
        if !labels.valid[i] {
            for c in 0..d {
                tweaked[c * h * w + i] = rng.uniform(-0.9, 0.9) as f32;
            }
        }
    }
    let run = |raw_t: Tensor| {
        let mut g = Graph::new();
        let raw = g.leaf(raw_t, true);
        let (features, _) = network::normalize_pixels(&mut g, raw, d, h * w).unwrap();
        let fmap = {
            let t = g.value(features).reshaped(&[d, h, w]).unwrap();
            FeatureMap::from_channel_major(&t)
        };
        let means = losses::compute_means(&fmap, &labels);
        let mut rc = ChaCha8Rng::seed_from_u64(7);
        let tl = losses::total_loss(
            &mut g,
            raw,
            features,
            &labels,
            &means,
            &LossConfig::default(),
            LossToggles::default(),
            &mut rc,
        )
        .unwrap();
        let report = tl.report;
        g.backward(tl.total).unwrap();
        let grad = g.grad(raw).unwrap().to_vec();
        (report, grad)
    };
    let (ra, ga) = run(base);
    let (rb, gb) = run(Tensor::new(&[d, h * w], tweaked).unwrap());
    assert_eq!(ra.components(), rb.components(), "losses moved");
    // Gradients at valid pixels are identical; invalid pixels get zero.
    for i in 0..h * w {
        for c in 0..d {
            let idx = c * h * w + i;
            if labels.valid[i] {
                assert_eq!(ga[idx], gb[idx], "gradient moved at valid pixel {i}");
            } else {
                assert_eq!(ga[idx], 0.0);
                assert_eq!(gb[idx], 0.0);
            }
        }
    }
}

#[test]
fn attraction_ignores_background_features() {
    let mut rng = SplitMix64::new(11);
    let (d, h, w) = (8, 12, 12);
    let labels = random_labels(&mut rng, h, w, 2);
    let base = random_raw(&mut rng, d, h * w);
    let mut tweaked = base.data().to_vec();
    for i in 0..h * w {
        if labels.labels[i] == 0 {
            for c in 0..d {
                tweaked[c * h * w + i] = rng.uniform(-0.9, 0.9) as f32;
            }
        }
    }
    let la_of = |raw_t: Tensor| {
        let mut g = Graph::new();
        let raw = g.leaf(raw_t, false);
        let (features, _) = network::normalize_pixels(&mut g, raw, d, h * w).unwrap();
        let fmap = {
            let t = g.value(features).reshaped(&[d, h, w]).unwrap();
            FeatureMap::from_channel_major(&t)
        };
        let means = losses::compute_means(&fmap, &labels);
        let la =
            losses::attraction_loss(&mut g, features, &labels, &means, &LossConfig::default())
                .unwrap();
        g.scalar_value(la)
    };
    assert_eq!(la_of(base), la_of(Tensor::new(&[d, h * w], tweaked).unwrap()));
}

/// Striped labels whose regions are wide enough to keep valid cores under
/// 5x5 erosion: entity 1, entity 2, then background.
fn striped_labels(h: usize, w: usize) -> EntityLabels {
    let third = w / 3;
    let raw: Vec<u32> = (0..h * w)
        .map(|i| {
            let x = i % w;
            if x < third {
                1
            } else if x < 2 * third {
                2
            } else {
                0
            }
        })
        .collect();
    EntityLabels::from_raw(&raw, h, w)
}

#[test]
fn perfect_configuration_hits_the_floor() {
    let (d, h, w) = (8, 10, 18);
    let labels = striped_labels(h, w);
    assert_eq!(labels.k, 2);
    let mut g = Graph::new();
    let mut data = vec![0.0f32; d * h * w];
    for i in 0..h * w {
        let c = match labels.labels[i] {
            1 => 0,
            2 => 1,
            _ => 2,
        };
        data[c * h * w + i] = 1.0;
    }
    let raw = g.leaf(Tensor::new(&[d, h * w], data).unwrap(), false);
    let (features, _) = network::normalize_pixels(&mut g, raw, d, h * w).unwrap();
    let fmap = {
        let t = g.value(features).reshaped(&[d, h, w]).unwrap();
        FeatureMap::from_channel_major(&t)
    };
    let means = losses::compute_means(&fmap, &labels);
    let mut rc = ChaCha8Rng::seed_from_u64(5);
    let tl = losses::total_loss(
        &mut g,
        raw,
        features,
        &labels,
        &means,
        &LossConfig::default(),
        LossToggles::default(),
        &mut rc,
    )
    .unwrap();
    let r = tl.report;
    assert!(r.la.abs() < 1e-6, "la {}", r.la);
    assert!(r.lr.abs() < 1e-6, "lr {}", r.lr);
    assert!(r.ls.abs() < 1e-6, "ls {}", r.ls);
    assert!(r.lg.abs() < 1e-6, "lg {}", r.lg);
    assert!(r.lu.abs() < 1e-6, "lu {}", r.lu);
    // floor: -log(e^{1/tau} / (e^{1/tau} + K_neg)), negatives = 1 other
    // entity + background, all orthogonal.
    let floor = -((2f64.exp()) / (2f64.exp() + 2.0)).ln();
    assert!((r.lrc as f64 - floor).abs() < 1e-5, "lrc {} vs {floor}", r.lrc);
    assert!(!r.degenerate_projection);
    // weighted assembly
    let want = r.la + r.lr + r.ls + 0.125 * r.lrc + 0.025 * r.lg + 0.05 * r.lu;
    assert!((r.total - want).abs() < 1e-6);
}

#[test]
fn degenerate_projection_drops_segment_losses() {
    // Two entities forced onto the same line: P must be degenerate and the
    // segment-space terms contribute zero.
    let (d, h, w) = (8, 10, 18);
    let labels = striped_labels(h, w);
    let mut g = Graph::new();
    let mut data = vec![0.0f32; d * h * w];
    for i in 0..h * w {
        let c = match labels.labels[i] {
            0 => 2,
            _ => 0, // both entities on e0
        };
        data[c * h * w + i] = 1.0;
    }
    let raw = g.leaf(Tensor::new(&[d, h * w], data).unwrap(), false);
    let (features, _) = network::normalize_pixels(&mut g, raw, d, h * w).unwrap();
    let fmap = {
        let t = g.value(features).reshaped(&[d, h, w]).unwrap();
        FeatureMap::from_channel_major(&t)
    };
    let means = losses::compute_means(&fmap, &labels);
    let mut rc = ChaCha8Rng::seed_from_u64(5);
    let tl = losses::total_loss(
        &mut g,
        raw,
        features,
        &labels,
        &means,
        &LossConfig::default(),
        LossToggles::default(),
        &mut rc,
    )
    .unwrap();
    let r = tl.report;
    assert!(r.degenerate_projection);
    assert_eq!((r.ls, r.lg), (0.0, 0.0));
    let want = r.la + r.lr + 0.125 * r.lrc + 0.05 * r.lu;
    assert!((r.total - want).abs() < 1e-6);
}

// ---------------------------------------------------------------------------
// end-to-end gradient check
// ---------------------------------------------------------------------------

#[test]
fn total_gradient_matches_finite_differences() {
    // d(total)/d(raw) on 6x6 images, d=8, K=2, against central differences
    // through an f64 reference with means, projection, and queries frozen.
    // Seeds whose dot products or norms sit within 5*eps of a kink are
    // re-sampled (finite differences are meaningless across |.| kinks).
    let eps = 1e-3;
    let (d, h, w) = (8usize, 6usize, 6usize);
    let n = h * w;
    let mut accepted = 0;
    let mut seed = 0u64;
    while accepted < 4 {
        seed += 1;
        assert!(seed < 200, "could not find kink-free configurations");
        let mut rng = SplitMix64::new(seed);
        // Labels without erosion so K=2 survives on a 6x6 grid.
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
        let labels = EntityLabels::from_raw_unchecked(raw_labels, h, w);
        let raw_t = random_raw(&mut rng, d, n);

        let mut g = Graph::new();
        let raw = g.leaf(raw_t.clone(), true);
        let (features, _) = network::normalize_pixels(&mut g, raw, d, n).unwrap();
        let fmap = {
            let t = g.value(features).reshaped(&[d, h, w]).unwrap();
            FeatureMap::from_channel_major(&t)
        };
        let means = losses::compute_means(&fmap, &labels);
        let (m64, bg64) = means64(&means);
        let proj = match losses::projection_matrix(&means.entities, 1e-3) {
            Projection::Valid(p) => p,
            Projection::Degenerate { .. } => continue,
        };
        let p64: Vec<Vec<f64>> = (0..labels.k)
            .map(|r| proj.p.data()[r * d..(r + 1) * d].iter().map(|&x| x as f64).collect())
            .collect();

        // Kink check: every |f . mu|, |1 - norm|, and |(P f)_k| off zero.
        let feats64 = pixel_features64(&fmap);
        let raw64 = raw_pixels64(&g, raw, d, n);
        let mut kink = false;
        for f in &feats64 {
            for mu in m64.iter().chain(bg64.iter()) {
                let dot: f64 = f.iter().zip(mu).map(|(a, b)| a * b).sum();
                if dot.abs() < 5.0 * eps {
                    kink = true;
                }
            }
            for row in &p64 {
                let dot: f64 = f.iter().zip(row).map(|(a, b)| a * b).sum();
                if dot.abs() < 5.0 * eps {
                    kink = true;
                }
            }
        }
        for rp in &raw64 {
            let norm: f64 = rp.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (1.0 - norm).abs() < 5.0 * eps {
                kink = true;
            }
        }
        if kink {
            continue;
        }
        accepted += 1;

        let mut rc_a = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let rc_b = rc_a.clone();
        let queries: Vec<(usize, usize)> = {
            let mut r = rc_b.clone();
            losses::sample_queries(&labels, 16, &mut r)
                .into_iter()
                .flat_map(|(ent, px)| px.into_iter().map(move |i| (ent as usize, i)))
                .collect()
        };
        let cfg = LossConfig {
            rc_queries: 16,
            ..LossConfig::default()
        };
        let tl = losses::total_loss(
            &mut g,
            raw,
            features,
            &labels,
            &means,
            &cfg,
            LossToggles::default(),
            &mut rc_a,
        )
        .unwrap();
        g.backward(tl.total).unwrap();
        let analytic: Vec<f64> = g.grad(raw).unwrap().iter().map(|&x| x as f64).collect();

        // f64 reference with the same frozen means/projection/queries.
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
            let rl = RefLabels {
                labels: &rl_labels,
                valid: &rl_valid,
                h,
                w,
                k,
            };
            let la = lossref::attraction(&feats, &rl, &m64);
            let lr = lossref::repulsion(&feats, &rl, &m64, bg64.as_deref());
            let lrc = lossref::regional_contrast(&feats, &m64, bg64.as_deref(), 0.5, &queries);
            let lu = lossref::unit_loss(&pixels, &rl_valid);
            let smap = lossref::segment_space(&p64, &feats, false);
            let ls = lossref::segmentation_loss(&smap, &rl);
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
            let lg = lossref::gradient_loss(&s_chw, &shat, &rl_valid, k, h, w, 4);
            la + lr + ls + 0.125 * lrc + 0.025 * lg + 0.05 * lu
        };
        let raw64_flat: Vec<f64> = raw_t.data().iter().map(|&x| x as f64).collect();
        let numeric = fd::grad(&raw64_flat, eps, |x| reference(x));
        let err = pseg_testkit::max_rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "seed {seed}: gradient error {err:e}");
    }
}
