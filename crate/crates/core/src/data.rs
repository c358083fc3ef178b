//! Procedural geometric-shape scenes with entity ground truth.
//!
//! Scenes are flat-colored circles, rectangles, and triangles over a flat
//! background, composited in z order with hard edges, plus additive Gaussian
//! noise on the image. A configurable fraction of shapes is drawn but labeled
//! background, which is what gives the background category internal structure
//! (the training losses must not try to unify it). Generation is pure per
//! (seed, index) and rejects scenes whose labeled entities end up with fewer
//! than the minimum visible pixels.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: (usize, usize),
    pub n_shapes: (usize, usize),
    pub kinds: Vec<ShapeKind>,
    /// Minimum pairwise L-inf distance between any two scene colors
    /// (including the background color).
    pub min_color_dist: f32,
    /// Probability that a shape is drawn but labeled as background.
    pub unlabeled_prob: f64,
    /// Additive Gaussian noise sigma on the image.
    pub noise_sigma: f32,
    /// Minimum visible pixels per labeled entity after occlusion.
    pub min_visible: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: (64, 64),
            n_shapes: (2, 6),
            kinds: vec![ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle],
            min_color_dist: 0.15,
            unlabeled_prob: 0.1,
            noise_sigma: 0.02,
            min_visible: 25,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ShapeGeom {
    Circle { cy: f32, cx: f32, r: f32 },
    Rectangle { y0: f32, x0: f32, y1: f32, x1: f32 },
    Triangle { v: [(f32, f32); 3] },
}

impl ShapeGeom {
    /// Pixel-center containment test.
    pub fn contains(&self, y: f32, x: f32) -> bool {
        match self {
            ShapeGeom::Circle { cy, cx, r } => {
                let (dy, dx) = (y - cy, x - cx);
                dy * dy + dx * dx <= r * r
            }
            ShapeGeom::Rectangle { y0, x0, y1, x1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            ShapeGeom::Triangle { v } => {
                // Consistent winding: all edge cross products share a sign.
                let sign = |a: (f32, f32), b: (f32, f32)| {
                    (b.0 - a.0) * (x - a.1) - (b.1 - a.1) * (y - a.0)
                };
                let s0 = sign(v[0], v[1]);
                let s1 = sign(v[1], v[2]);
                let s2 = sign(v[2], v[0]);
                (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShapeInfo {
    pub kind: ShapeKind,
    pub geom: ShapeGeom,
    pub color: [f32; 3],
    /// Draw order; higher z is on top.
    pub z: usize,
    /// False when the shape was deliberately left unlabeled.
    pub labeled: bool,
    /// Entity id in the final label map (0 for unlabeled shapes).
    pub entity_id: u32,
}

#[derive(Debug, Clone)]
pub struct SceneMeta {
    pub index: u64,
    pub background_color: [f32; 3],
    pub shapes: Vec<ShapeInfo>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// [3, h, w] in [0, 1].
    pub image: Tensor,
    /// Row-major labels: 0 background, 1..=k entities.
    pub labels: Vec<u32>,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub meta: SceneMeta,
}

fn color_dist(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn sample_color(
    rng: &mut ChaCha8Rng,
    existing: &[[f32; 3]],
    min_dist: f32,
) -> Option<[f32; 3]> {
    for _ in 0..100 {
        let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        if existing.iter().all(|e| color_dist(e, &c) >= min_dist) {
            return Some(c);
        }
    }
    None
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller on the scene stream.
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 1e-12 {
            return ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32;
        }
    }
}

fn triangle_min_angle(v: &[(f32, f32); 3]) -> f32 {
    let mut angles = [0.0f32; 3];
    for i in 0..3 {
        let a = v[i];
        let b = v[(i + 1) % 3];
        let c = v[(i + 2) % 3];
        let ab = ((b.0 - a.0), (b.1 - a.1));
        let ac = ((c.0 - a.0), (c.1 - a.1));
        let dot = ab.0 * ac.0 + ab.1 * ac.1;
        let nab = (ab.0 * ab.0 + ab.1 * ab.1).sqrt();
        let nac = (ac.0 * ac.0 + ac.1 * ac.1).sqrt();
        if nab < 1e-6 || nac < 1e-6 {
            return 0.0;
        }
        angles[i] = (dot / (nab * nac)).clamp(-1.0, 1.0).acos();
    }
    angles.iter().fold(f32::INFINITY, |m, &a| m.min(a)).to_degrees()
}

fn sample_geom(rng: &mut ChaCha8Rng, kind: ShapeKind, h: usize, w: usize) -> ShapeGeom {
    let (hf, wf) = (h as f32, w as f32);
    let min_dim = hf.min(wf);
    match kind {
        ShapeKind::Circle => {
            let r = rng.gen_range(0.09..0.24) * min_dim;
            ShapeGeom::Circle {
                cy: rng.gen_range(0.0..hf),
                cx: rng.gen_range(0.0..wf),
                r,
            }
        }
        ShapeKind::Rectangle => {
            let rh = rng.gen_range(0.15..0.45) * hf;
            let rw = rng.gen_range(0.15..0.45) * wf;
            let y0 = rng.gen_range(-0.2 * hf..hf - 0.3 * rh);
            let x0 = rng.gen_range(-0.2 * wf..wf - 0.3 * rw);
            ShapeGeom::Rectangle {
                y0,
                x0,
                y1: y0 + rh,
                x1: x0 + rw,
            }
        }
        ShapeKind::Triangle => {
            // Resample until the minimum interior angle clears 20 degrees;
            // slivers vanish under erosion and make useless entities.
            loop {
                let cy = rng.gen_range(0.1 * hf..0.9 * hf);
                let cx = rng.gen_range(0.1 * wf..0.9 * wf);
                let s = rng.gen_range(0.12..0.3) * min_dim;
                let v: [(f32, f32); 3] = [
                    (cy + rng.gen_range(-s..s), cx + rng.gen_range(-s..s)),
                    (cy + rng.gen_range(-s..s), cx + rng.gen_range(-s..s)),
                    (cy + rng.gen_range(-s..s), cx + rng.gen_range(-s..s)),
                ];
                if triangle_min_angle(&v) >= 20.0 {
                    return ShapeGeom::Triangle { v };
                }
            }
        }
    }
}

/// Generates scene `index` of the configured stream. Deterministic per
/// (config.seed, index); constraint failures re-sample the whole scene up to
/// 100 times.
pub fn generate(config: &SceneConfig, index: u64) -> Result<Scene, DataError> {
    if config.kinds.is_empty() || config.n_shapes.0 < 1 || config.n_shapes.0 > config.n_shapes.1 {
        return Err(DataError::BadConfig(
            "need at least one shape kind and a non-empty shape count range".into(),
        ));
    }
    let (h, w) = config.size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index.wrapping_add(1));

    'attempt: for attempt in 0..100 {
        let _ = attempt;
        let n = rng.gen_range(config.n_shapes.0..=config.n_shapes.1);
        let mut colors: Vec<[f32; 3]> = Vec::with_capacity(n + 1);
        let Some(bg) = sample_color(&mut rng, &colors, config.min_color_dist) else {
            continue 'attempt;
        };
        colors.push(bg);

        let mut shapes: Vec<ShapeInfo> = Vec::with_capacity(n);
        for z in 0..n {
            let kind = config.kinds[rng.gen_range(0..config.kinds.len())];
            let geom = sample_geom(&mut rng, kind, h, w);
            let Some(color) = sample_color(&mut rng, &colors, config.min_color_dist) else {
                continue 'attempt;
            };
            colors.push(color);
            let labeled = rng.gen::<f64>() >= config.unlabeled_prob;
            shapes.push(ShapeInfo {
                kind,
                geom,
                color,
                z,
                labeled,
                entity_id: 0,
            });
        }

        // Rasterize with z-order occlusion: topmost shape wins each pixel.
        let mut top = vec![usize::MAX; h * w]; // shape index or MAX for background
        for (si, shape) in shapes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if shape.geom.contains(y as f32 + 0.5, x as f32 + 0.5) {
                        top[y * w + x] = si;
                    }
                }
            }
        }

        // Visibility per labeled shape.
        let mut visible = vec![0usize; shapes.len()];
        for &t in &top {
            if t != usize::MAX {
                visible[t] += 1;
            }
        }
        for (si, shape) in shapes.iter().enumerate() {
            if shape.labeled && visible[si] < config.min_visible {
                continue 'attempt;
            }
        }

        // Assign contiguous entity ids to labeled shapes in z order.
        let mut next_id = 0u32;
        for shape in shapes.iter_mut() {
            if shape.labeled {
                next_id += 1;
                shape.entity_id = next_id;
            }
        }
        let k = next_id as usize;

        let mut labels = vec![0u32; h * w];
        let mut image = vec![0f32; 3 * h * w];
        for c in 0..3 {
            image[c * h * w..(c + 1) * h * w].fill(bg[c]);
        }
        for (i, &t) in top.iter().enumerate() {
            if t != usize::MAX {
                labels[i] = shapes[t].entity_id;
                for c in 0..3 {
                    image[c * h * w + i] = shapes[t].color[c];
                }
            }
        }
        if config.noise_sigma > 0.0 {
            for v in image.iter_mut() {
                *v = (*v + config.noise_sigma * gauss(&mut rng)).clamp(0.0, 1.0);
            }
        }

        return Ok(Scene {
            image: Tensor::new(&[3, h, w], image).expect("image shape"),
            labels,
            h,
            w,
            k,
            meta: SceneMeta {
                index,
                background_color: bg,
                shapes,
            },
        });
    }
    Err(DataError::UnsatisfiableConfig { attempts: 100 })
}

/// The first `n` scenes of the stream.
pub fn dataset(config: &SceneConfig, n: usize) -> Result<Vec<Scene>, DataError> {
    (0..n as u64).map(|i| generate(config, i)).collect()
}

/// A scene built for multi-resolution tests: one large rectangle with a
/// small circle (area under 1% of the image) strictly inside it, both
/// labeled, over a plain background.
pub fn nested_scene(size: (usize, usize), seed: u64) -> Scene {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f32, w as f32);

    let mut colors: Vec<[f32; 3]> = Vec::new();
    let bg = sample_color(&mut rng, &colors, 0.25).expect("background color");
    colors.push(bg);
    let rect_color = sample_color(&mut rng, &colors, 0.25).expect("rect color");
    colors.push(rect_color);
    let circle_color = sample_color(&mut rng, &colors, 0.25).expect("circle color");

    let rh = rng.gen_range(0.5..0.7) * hf;
    let rw = rng.gen_range(0.5..0.7) * wf;
    let y0 = rng.gen_range(0.05 * hf..hf - rh - 0.05 * hf);
    let x0 = rng.gen_range(0.05 * wf..wf - rw - 0.05 * wf);
    let rect = ShapeGeom::Rectangle {
        y0,
        x0,
        y1: y0 + rh,
        x1: x0 + rw,
    };
    // Area cap: pi r^2 < 0.01 h w; floor keeps it a real blob.
    let r_max = (0.01 * hf * wf / std::f32::consts::PI).sqrt();
    let r = rng.gen_range(0.80 * r_max..0.98 * r_max).max(3.0);
    let cy = rng.gen_range(y0 + r + 2.0..y0 + rh - r - 2.0);
    let cx = rng.gen_range(x0 + r + 2.0..x0 + rw - r - 2.0);
    let circle = ShapeGeom::Circle { cy, cx, r };

    let shapes = vec![
        ShapeInfo {
            kind: ShapeKind::Rectangle,
            geom: rect,
            color: rect_color,
            z: 0,
            labeled: true,
            entity_id: 1,
        },
        ShapeInfo {
            kind: ShapeKind::Circle,
            geom: circle,
            color: circle_color,
            z: 1,
            labeled: true,
            entity_id: 2,
        },
    ];

    let mut labels = vec![0u32; h * w];
    let mut image = vec![0f32; 3 * h * w];
    for c in 0..3 {
        image[c * h * w..(c + 1) * h * w].fill(bg[c]);
    }
    for shape in &shapes {
        for y in 0..h {
            for x in 0..w {
                if shape.geom.contains(y as f32 + 0.5, x as f32 + 0.5) {
                    labels[y * w + x] = shape.entity_id;
                    for c in 0..3 {
                        image[c * h * w + y * w + x] = shape.color[c];
                    }
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v = (*v + 0.02 * gauss(&mut rng)).clamp(0.0, 1.0);
    }

    Scene {
        image: Tensor::new(&[3, h, w], image).expect("image shape"),
        labels,
        h,
        w,
        k: 2,
        meta: SceneMeta {
            index: seed,
            background_color: bg,
            shapes,
        },
    }
}
