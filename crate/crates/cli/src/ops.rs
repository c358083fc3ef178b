//! Command implementations behind the thin clap layer in `main`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use pseg_core::cluster::{self, Segmentation};
use pseg_core::data::{self, Scene, SceneMeta};
use pseg_core::labels::EntityLabels;
use pseg_core::losses::LossToggles;
use pseg_core::metrics::{self, EvalSummary};
use pseg_core::network::{self, Model};
use pseg_core::persist::checkpoint::{load_checkpoint, save_checkpoint};
use pseg_core::persist::pnm;
use pseg_core::persist::runconfig::RunConfig;
use pseg_core::persist::write_atomic;
use pseg_core::train::{self, TrainConfig, TrainState};
use pseg_core::Tensor;

use crate::palette;

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

pub fn print_config(cfg: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", cfg.render());
    println!("# end configuration");
}

fn scene_image_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("scene_{index:05}.ppm"))
}

fn scene_labels_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("scene_{index:05}_labels.pgm"))
}

// -- gen ---------------------------------------------------------------------

pub fn cmd_gen(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let scfg = cfg.scene_config();
    let mut manifest = String::new();
    for index in 0..count as u64 {
        let scene = data::generate(&scfg, index)?;
        let rgb = pnm::image_to_rgb8(&scene.image);
        pnm::write_ppm(&scene_image_path(out, index), scene.w, scene.h, &rgb)?;
        let labels16: Vec<u16> = scene.labels.iter().map(|&l| l as u16).collect();
        pnm::write_pgm16(&scene_labels_path(out, index), scene.w, scene.h, &labels16)?;
        manifest.push_str(&format!("{index} {} {}\n", scfg.seed, scene.k));
    }
    write_atomic(&out.join("manifest.txt"), manifest.as_bytes())?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

// -- scene loading -----------------------------------------------------------

fn first_index_in(name: &str) -> Option<u64> {
    let digits: String = name
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

/// Loads image + label pairs from a generated scene directory.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let mut by_index: BTreeMap<u64, Scene> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?
    {
        let path = entry?.path();
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !name.ends_with("_labels.pgm") {
            continue;
        }
        let index = first_index_in(&name)
            .with_context(|| format!("no index in label file name {name}"))?;
        let (w, h, labels16) = pnm::read_pgm(&path)?;
        let image_path = scene_image_path(dir, index);
        let (iw, ih, rgb) = pnm::read_ppm(&image_path)
            .with_context(|| format!("reading {}", image_path.display()))?;
        if (iw, ih) != (w, h) {
            bail!("scene {index}: image is {iw}x{ih} but labels are {w}x{h}");
        }
        let labels: Vec<u32> = labels16.iter().map(|&l| l as u32).collect();
        let k = labels.iter().copied().max().unwrap_or(0) as usize;
        by_index.insert(
            index,
            Scene {
                image: pnm::rgb8_to_image(w, h, &rgb),
                labels,
                h,
                w,
                k,
                meta: SceneMeta {
                    index,
                    background_color: [0.0; 3],
                    shapes: Vec::new(),
                },
            },
        );
    }
    if by_index.is_empty() {
        bail!("no scenes found in {}", dir.display());
    }
    Ok(by_index.into_values().collect())
}

// -- train -------------------------------------------------------------------

pub struct TrainArgs<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a Path,
    pub epochs: usize,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub ablate_losses: Option<&'a str>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let scenes = load_scenes(args.data)?;
    let toggles = match args.ablate_losses {
        Some(list) => LossToggles::disable_list(list).map_err(anyhow::Error::msg)?,
        None => LossToggles::default(),
    };
    let mut state = match args.resume {
        Some(path) => {
            let st = load_checkpoint(path)
                .with_context(|| format!("resuming from {}", path.display()))?;
            println!(
                "resumed from {} at epoch {}, step {}",
                path.display(),
                st.epoch,
                st.step
            );
            st
        }
        None => TrainState::new(Model::init(args.cfg.model_config())),
    };
    println!(
        "model: {} parameters, stride {}",
        state.model.param_count(),
        state.model.config.stride()
    );

    let tcfg = TrainConfig {
        lr: args.cfg.lr,
        seed: args.cfg.train_seed,
        loss: args.cfg.loss_config(),
        toggles,
    };
    let log_path = args.out.with_extension("losslog");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening loss log {}", log_path.display()))?;
    train::train(&mut state, &scenes, &tcfg, args.epochs, |epoch, report| {
        let c = report.components();
        let line = format!(
            "{} {} {} {} {} {} {}",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6]
        );
        println!("epoch {epoch}: {line}");
        let _ = writeln!(log, "{line}");
    })?;
    save_checkpoint(&state, args.out)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

// -- infer -------------------------------------------------------------------

pub struct InferArgs<'a> {
    pub cfg: &'a RunConfig,
    pub ckpt: &'a Path,
    pub image: &'a Path,
    pub out: &'a Path,
    pub multires: Option<&'a str>,
    pub bandwidth: Option<f32>,
    pub viz: Option<&'a Path>,
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let state = load_checkpoint(args.ckpt)?;
    let model = state.model;
    let (w, h, rgb) = pnm::read_ppm(args.image)?;
    let image = pnm::rgb8_to_image(w, h, &rgb);

    let mut params = args.cfg.multires_params();
    if let Some(list) = args.multires {
        params.resolutions = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|_| anyhow::anyhow!("bad resolution '{s}'")))
            .collect::<Result<_>>()?;
        if params.resolutions.is_empty() {
            bail!("empty --multires list");
        }
    }
    if let Some(bw) = args.bandwidth {
        params.ms.bandwidth = bw;
    }
    let stride = model.config.stride();
    if h % stride != 0 || w % stride != 0 {
        println!(
            "note: image {w}x{h} is not divisible by the network stride {stride}; \
             processing at the next compatible size and mapping labels back"
        );
    }

    let seg = cluster::multires_segment(&model, &image, &params)?;
    // back to the input grid
    let labels = cluster::resize_labels_nearest(&seg.labels, seg.h, seg.w, h, w);
    let labels16: Vec<u16> = labels.iter().map(|&l| l as u16).collect();
    pnm::write_pgm16(args.out, w, h, &labels16)?;

    let mut table = String::new();
    for (i, m) in seg.modes.iter().enumerate() {
        table.push_str(&format!("{} {} {}\n", i + 1, m.support, m.mean_similarity));
    }
    let table_path = args.out.with_extension("modes.txt");
    write_atomic(&table_path, table.as_bytes())?;

    if let Some(viz_path) = args.viz {
        let mut rgb = vec![0u8; 3 * h * w];
        for (i, &l) in labels.iter().enumerate() {
            let c = palette::color_of(l);
            rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
        }
        pnm::write_ppm(viz_path, w, h, &rgb)?;
    }
    println!(
        "{} segments -> {} (+ {})",
        seg.modes.len(),
        args.out.display(),
        table_path.display()
    );
    Ok(())
}

// -- eval --------------------------------------------------------------------

fn list_label_maps(dir: &Path) -> Result<BTreeMap<u64, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in
        std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?
    {
        let path = entry?.path();
        if path.extension().map(|e| e == "pgm").unwrap_or(false) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if let Some(idx) = first_index_in(&name) {
                out.insert(idx, path);
            }
        }
    }
    Ok(out)
}

fn load_segmentation(path: &Path) -> Result<Segmentation> {
    let (w, h, data) = pnm::read_pgm(path)?;
    let labels: Vec<u32> = data.iter().map(|&l| l as u32).collect();
    let n_modes = labels.iter().copied().max().unwrap_or(0) as usize;
    // confidences from the sidecar mode table when present
    let mut sims = vec![1.0f32; n_modes];
    let sidecar = path.with_extension("modes.txt");
    if let Ok(text) = std::fs::read_to_string(&sidecar) {
        for line in text.lines() {
            let mut it = line.split_whitespace();
            if let (Some(id), _, Some(sim)) = (it.next(), it.next(), it.next()) {
                if let (Ok(id), Ok(sim)) = (id.parse::<usize>(), sim.parse::<f32>()) {
                    if id >= 1 && id <= n_modes {
                        sims[id - 1] = sim;
                    }
                }
            }
        }
    }
    let modes = (0..n_modes)
        .map(|i| pseg_core::cluster::Mode {
            center: pseg_core::geometry::LineFeature::from_unit(vec![1.0, 0.0]),
            support: labels.iter().filter(|&&l| l == i as u32 + 1).count(),
            mean_similarity: sims[i],
        })
        .collect();
    Ok(Segmentation { h, w, labels, modes })
}

fn push_metric(line: &mut String, key: &str, v: Option<f32>) {
    match v {
        Some(x) => line.push_str(&format!(" {key}={x}")),
        None => line.push_str(&format!(" {key}=absent")),
    }
}

pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<()> {
    let preds = list_label_maps(pred_dir)?;
    let gts = list_label_maps(gt_dir)?;
    if preds.is_empty() {
        bail!("no prediction label maps in {}", pred_dir.display());
    }
    let unpaired: Vec<u64> = preds
        .keys()
        .filter(|i| !gts.contains_key(i))
        .chain(gts.keys().filter(|i| !preds.contains_key(i)))
        .copied()
        .collect();
    if !unpaired.is_empty() {
        bail!("unpaired indices between pred and gt: {unpaired:?}");
    }

    let mut report = String::new();
    let mut sums = EvalAccumulator::default();
    println!("index entities recall m_iou m_biou ap50 ap75 map");
    for (idx, pred_path) in &preds {
        let pred = load_segmentation(pred_path)?;
        let (w, h, gt16) = pnm::read_pgm(&gts[idx])?;
        if (pred.w, pred.h) != (w, h) {
            bail!("index {idx}: prediction and ground truth sizes differ");
        }
        let gt_labels: Vec<u32> = gt16.iter().map(|&l| l as u32).collect();
        let gt = EntityLabels::from_raw_unchecked(gt_labels, h, w);
        let s = metrics::evaluate(&pred, &gt, None);
        let mut line = format!("img={idx} entities={} recall={}", s.n_entities, s.recall);
        push_metric(&mut line, "mean_iou", s.mean_matched_iou);
        push_metric(&mut line, "mean_boundary_iou", s.mean_matched_boundary_iou);
        push_metric(&mut line, "ap50", s.ap.map(|a| a.ap50));
        push_metric(&mut line, "ap75", s.ap.map(|a| a.ap75));
        push_metric(&mut line, "map", s.ap.map(|a| a.map));
        report.push_str(&line);
        report.push('\n');
        println!(
            "{idx:5} {:8} {:.4} {} {} {} {} {}",
            s.n_entities,
            s.recall,
            fmt_opt(s.mean_matched_iou),
            fmt_opt(s.mean_matched_boundary_iou),
            fmt_opt(s.ap.map(|a| a.ap50)),
            fmt_opt(s.ap.map(|a| a.ap75)),
            fmt_opt(s.ap.map(|a| a.map)),
        );
        sums.add(&s);
    }
    let agg = sums.aggregate();
    let mut line = format!("aggregate images={} recall={}", sums.n, agg.recall);
    push_metric(&mut line, "mean_iou", agg.mean_matched_iou);
    push_metric(&mut line, "mean_boundary_iou", agg.mean_matched_boundary_iou);
    push_metric(&mut line, "ap50", agg.ap.map(|a| a.ap50));
    push_metric(&mut line, "ap75", agg.ap.map(|a| a.ap75));
    push_metric(&mut line, "map", agg.ap.map(|a| a.map));
    report.push_str(&line);
    report.push('\n');
    println!("aggregate over {} images: recall {:.4}", sums.n, agg.recall);
    write_atomic(out, report.as_bytes())?;
    println!("report written to {}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f32>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "absent".into())
}

/// Aggregate = mean of per-image values, skipping absent ones.
#[derive(Default)]
struct EvalAccumulator {
    n: usize,
    recall: f64,
    iou: (f64, usize),
    biou: (f64, usize),
    ap50: (f64, usize),
    ap75: (f64, usize),
    map: (f64, usize),
}

impl EvalAccumulator {
    fn add(&mut self, s: &EvalSummary) {
        self.n += 1;
        self.recall += s.recall as f64;
        if let Some(v) = s.mean_matched_iou {
            self.iou = (self.iou.0 + v as f64, self.iou.1 + 1);
        }
        if let Some(v) = s.mean_matched_boundary_iou {
            self.biou = (self.biou.0 + v as f64, self.biou.1 + 1);
        }
        if let Some(a) = s.ap {
            self.ap50 = (self.ap50.0 + a.ap50 as f64, self.ap50.1 + 1);
            self.ap75 = (self.ap75.0 + a.ap75 as f64, self.ap75.1 + 1);
            self.map = (self.map.0 + a.map as f64, self.map.1 + 1);
        }
    }

    fn aggregate(&self) -> EvalSummary {
        let mean = |(s, c): (f64, usize)| {
            if c == 0 {
                None
            } else {
                Some((s / c as f64) as f32)
            }
        };
        EvalSummary {
            recall: (self.recall / self.n.max(1) as f64) as f32,
            n_entities: 0,
            mean_matched_iou: mean(self.iou),
            mean_matched_boundary_iou: mean(self.biou),
            ap: match (mean(self.ap50), mean(self.ap75), mean(self.map)) {
                (Some(a), Some(b), Some(c)) => Some(metrics::ApReport {
                    ap50: a,
                    ap75: b,
                    map: c,
                }),
                _ => None,
            },
            inter_mean: None,
            intra_entity: None,
        }
    }
}

// -- ablate ------------------------------------------------------------------

pub struct AblateArgs<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a Path,
    pub epochs: usize,
    pub out: &'a Path,
}

/// Three trainings with shared seeds: contrastive-only, plus the
/// segmentation loss, plus both segment-space losses; held-out similarity
/// metrics per variant.
pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let scenes = load_scenes(args.data)?;
    if scenes.len() < 5 {
        bail!("ablation needs at least 5 scenes, found {}", scenes.len());
    }
    let split = (scenes.len() * 4) / 5;
    let (train_scenes, held_out) = scenes.split_at(split);

    let variants: [(&str, LossToggles); 3] = [
        (
            "contrastive",
            LossToggles {
                ls: false,
                lg: false,
                ..LossToggles::default()
            },
        ),
        (
            "+ls",
            LossToggles {
                lg: false,
                ..LossToggles::default()
            },
        ),
        ("+ls+lg", LossToggles::default()),
    ];

    let mut rows = Vec::new();
    for (name, toggles) in variants {
        let mut state = TrainState::new(Model::init(args.cfg.model_config()));
        let tcfg = TrainConfig {
            lr: args.cfg.lr,
            seed: args.cfg.train_seed,
            loss: args.cfg.loss_config(),
            toggles,
        };
        train::train(&mut state, train_scenes, &tcfg, args.epochs, |e, r| {
            println!("[{name}] epoch {e}: total {:.5}", r.total);
        })?;
        let (inter, intra) = held_out_similarities(&state.model, held_out)?;
        println!("[{name}] held-out inter-mean {inter:.4}, intra-entity {intra:.4}");
        rows.push((name, inter, intra));
    }

    let mut table = String::from("variant inter_mean intra_entity\n");
    for (name, inter, intra) in &rows {
        table.push_str(&format!("{name} {inter} {intra}\n"));
    }
    write_atomic(args.out, table.as_bytes())?;
    print!("{table}");
    println!("table written to {}", args.out.display());
    Ok(())
}

/// Mean inter-mean / intra-entity similarity of a model over scenes
/// (erosion-masked labels, skipping values that are absent).
pub fn held_out_similarities(model: &Model, scenes: &[Scene]) -> Result<(f32, f32)> {
    let mut inter = (0.0f64, 0usize);
    let mut intra = (0.0f64, 0usize);
    for scene in scenes {
        let (fmap, _) = network::infer_features(model, &scene.image)?;
        let labels = EntityLabels::from_raw(&scene.labels, scene.h, scene.w);
        let (i, a) = metrics::ablation_similarities(&fmap, &labels);
        if let Some(v) = i {
            inter = (inter.0 + v as f64, inter.1 + 1);
        }
        if let Some(v) = a {
            intra = (intra.0 + v as f64, intra.1 + 1);
        }
    }
    Ok((
        (inter.0 / inter.1.max(1) as f64) as f32,
        (intra.0 / intra.1.max(1) as f64) as f32,
    ))
}

/// Segment a full scene tensor directly (used by tests and the acceptance
/// suite; the CLI goes through files).
pub fn segment_scene(model: &Model, image: &Tensor, cfg: &RunConfig) -> Result<Segmentation> {
    Ok(cluster::multires_segment(model, image, &cfg.multires_params())?)
}
