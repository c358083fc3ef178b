//! pseg: class-agnostic segmentation by clustering per-pixel line features.
//!
//! Exit codes: 0 success, 1 check or assertion failure, 2 usage error
//! (from the argument parser), 3 i/o error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use pseg_cli::{gradcheck, ops};

#[derive(Parser)]
#[command(name = "pseg", version, about = "Bottom-up class-agnostic segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate procedural shape scenes with entity ground truth.
    Gen {
        /// Run configuration file (key=value lines); defaults apply per key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of scenes to generate.
        #[arg(long)]
        count: usize,
        /// Output directory for image/label pairs and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the feature network on a generated scene directory.
    Train {
        /// Run configuration file (key=value lines); defaults apply per key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of scene_*.ppm / scene_*_labels.pgm pairs.
        #[arg(long)]
        data: PathBuf,
        /// Epochs to run (added to any resumed state).
        #[arg(long)]
        epochs: usize,
        /// Checkpoint output path; the loss log goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Disable loss components by name, e.g. "ls,lg".
        #[arg(long)]
        ablate_losses: Option<String>,
    },
    /// Segment one image with a trained checkpoint.
    Infer {
        /// Run configuration file (clustering knobs are read from it).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (binary pixmap, P6).
        #[arg(long)]
        image: PathBuf,
        /// Output label map (16-bit graymap); the mode table lands next
        /// to it.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated scale factors, e.g. "1.0,2.0".
        #[arg(long)]
        multires: Option<String>,
        /// Mean-shift bandwidth override (cosine threshold).
        #[arg(long)]
        bandwidth: Option<f32>,
        /// Optional color-coded visualization (pixmap).
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Compare predicted label maps against ground truth by index.
    Eval {
        /// Directory of predicted label maps (*.pgm).
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth label maps (*.pgm).
        #[arg(long)]
        gt: PathBuf,
        /// Report output path (key=value lines, one per image).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train three loss variants with shared seeds and report held-out
    /// feature-space similarities.
    Ablate {
        /// Run configuration file (key=value lines); defaults apply per key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of scenes; the last fifth is held out.
        #[arg(long)]
        data: PathBuf,
        /// Epochs per variant.
        #[arg(long)]
        epochs: usize,
        /// Table output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every tensor op and loss against finite differences.
    Gradcheck {
        /// Base seed for the random probes.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Gen { config, count, out } => {
            let cfg = ops::load_config(config.as_deref())?;
            ops::print_config(&cfg);
            ops::cmd_gen(&cfg, count, &out)?;
        }
        Cmd::Train {
            config,
            data,
            epochs,
            out,
            resume,
            ablate_losses,
        } => {
            let cfg = ops::load_config(config.as_deref())?;
            ops::print_config(&cfg);
            ops::cmd_train(&ops::TrainArgs {
                cfg: &cfg,
                data: &data,
                epochs,
                out: &out,
                resume: resume.as_deref(),
                ablate_losses: ablate_losses.as_deref(),
            })?;
        }
        Cmd::Infer {
            config,
            ckpt,
            image,
            out,
            multires,
            bandwidth,
            viz,
        } => {
            let cfg = ops::load_config(config.as_deref())?;
            ops::print_config(&cfg);
            ops::cmd_infer(&ops::InferArgs {
                cfg: &cfg,
                ckpt: &ckpt,
                image: &image,
                out: &out,
                multires: multires.as_deref(),
                bandwidth,
                viz: viz.as_deref(),
            })?;
        }
        Cmd::Eval { pred, gt, out } => {
            println!("# resolved configuration");
            println!("pred={}", pred.display());
            println!("gt={}", gt.display());
            println!("out={}", out.display());
            println!("recall_iou_threshold=0.5");
            println!("boundary_band_frac=0.02");
            println!("# end configuration");
            ops::cmd_eval(&pred, &gt, &out)?;
        }
        Cmd::Ablate {
            config,
            data,
            epochs,
            out,
        } => {
            let cfg = ops::load_config(config.as_deref())?;
            ops::print_config(&cfg);
            ops::cmd_ablate(&ops::AblateArgs {
                cfg: &cfg,
                data: &data,
                epochs,
                out: &out,
            })?;
        }
        Cmd::Gradcheck { seed } => {
            println!("# resolved configuration");
            println!("seed={seed}");
            println!(
                "op_tolerance={} loss_tolerance={} eps={} seeds_per_check={}",
                gradcheck::OP_TOLERANCE,
                gradcheck::LOSS_TOLERANCE,
                gradcheck::EPS,
                gradcheck::SEEDS_PER_CHECK
            );
            println!("# end configuration");
            let report = gradcheck::run(seed);
            for row in &report.rows {
                println!(
                    "{:20} {:10.3e}  {}{}",
                    row.name,
                    row.worst_rel,
                    if row.pass { "ok" } else { "FAIL" },
                    if row.note.is_empty() {
                        String::new()
                    } else {
                        format!("  ({})", row.note)
                    }
                );
            }
            if !report.all_pass {
                println!("gradcheck: FAILED");
                return Ok(ExitCode::from(1));
            }
            println!("gradcheck: all checks passed");
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// 3 for i/o failures, 1 for everything else.
fn classify(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ExitCode::from(3);
        }
        if let Some(p) = cause.downcast_ref::<pseg_core::PersistError>() {
            if matches!(p, pseg_core::PersistError::Io(_)) {
                return ExitCode::from(3);
            }
        }
    }
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify(&err)
        }
    }
}
