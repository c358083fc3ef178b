//! Plain-text run configuration: `key=value` lines, `#` comments, every key
//! optional with a default, unknown keys rejected.

use crate::cluster::{MeanShiftParams, MultiresParams};
use crate::data::{SceneConfig, ShapeKind};
use crate::error::PersistError;
use crate::losses::LossConfig;
use crate::network::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub d: usize,
    pub widths: Vec<usize>,
    pub input_h: usize,
    pub input_w: usize,
    pub model_seed: u64,
    pub act_slope: f32,
    // training
    pub lr: f32,
    pub train_seed: u64,
    // losses
    pub lambda_rc: f32,
    pub lambda_g: f32,
    pub lambda_u: f32,
    pub tau: f32,
    pub rc_queries: usize,
    pub sigma_min: f32,
    pub grad_scales: usize,
    pub signed_segment_space: bool,
    pub mu_straight_through: bool,
    // data
    pub n_shapes_min: usize,
    pub n_shapes_max: usize,
    pub kinds: Vec<ShapeKind>,
    pub color_min_dist: f32,
    pub unlabeled_prob: f64,
    pub noise_sigma: f32,
    pub min_visible: usize,
    pub data_seed: u64,
    // clustering
    pub bandwidth: f32,
    pub seed_stride: usize,
    pub ms_max_iter: usize,
    pub ms_tol: f32,
    pub multires: Vec<f32>,
    pub theta_refine: f32,
    pub theta_contain: f32,
    pub min_pixels: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 16,
            widths: vec![16, 32, 64],
            input_h: 64,
            input_w: 64,
            model_seed: 7,
            act_slope: 0.01,
            lr: 1e-4,
            train_seed: 1,
            lambda_rc: 0.125,
            lambda_g: 0.025,
            lambda_u: 0.05,
            tau: 0.5,
            rc_queries: 256,
            // From-scratch features start nearly collinear (rank limited by
            // the three color channels), so the projection stays close to
            // singular for many early epochs. Gating the segment-space
            // losses until the mean matrix is decently conditioned keeps
            // their amplification bounded (~1/sigma_min).
            sigma_min: 0.25,
            grad_scales: 4,
            signed_segment_space: false,
            mu_straight_through: false,
            n_shapes_min: 2,
            n_shapes_max: 6,
            kinds: vec![ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Triangle],
            color_min_dist: 0.15,
            unlabeled_prob: 0.1,
            noise_sigma: 0.02,
            min_visible: 25,
            data_seed: 1,
            bandwidth: std::f32::consts::FRAC_1_SQRT_2,
            seed_stride: 4,
            ms_max_iter: 100,
            ms_tol: 1e-6,
            multires: vec![1.0, 2.0],
            theta_refine: 0.7,
            theta_contain: 0.8,
            min_pixels: 16,
        }
    }
}

fn bad(key: &str, value: &str) -> PersistError {
    PersistError::Malformed {
        what: "run config",
        msg: format!("bad value '{value}' for key '{key}'"),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, PersistError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(key, value)))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, PersistError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| PersistError::Malformed {
                what: "run config",
                msg: format!("line {}: expected key=value, got '{line}'", lineno + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(PersistError::Malformed {
                    what: "run config",
                    msg: format!("duplicate key '{key}'"),
                });
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, PersistError> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), PersistError> {
        macro_rules! num {
            ($field:ident) => {{
                self.$field = value.parse().map_err(|_| bad(key, value))?;
            }};
        }
        match key {
            "d" => num!(d),
            "widths" => self.widths = parse_list(key, value)?,
            "input_h" => num!(input_h),
            "input_w" => num!(input_w),
            "model_seed" => num!(model_seed),
            "act_slope" => num!(act_slope),
            "lr" => num!(lr),
            "train_seed" => num!(train_seed),
            "lambda_rc" => num!(lambda_rc),
            "lambda_g" => num!(lambda_g),
            "lambda_u" => num!(lambda_u),
            "tau" => num!(tau),
            "rc_queries" => num!(rc_queries),
            "sigma_min" => num!(sigma_min),
            "grad_scales" => num!(grad_scales),
            "signed_segment_space" => num!(signed_segment_space),
            "mu_straight_through" => num!(mu_straight_through),
            "n_shapes_min" => num!(n_shapes_min),
            "n_shapes_max" => num!(n_shapes_max),
            "kinds" => {
                self.kinds = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| match s {
                        "circle" => Ok(ShapeKind::Circle),
                        "rectangle" => Ok(ShapeKind::Rectangle),
                        "triangle" => Ok(ShapeKind::Triangle),
                        _ => Err(bad(key, value)),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "color_min_dist" => num!(color_min_dist),
            "unlabeled_prob" => num!(unlabeled_prob),
            "noise_sigma" => num!(noise_sigma),
            "min_visible" => num!(min_visible),
            "data_seed" => num!(data_seed),
            "bandwidth" => num!(bandwidth),
            "seed_stride" => num!(seed_stride),
            "ms_max_iter" => num!(ms_max_iter),
            "ms_tol" => num!(ms_tol),
            "multires" => self.multires = parse_list(key, value)?,
            "theta_refine" => num!(theta_refine),
            "theta_contain" => num!(theta_contain),
            "min_pixels" => num!(min_pixels),
            _ => {
                return Err(PersistError::Malformed {
                    what: "run config",
                    msg: format!("unknown key '{key}'"),
                })
            }
        }
        Ok(())
    }

    /// Full resolved configuration, parseable back with `parse`.
    pub fn render(&self) -> String {
        let widths = self
            .widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let kinds = self
            .kinds
            .iter()
            .map(|k| k.name())
            .collect::<Vec<_>>()
            .join(",");
        let multires = self
            .multires
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "# model\n\
             d={}\nwidths={}\ninput_h={}\ninput_w={}\nmodel_seed={}\nact_slope={}\n\
             # training\n\
             lr={}\ntrain_seed={}\n\
             # losses\n\
             lambda_rc={}\nlambda_g={}\nlambda_u={}\ntau={}\nrc_queries={}\nsigma_min={}\n\
             grad_scales={}\nsigned_segment_space={}\nmu_straight_through={}\n\
             # data\n\
             n_shapes_min={}\nn_shapes_max={}\nkinds={}\ncolor_min_dist={}\nunlabeled_prob={}\n\
             noise_sigma={}\nmin_visible={}\ndata_seed={}\n\
             # clustering\n\
             bandwidth={}\nseed_stride={}\nms_max_iter={}\nms_tol={}\nmultires={}\n\
             theta_refine={}\ntheta_contain={}\nmin_pixels={}\n",
            self.d,
            widths,
            self.input_h,
            self.input_w,
            self.model_seed,
            self.act_slope,
            self.lr,
            self.train_seed,
            self.lambda_rc,
            self.lambda_g,
            self.lambda_u,
            self.tau,
            self.rc_queries,
            self.sigma_min,
            self.grad_scales,
            self.signed_segment_space,
            self.mu_straight_through,
            self.n_shapes_min,
            self.n_shapes_max,
            kinds,
            self.color_min_dist,
            self.unlabeled_prob,
            self.noise_sigma,
            self.min_visible,
            self.data_seed,
            self.bandwidth,
            self.seed_stride,
            self.ms_max_iter,
            self.ms_tol,
            multires,
            self.theta_refine,
            self.theta_contain,
            self.min_pixels,
        )
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            widths: self.widths.clone(),
            input_hw: (self.input_h, self.input_w),
            seed: self.model_seed,
            act_slope: self.act_slope,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            size: (self.input_h, self.input_w),
            n_shapes: (self.n_shapes_min, self.n_shapes_max),
            kinds: self.kinds.clone(),
            min_color_dist: self.color_min_dist,
            unlabeled_prob: self.unlabeled_prob,
            noise_sigma: self.noise_sigma,
            min_visible: self.min_visible,
            seed: self.data_seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_rc: self.lambda_rc,
            lambda_g: self.lambda_g,
            lambda_u: self.lambda_u,
            tau: self.tau,
            rc_queries: self.rc_queries,
            sigma_min: self.sigma_min,
            grad_scales: self.grad_scales,
            signed_segment_space: self.signed_segment_space,
            mu_straight_through: self.mu_straight_through,
        }
    }

    pub fn mean_shift_params(&self) -> MeanShiftParams {
        MeanShiftParams {
            bandwidth: self.bandwidth,
            seed_stride: self.seed_stride,
            max_iter: self.ms_max_iter,
            tol: self.ms_tol,
        }
    }

    pub fn multires_params(&self) -> MultiresParams {
        MultiresParams {
            resolutions: self.multires.clone(),
            theta_refine: self.theta_refine,
            theta_contain: self.theta_contain,
            min_pixels: self.min_pixels,
            ms: self.mean_shift_params(),
        }
    }
}
