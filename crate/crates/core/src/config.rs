//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, DataConfig};
use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::ModelDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sefoss,
    /// Labeled loss and weight decay only; the unlabeled pool is never sampled.
    Supervised,
    /// Confidence-thresholded pseudo-labeling without the energy terms or
    /// the self-supervised term.
    FixmatchBaseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Sefoss, Mode::Supervised, Mode::FixmatchBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sefoss => "sefoss",
            Mode::Supervised => "supervised",
            Mode::FixmatchBaseline => "fixmatch_baseline",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Total optimizer steps.
    pub k_total: usize,
    /// Pretraining steps.
    pub k_pre: usize,
    pub eta0: f64,
    pub gamma: f64,
    pub batch: usize,
    pub mu: usize,
    pub weights: LossWeights,
    pub momentum: f64,
    pub ema_momentum: f64,
    pub energy: EnergyConfig,
    pub use_lp: bool,
    pub use_le: bool,
    pub fixmatch_conf_threshold: f64,
    /// Replaces the calibrated pseudo-inlier threshold when set.
    pub tau_id_override: Option<f64>,
    pub eval_every: usize,
    pub hidden_sizes: Vec<usize>,
    pub feature_dim: usize,
    pub data: DataConfig,
    pub augment: AugmentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sefoss,
            seed: 0,
            k_total: 6000,
            k_pre: 750,
            eta0: 0.03,
            gamma: 7.0 / 8.0,
            batch: 64,
            mu: 7,
            weights: LossWeights {
                w_p: 1.0,
                w_s: 5.0,
                w_e: 1e-4,
                w_w: 5e-4,
            },
            momentum: 0.9,
            ema_momentum: 0.999,
            energy: EnergyConfig::default(),
            use_lp: true,
            use_le: true,
            fixmatch_conf_threshold: 0.95,
            tau_id_override: None,
            eval_every: 250,
            hidden_sizes: vec![64, 64],
            feature_dim: 32,
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "sefoss, supervised or fixmatch_baseline"),
    ("seed", "master seed for data, initialization and batches"),
    ("K", "total training steps"),
    ("K_p", "pretraining steps (pseudo-labeling and energy terms off)"),
    ("eta0", "initial learning rate"),
    ("gamma", "cosine decay rate of the main phase, in (0, 1]"),
    ("B", "labeled batch size"),
    ("mu", "unlabeled-to-labeled batch ratio"),
    ("w_p", "pseudo-label loss weight in the main phase"),
    ("w_s", "self-supervised cosine loss weight"),
    ("w_e", "energy hinge loss weight in the main phase"),
    ("w_w", "weight decay coefficient (biases excluded)"),
    ("momentum", "Nesterov momentum"),
    ("ema_momentum", "momentum of the parameter moving average"),
    ("beta", "inverse temperature of the free energy"),
    ("scale_id", "IQR multiple below the median for the pseudo-inlier threshold"),
    ("scale_ood_threshold", "IQR multiple above the median for the pseudo-outlier threshold"),
    ("scale_ood_margin", "IQR multiple above the median for the energy hinge margin"),
    ("use_lp", "enable the pseudo-label loss in the main phase"),
    ("use_le", "enable the energy hinge loss in the main phase"),
    ("fixmatch_conf_threshold", "softmax confidence needed for a pseudo-label in fixmatch_baseline mode"),
    ("tau_id_override", "fixed pseudo-inlier threshold replacing the calibrated one (`none` to calibrate)"),
    ("eval_every", "steps between evaluations"),
    ("input_dim", "input dimension D"),
    ("num_classes", "number of ID classes C"),
    ("hidden_sizes", "comma-separated backbone hidden widths (empty for a single layer)"),
    ("feature_dim", "backbone output dimension d"),
    ("n_labeled", "labeled examples (multiple of num_classes)"),
    ("n_unlabeled", "unlabeled pool size at ood_fraction 0.5"),
    ("ood_fraction", "fraction of OOD samples in the unlabeled pool"),
    ("ood_kind", "extra_clusters or uniform_noise"),
    ("n_ood_clusters", "number of OOD clusters"),
    ("cluster_spread", "radius of the class-mean circle in units of cluster_std"),
    ("cluster_std", "per-coordinate standard deviation of every cluster"),
    ("n_test_id", "ID test examples"),
    ("n_test_ood", "OOD test examples"),
    ("weak_noise_sigma", "noise std of the weak augmentation"),
    ("strong_noise_sigma", "noise std of the strong augmentation"),
    ("strong_mask_prob", "per-coordinate zeroing probability of the strong augmentation"),
    ("strong_scale_lo", "lower bound of the strong augmentation rescale"),
    ("strong_scale_hi", "upper bound of the strong augmentation rescale"),
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for key `{key}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "K" => self.k_total = num(key, v)?,
            "K_p" => self.k_pre = num(key, v)?,
            "eta0" => self.eta0 = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "B" => self.batch = num(key, v)?,
            "mu" => self.mu = num(key, v)?,
            "w_p" => self.weights.w_p = num(key, v)?,
            "w_s" => self.weights.w_s = num(key, v)?,
            "w_e" => self.weights.w_e = num(key, v)?,
            "w_w" => self.weights.w_w = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "ema_momentum" => self.ema_momentum = num(key, v)?,
            "beta" => self.energy.beta = num(key, v)?,
            "scale_id" => self.energy.scale_id = num(key, v)?,
            "scale_ood_threshold" => self.energy.scale_ood_threshold = num(key, v)?,
            "scale_ood_margin" => self.energy.scale_ood_margin = num(key, v)?,
            "use_lp" => self.use_lp = boolean(key, v)?,
            "use_le" => self.use_le = boolean(key, v)?,
            "fixmatch_conf_threshold" => self.fixmatch_conf_threshold = num(key, v)?,
            "tau_id_override" => {
                self.tau_id_override = match v {
                    "" | "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "eval_every" => self.eval_every = num(key, v)?,
            "input_dim" => self.data.input_dim = num(key, v)?,
            "num_classes" => self.data.num_classes = num(key, v)?,
            "hidden_sizes" => {
                self.hidden_sizes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "feature_dim" => self.feature_dim = num(key, v)?,
            "n_labeled" => self.data.n_labeled = num(key, v)?,
            "n_unlabeled" => self.data.n_unlabeled = num(key, v)?,
            "ood_fraction" => self.data.ood_fraction = num(key, v)?,
            "ood_kind" => self.data.ood_kind = v.parse()?,
            "n_ood_clusters" => self.data.n_ood_clusters = num(key, v)?,
            "cluster_spread" => self.data.cluster_spread = num(key, v)?,
            "cluster_std" => self.data.cluster_std = num(key, v)?,
            "n_test_id" => self.data.n_test_id = num(key, v)?,
            "n_test_ood" => self.data.n_test_ood = num(key, v)?,
            "weak_noise_sigma" => self.augment.weak_noise_sigma = num(key, v)?,
            "strong_noise_sigma" => self.augment.strong_noise_sigma = num(key, v)?,
            "strong_mask_prob" => self.augment.strong_mask_prob = num(key, v)?,
            "strong_scale_lo" => self.augment.strong_scale_lo = num(key, v)?,
            "strong_scale_hi" => self.augment.strong_scale_hi = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Text form of the value stored under `key`, or `None` for unknown keys.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.to_string(),
            "seed" => self.seed.to_string(),
            "K" => self.k_total.to_string(),
            "K_p" => self.k_pre.to_string(),
            "eta0" => self.eta0.to_string(),
            "gamma" => self.gamma.to_string(),
            "B" => self.batch.to_string(),
            "mu" => self.mu.to_string(),
            "w_p" => self.weights.w_p.to_string(),
            "w_s" => self.weights.w_s.to_string(),
            "w_e" => self.weights.w_e.to_string(),
            "w_w" => self.weights.w_w.to_string(),
            "momentum" => self.momentum.to_string(),
            "ema_momentum" => self.ema_momentum.to_string(),
            "beta" => self.energy.beta.to_string(),
            "scale_id" => self.energy.scale_id.to_string(),
            "scale_ood_threshold" => self.energy.scale_ood_threshold.to_string(),
            "scale_ood_margin" => self.energy.scale_ood_margin.to_string(),
            "use_lp" => self.use_lp.to_string(),
            "use_le" => self.use_le.to_string(),
            "fixmatch_conf_threshold" => self.fixmatch_conf_threshold.to_string(),
            "tau_id_override" => self
                .tau_id_override
                .map_or("none".to_string(), |t| t.to_string()),
            "eval_every" => self.eval_every.to_string(),
            "input_dim" => self.data.input_dim.to_string(),
            "num_classes" => self.data.num_classes.to_string(),
            "hidden_sizes" => self
                .hidden_sizes
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "feature_dim" => self.feature_dim.to_string(),
            "n_labeled" => self.data.n_labeled.to_string(),
            "n_unlabeled" => self.data.n_unlabeled.to_string(),
            "ood_fraction" => self.data.ood_fraction.to_string(),
            "ood_kind" => self.data.ood_kind.to_string(),
            "n_ood_clusters" => self.data.n_ood_clusters.to_string(),
            "cluster_spread" => self.data.cluster_spread.to_string(),
            "cluster_std" => self.data.cluster_std.to_string(),
            "n_test_id" => self.data.n_test_id.to_string(),
            "n_test_ood" => self.data.n_test_ood.to_string(),
            "weak_noise_sigma" => self.augment.weak_noise_sigma.to_string(),
            "strong_noise_sigma" => self.augment.strong_noise_sigma.to_string(),
            "strong_mask_prob" => self.augment.strong_mask_prob.to_string(),
            "strong_scale_lo" => self.augment.strong_scale_lo.to_string(),
            "strong_scale_hi" => self.augment.strong_scale_hi.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = parse_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|(k, _)| (*k, self.get(k).expect("every listed key is readable")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.data.input_dim,
            hidden_sizes: self.hidden_sizes.clone(),
            feature_dim: self.feature_dim,
            num_classes: self.data.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k_total == 0 {
            return bad("K must be >= 1".into());
        }
        if self.k_pre > self.k_total {
            return bad(format!("K_p ({}) must not exceed K ({})", self.k_pre, self.k_total));
        }
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return bad(format!("eta0 must be > 0, got {}", self.eta0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.batch == 0 {
            return bad("B must be >= 1".into());
        }
        let w = &self.weights;
        for (name, v) in [("w_p", w.w_p), ("w_s", w.w_s), ("w_e", w.w_e), ("w_w", w.w_w)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must lie in [0, 1], got {}", self.ema_momentum));
        }
        if !(self.fixmatch_conf_threshold > 0.0 && self.fixmatch_conf_threshold <= 1.0) {
            return bad(format!(
                "fixmatch_conf_threshold must lie in (0, 1], got {}",
                self.fixmatch_conf_threshold
            ));
        }
        if let Some(t) = self.tau_id_override {
            if !t.is_finite() {
                return bad(format!("tau_id_override must be finite, got {t}"));
            }
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        self.energy.validate()?;
        self.data.validate()?;
        self.augment.validate()?;
        self.model_dims().validate()?;
        Ok(())
    }

    /// Markdown table of every key with its default and meaning.
    pub fn reference_markdown() -> String {
        let defaults = Self::default();
        let mut out = String::from(
            "# Configuration keys\n\n\
             Config files are flat `key = value` lines; `#` starts a comment and unknown \
             keys are rejected. `--set key=value` overrides apply after the file. \
             The CLI file format additionally accepts `out` (output directory).\n\n\
             | key | default | meaning |\n|---|---|---|\n",
        );
        for (k, doc) in KEYS {
            let v = defaults.get(k).expect("every listed key is readable");
            let v = if v.is_empty() { "(empty)".to_string() } else { format!("`{v}`") };
            let _ = writeln!(out, "| `{k}` | {v} | {doc} |");
        }
        out
    }
}

fn parse_assignment(line: &str) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
    Ok((k.trim(), v.trim()))
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Splits `key=value` for command-line overrides.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = parse_assignment(s)?;
    Ok((k.to_string(), v.to_string()))
}
