//! Flat `section.key = value` experiment configuration.
//!
//! Sources are layered: defaults, then a config file, then command-line
//! overrides. `gen.preset` is applied before any other `gen.*` key so that
//! individual generator fields can refine a preset.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::datagen::{GenConfig, Preset};
use crate::kernels::KernelKind;
use crate::trainer::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("gen.preset", "clean | easy | medium | hard | camouflage"),
    ("gen.seed", "scene generator seed"),
    ("gen.width", "image width in pixels"),
    ("gen.height", "image height in pixels"),
    ("gen.views", "number of views"),
    ("gen.occupancy", "target distractor pixel fraction"),
    (
        "gen.persistence",
        "consecutive views sharing a distractor layout",
    ),
    ("gen.jitter", "per-view gain amplitude"),
    (
        "gen.camouflage",
        "blend distractor colors from the background",
    ),
    ("gen.feature_dim", "feature channels"),
    ("gen.feature_noise", "feature noise standard deviation"),
    (
        "gen.semantic_fidelity",
        "probability the semantic channel is correct",
    ),
    ("gen.blobs", "blobs in the base image"),
    (
        "gen.spread",
        "distractor spread around a hotspot (0 = uniform)",
    ),
    (
        "mask.mode",
        "none | trim | robust_filter | sls_agg | sls_mlp",
    ),
    ("mask.tau", "fraction of residuals treated as outliers"),
    (
        "mask.box_threshold",
        "3x3 inlier density that re-admits a pixel",
    ),
    ("mask.patch_size", "patch side in pixels"),
    ("mask.neighborhood", "patch neighbourhood side in pixels"),
    (
        "mask.patch_threshold",
        "neighbourhood inlier density that re-admits a patch",
    ),
    ("mask.beta1", "warm-up decay rate"),
    ("mask.beta2", "warm-up step length"),
    ("mask.smooth", "enable the 3x3 smoothing stage"),
    ("mask.patch", "enable the patch stage"),
    ("mask.patch_override", "patch vote replaces the pixel mask"),
    ("hist.bucket_width", "residual histogram bucket width"),
    ("hist.max_residual", "largest residual with its own bucket"),
    ("hist.discount", "per-update decay of old counts"),
    ("kernel.kind", "l1 | l2 | charbonnier | geman_mcclure"),
    (
        "kernel.scale",
        "kernel scale for charbonnier and geman_mcclure",
    ),
    ("trainer.steps", "optimizer steps"),
    ("trainer.splats", "initial splat count"),
    ("trainer.eval_every", "steps between evaluations"),
    ("trainer.seed", "training seed"),
    (
        "trainer.mask_before_hist",
        "mask from the histogram before this step's update",
    ),
    ("sls.clusters", "clusters per view for sls_agg"),
    ("sls.lambda", "classifier Lipschitz penalty weight"),
    ("sls.pe_degree", "positional encoding frequencies"),
    ("sls.hidden", "classifier hidden widths, comma separated"),
    ("sls.lr", "classifier learning rate"),
    ("sls.batch", "pixels per classifier update (0 = all)"),
    ("ubp.enabled", "enable utilization-based pruning"),
    ("ubp.start", "first step of the pruning window"),
    ("ubp.stop", "end of the pruning window (exclusive)"),
    ("ubp.period", "steps per utilization window"),
    ("ubp.kappa", "utilization threshold"),
    ("glo.enabled", "per-view appearance latents"),
    ("glo.dim", "appearance latent size"),
    ("lr.means", "mean learning rate"),
    ("lr.scales", "log-scale learning rate"),
    ("lr.rotation", "rotation learning rate"),
    ("lr.opacity", "opacity learning rate"),
    ("lr.color", "color learning rate"),
    ("lr.glo", "latent and mapper learning rate"),
    ("lr.decay", "rate multiplier reached at the last step"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub gen_seed: u64,
    pub gen: GenConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Medium,
            gen_seed: 0,
            gen: GenConfig::preset(Preset::Medium),
            train: TrainConfig::default(),
        }
    }
}

/// Splits config text into `(key, value)` pairs, ignoring blank lines and
/// `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

impl ExperimentConfig {
    /// Defaults overridden by `pairs` in order; a `gen.preset` anywhere in
    /// the list is applied first.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some((k, v)) = pairs.iter().rev().find(|(k, _)| k == "gen.preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "gen.preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gen.validate().map_err(ConfigError::Invalid)?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (g, t) = (&mut self.gen, &mut self.train);
        match key {
            "gen.preset" => {
                self.preset = parse(key, value)?;
                *g = GenConfig::preset(self.preset);
            }
            "gen.seed" => self.gen_seed = parse(key, value)?,
            "gen.width" => g.width = parse(key, value)?,
            "gen.height" => g.height = parse(key, value)?,
            "gen.views" => g.views = parse(key, value)?,
            "gen.occupancy" => g.occupancy = parse(key, value)?,
            "gen.persistence" => g.persistence = parse(key, value)?,
            "gen.jitter" => g.jitter = parse(key, value)?,
            "gen.camouflage" => g.camouflage = parse_bool(key, value)?,
            "gen.feature_dim" => g.feature_dim = parse(key, value)?,
            "gen.feature_noise" => g.feature_noise_sigma = parse(key, value)?,
            "gen.semantic_fidelity" => g.semantic_fidelity = parse(key, value)?,
            "gen.blobs" => g.blobs = parse(key, value)?,
            "gen.spread" => g.spread = parse(key, value)?,
            "mask.mode" => t.mode = parse(key, value)?,
            "mask.tau" => t.mask.tau = parse(key, value)?,
            "mask.box_threshold" => t.mask.box_threshold = parse(key, value)?,
            "mask.patch_size" => t.mask.patch_size = parse(key, value)?,
            "mask.neighborhood" => t.mask.neighborhood = parse(key, value)?,
            "mask.patch_threshold" => t.mask.patch_threshold = parse(key, value)?,
            "mask.beta1" => t.mask.beta1 = parse(key, value)?,
            "mask.beta2" => t.mask.beta2 = parse(key, value)?,
            "mask.smooth" => t.mask.smooth = parse_bool(key, value)?,
            "mask.patch" => t.mask.patch = parse_bool(key, value)?,
            "mask.patch_override" => t.mask.patch_override = parse_bool(key, value)?,
            "hist.bucket_width" => t.hist.bucket_width = parse(key, value)?,
            "hist.max_residual" => t.hist.max_residual = parse(key, value)?,
            "hist.discount" => t.hist.discount = parse(key, value)?,
            "kernel.kind" => t.kernel.kind = parse::<KernelKind>(key, value)?,
            "kernel.scale" => t.kernel.scale = parse(key, value)?,
            "trainer.steps" => t.steps = parse(key, value)?,
            "trainer.splats" => t.splats = parse(key, value)?,
            "trainer.eval_every" => t.eval_every = parse(key, value)?,
            "trainer.seed" => t.seed = parse(key, value)?,
            "trainer.mask_before_hist" => t.mask_before_hist = parse_bool(key, value)?,
            "sls.clusters" => t.sls.clusters = parse(key, value)?,
            "sls.lambda" => t.sls.lambda = parse(key, value)?,
            "sls.pe_degree" => t.sls.pe_degree = parse(key, value)?,
            "sls.hidden" => t.sls.hidden = parse_list(key, value)?,
            "sls.lr" => t.sls.lr = parse(key, value)?,
            "sls.batch" => t.sls.batch = parse(key, value)?,
            "ubp.enabled" => t.ubp.enabled = parse_bool(key, value)?,
            "ubp.start" => t.ubp.start = parse(key, value)?,
            "ubp.stop" => t.ubp.stop = parse(key, value)?,
            "ubp.period" => t.ubp.period = parse(key, value)?,
            "ubp.kappa" => t.ubp.kappa = parse(key, value)?,
            "glo.enabled" => t.glo_enabled = parse_bool(key, value)?,
            "glo.dim" => t.glo_dim = parse(key, value)?,
            "lr.means" => t.lr.means = parse(key, value)?,
            "lr.scales" => t.lr.scales = parse(key, value)?,
            "lr.rotation" => t.lr.rotation = parse(key, value)?,
            "lr.opacity" => t.lr.opacity = parse(key, value)?,
            "lr.color" => t.lr.color = parse(key, value)?,
            "lr.glo" => t.lr.glo = parse(key, value)?,
            "lr.decay" => t.lr.decay = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (g, t) = (&self.gen, &self.train);
        Some(match key {
            "gen.preset" => self.preset.to_string(),
            "gen.seed" => self.gen_seed.to_string(),
            "gen.width" => g.width.to_string(),
            "gen.height" => g.height.to_string(),
            "gen.views" => g.views.to_string(),
            "gen.occupancy" => g.occupancy.to_string(),
            "gen.persistence" => g.persistence.to_string(),
            "gen.jitter" => g.jitter.to_string(),
            "gen.camouflage" => g.camouflage.to_string(),
            "gen.feature_dim" => g.feature_dim.to_string(),
            "gen.feature_noise" => g.feature_noise_sigma.to_string(),
            "gen.semantic_fidelity" => g.semantic_fidelity.to_string(),
            "gen.blobs" => g.blobs.to_string(),
            "gen.spread" => g.spread.to_string(),
            "mask.mode" => t.mode.to_string(),
            "mask.tau" => t.mask.tau.to_string(),
            "mask.box_threshold" => t.mask.box_threshold.to_string(),
            "mask.patch_size" => t.mask.patch_size.to_string(),
            "mask.neighborhood" => t.mask.neighborhood.to_string(),
            "mask.patch_threshold" => t.mask.patch_threshold.to_string(),
            "mask.beta1" => t.mask.beta1.to_string(),
            "mask.beta2" => t.mask.beta2.to_string(),
            "mask.smooth" => t.mask.smooth.to_string(),
            "mask.patch" => t.mask.patch.to_string(),
            "mask.patch_override" => t.mask.patch_override.to_string(),
            "hist.bucket_width" => t.hist.bucket_width.to_string(),
            "hist.max_residual" => t.hist.max_residual.to_string(),
            "hist.discount" => t.hist.discount.to_string(),
            "kernel.kind" => t.kernel.kind.to_string(),
            "kernel.scale" => t.kernel.scale.to_string(),
            "trainer.steps" => t.steps.to_string(),
            "trainer.splats" => t.splats.to_string(),
            "trainer.eval_every" => t.eval_every.to_string(),
            "trainer.seed" => t.seed.to_string(),
            "trainer.mask_before_hist" => t.mask_before_hist.to_string(),
            "sls.clusters" => t.sls.clusters.to_string(),
            "sls.lambda" => t.sls.lambda.to_string(),
            "sls.pe_degree" => t.sls.pe_degree.to_string(),
            "sls.hidden" => t
                .sls
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "sls.lr" => t.sls.lr.to_string(),
            "sls.batch" => t.sls.batch.to_string(),
            "ubp.enabled" => t.ubp.enabled.to_string(),
            "ubp.start" => t.ubp.start.to_string(),
            "ubp.stop" => t.ubp.stop.to_string(),
            "ubp.period" => t.ubp.period.to_string(),
            "ubp.kappa" => t.ubp.kappa.to_string(),
            "glo.enabled" => t.glo_enabled.to_string(),
            "glo.dim" => t.glo_dim.to_string(),
            "lr.means" => t.lr.means.to_string(),
            "lr.scales" => t.lr.scales.to_string(),
            "lr.rotation" => t.lr.rotation.to_string(),
            "lr.opacity" => t.lr.opacity.to_string(),
            "lr.color" => t.lr.color.to_string(),
            "lr.glo" => t.lr.glo.to_string(),
            "lr.decay" => t.lr.decay.to_string(),
            _ => return None,
        })
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&self.get(k).expect("documented key"));
            out.push('\n');
        }
        out
    }

    /// Only the `gen.*` keys, as stored next to a generated dataset.
    pub fn gen_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| l.starts_with("gen."))
            .map(|l| format!("{l}\n"))
            .collect()
    }
}
