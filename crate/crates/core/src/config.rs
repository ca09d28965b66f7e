//! Run configuration: TOML sections, presets, environment overrides and
//! validation. Every check runs before any side effect.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::Layout;
use crate::error::{Error, Result};
use crate::featmix::{MixKind, SourcePolicy};
use crate::losses::LossConfig;

/// Effective stride of every backbone.
pub const BACKBONE_STRIDE: usize = 16;

/// Prefix of environment variables that override config keys,
/// e.g. `PMM_MIX_K=6` sets `mix.k`.
pub const ENV_PREFIX: &str = "PMM_";

const SECTIONS: [&str; 8] = [
    "dataset",
    "synthetic",
    "sampler",
    "model",
    "mix",
    "loss",
    "optim",
    "eval",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub layout: Layout,
    pub root: PathBuf,
    /// Input (height, width) in pixels.
    #[serde(default = "default_resolution")]
    pub resolution: [usize; 2],
    #[serde(default = "yes")]
    pub flip: bool,
    /// Zero padding before the random crop, in pixels.
    #[serde(default = "default_pad")]
    pub pad: usize,
}

fn default_resolution() -> [usize; 2] {
    [384, 128]
}
fn default_pad() -> usize {
    10
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub num_cams: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_ids: 20,
            imgs_per_id: 8,
            num_cams: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub p: usize,
    pub q: usize,
    pub batch_size: usize,
    /// Defaults to ceil(train images / batch size).
    pub iters_per_epoch: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            p: 16,
            q: 4,
            batch_size: 64,
            iters_per_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Toy,
    Resnet50,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub embed_dim: usize,
    pub stages: usize,
    pub normalize_embeddings: bool,
    /// Optional safetensors file with torchvision-named ResNet-50 weights.
    pub pretrained: Option<PathBuf>,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Toy,
            embed_dim: 512,
            stages: 3,
            normalize_embeddings: false,
            pretrained: None,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub kind: MixKind,
    pub k: usize,
    pub block_h: usize,
    pub block_w: usize,
    pub source_policy: SourcePolicy,
    /// Cutout drops random blocks instead of the most attended ones.
    pub cutout_random: bool,
    /// Beta(alpha, alpha) parameter of the cut-area draw for `cutmix_feature`.
    pub cutmix_alpha: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            kind: MixKind::AHardMix,
            k: 3,
            block_h: 3,
            block_w: 2,
            source_policy: SourcePolicy::Progressive,
            cutout_random: false,
            cutmix_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub gamma: f64,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            warmup_epochs: 10,
            decay_epochs: vec![200, 300],
            gamma: 0.1,
            epochs: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub every: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 10,
            batch_size: 32,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<toml>", e.message()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<toml>", e.message()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file and applies `PMM_*` overrides from the process
    /// environment.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str_with_env(&text, env)
    }

    /// Parses TOML text, then applies `PMM_*` overrides from `env`.
    pub fn from_toml_str_with_env(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<toml>", e.message()))?;
        apply_env_overrides(&mut table, env)?;
        Self::from_table(table)
    }

    /// Built-in presets: `market`, `duke`, `cuhk03`, `synthetic`.
    pub fn preset(name: &str) -> Result<Self> {
        Self::preset_with_env(name, std::iter::empty())
    }

    pub fn preset_with_env(
        name: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let text = match name {
            "market" => include_str!("../presets/market.toml"),
            "duke" => include_str!("../presets/duke.toml"),
            "cuhk03" => include_str!("../presets/cuhk03.toml"),
            "synthetic" => include_str!("../presets/synthetic.toml"),
            other => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
        };
        Self::from_toml_str_with_env(text, env)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Backbone output size (H, W).
    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.dataset.resolution[0] / BACKBONE_STRIDE,
            self.dataset.resolution[1] / BACKBONE_STRIDE,
        )
    }

    pub fn stage_weights(&self) -> Vec<f64> {
        self.loss.weights(self.model.stages)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.dataset.resolution;
        if h == 0 || w == 0 || h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::config(
                "dataset.resolution",
                format!("{h}x{w} is not divisible by the backbone stride {BACKBONE_STRIDE}"),
            ));
        }
        let s = &self.synthetic;
        if s.num_ids < 2 {
            return Err(Error::config("synthetic.num_ids", "need at least 2 identities"));
        }
        if s.imgs_per_id < 4 {
            return Err(Error::config(
                "synthetic.imgs_per_id",
                "need at least 4 images per identity (train, query and cross-camera gallery)",
            ));
        }
        if s.num_cams < 2 {
            return Err(Error::config("synthetic.num_cams", "need at least 2 cameras"));
        }

        let sp = &self.sampler;
        if sp.p < 2 {
            return Err(Error::config("sampler.p", "need at least 2 identities per batch"));
        }
        if sp.q < 2 {
            return Err(Error::config("sampler.q", "need at least 2 instances per identity"));
        }
        if sp.p * sp.q != sp.batch_size {
            return Err(Error::config(
                "sampler.batch_size",
                format!("P*Q = {} differs from batch size {}", sp.p * sp.q, sp.batch_size),
            ));
        }
        if sp.iters_per_epoch == Some(0) {
            return Err(Error::config("sampler.iters_per_epoch", "must be positive"));
        }

        let m = &self.model;
        if m.stages == 0 {
            return Err(Error::config("model.stages", "need at least one stage"));
        }
        if m.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be positive"));
        }

        let (fh, fw) = self.feature_size();
        let mix = &self.mix;
        if mix.block_h == 0 || fh % mix.block_h != 0 {
            return Err(Error::config(
                "mix.block_h",
                format!("feature height {fh} is not a multiple of {}", mix.block_h),
            ));
        }
        if mix.block_w == 0 || fw % mix.block_w != 0 {
            return Err(Error::config(
                "mix.block_w",
                format!("feature width {fw} is not a multiple of {}", mix.block_w),
            ));
        }
        let blocks = (fh / mix.block_h) * (fw / mix.block_w);
        if mix.k > blocks {
            return Err(Error::config(
                "mix.k",
                format!("{} exceeds the {blocks} blocks of the grid", mix.k),
            ));
        }
        if !(mix.cutmix_alpha > 0.0) {
            return Err(Error::config("mix.cutmix_alpha", "must be positive"));
        }

        let l = &self.loss;
        if !(0.0..1.0).contains(&l.epsilon) {
            return Err(Error::config("loss.epsilon", "must lie in [0, 1)"));
        }
        if !(l.margin > 0.0) {
            return Err(Error::config("loss.margin", "must be positive"));
        }
        if !l.stage_weights.is_empty() && l.stage_weights.len() != m.stages {
            return Err(Error::config(
                "loss.stage_weights",
                format!("{} weights for {} stages", l.stage_weights.len(), m.stages),
            ));
        }
        if l.stage_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("loss.stage_weights", "weights must be non-negative"));
        }

        let o = &self.optim;
        if !(o.lr > 0.0) {
            return Err(Error::config("optim.lr", "must be positive"));
        }
        if o.epochs == 0 {
            return Err(Error::config("optim.epochs", "must be positive"));
        }
        if !(o.gamma > 0.0) {
            return Err(Error::config("optim.gamma", "must be positive"));
        }
        if self.eval.every == 0 {
            return Err(Error::config("eval.every", "must be positive"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Applies `PMM_<SECTION>_<KEY>=value` (or `PMM_<KEY>` for top-level keys)
/// onto a parsed TOML table. Values are parsed as TOML literals, falling
/// back to plain strings.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let value = parse_literal(&raw);
        let section = SECTIONS
            .iter()
            .find(|s| rest.len() > s.len() + 1 && rest.starts_with(*s) && rest.as_bytes()[s.len()] == b'_');
        match section {
            Some(section) => {
                let key = &rest[section.len() + 1..];
                let entry = table
                    .entry(section.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let toml::Value::Table(sub) = entry else {
                    return Err(Error::config(section, "is not a table"));
                };
                sub.insert(key.to_string(), value);
            }
            None => {
                table.insert(rest, value);
            }
        }
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
