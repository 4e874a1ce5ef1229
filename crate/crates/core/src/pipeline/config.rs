//! Experiment configuration (TOML) and dataset presets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioner::ProviderSpec;
use crate::data::{load_series, DatasetMeta, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::forecast::{ForecasterKind, TrainConfig};
use crate::geometry::SignPolicy;
use crate::metrics::Mode;
use crate::rectflow::{SamplerConfig, VelocityConfig};
use crate::selector::SelectorConfig;

pub const DEFAULT_SEED: u64 = 2025;
pub const DEFAULT_INPUT_LEN: usize = 12;
pub const DEFAULT_HORIZONS: [usize; 4] = [3, 6, 9, 12];

/// Published statistics of a benchmark dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub records: usize,
    pub frequency: &'static str,
    /// `None` when the period is unknown or ambiguous and must be supplied.
    pub period: Option<usize>,
    pub batch_size: usize,
    pub horizons: [usize; 4],
}

pub const PRESETS: [DatasetPreset; 6] = [
    DatasetPreset { name: "employees", records: 427, frequency: "monthly", period: Some(3), batch_size: 4, horizons: DEFAULT_HORIZONS },
    DatasetPreset { name: "forest", records: 517, frequency: "unknown", period: None, batch_size: 4, horizons: DEFAULT_HORIZONS },
    DatasetPreset { name: "german", records: 221, frequency: "quarterly", period: Some(3), batch_size: 4, horizons: DEFAULT_HORIZONS },
    DatasetPreset { name: "ili", records: 966, frequency: "weekly", period: None, batch_size: 4, horizons: [2, 4, 8, 12] },
    DatasetPreset { name: "inventories", records: 402, frequency: "monthly", period: Some(3), batch_size: 4, horizons: DEFAULT_HORIZONS },
    DatasetPreset { name: "consump", records: 96, frequency: "yearly", period: Some(3), batch_size: 4, horizons: DEFAULT_HORIZONS },
];

pub fn preset(name: &str) -> Option<&'static DatasetPreset> {
    let key = name.trim_end_matches('.').to_ascii_lowercase();
    PRESETS.iter().find(|p| p.name == key)
}

/// Seasonal toy series: linear trend, sine season and Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSeries {
    pub length: usize,
    pub period: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

impl SyntheticSeries {
    pub fn generate(&self) -> Result<Vec<f64>> {
        let normal = Normal::new(0.0, self.noise).map_err(|e| Error::config(format!("synthetic noise: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.length)
            .map(|t| {
                let phase = 2.0 * std::f64::consts::PI * t as f64 / self.period as f64;
                self.trend * t as f64 + phase.sin() + normal.sample(&mut rng)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSeries>,
}

impl DatasetConfig {
    /// Period from the config, else from the preset with the same name.
    pub fn resolved_period(&self) -> Option<usize> {
        self.period
            .or_else(|| self.synthetic.map(|s| s.period))
            .or_else(|| preset(&self.name).and_then(|p| p.period))
    }

    fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            name: self.name.clone(),
            frequency: self
                .frequency
                .clone()
                .or_else(|| preset(&self.name).map(|p| p.frequency.to_string()))
                .unwrap_or_default(),
            period: self.resolved_period(),
            column: self.column.clone(),
        }
    }

    /// Reads the series; relative paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<TimeSeriesDataset> {
        let meta = self.meta();
        match (&self.path, &self.synthetic) {
            (Some(p), None) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                load_series(path, &meta)
            }
            (None, Some(s)) => TimeSeriesDataset::new(meta.name, s.generate()?, meta.frequency, meta.period),
            _ => Err(Error::config("dataset needs exactly one of `path` or `synthetic`")),
        }
    }
}

/// A forecaster entry: a built-in name or an external command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ForecasterSpec {
    Builtin(ForecasterKind),
    External { name: String, command: Vec<String> },
}

impl ForecasterSpec {
    pub fn name(&self) -> &str {
        match self {
            ForecasterSpec::Builtin(k) => k.as_str(),
            ForecasterSpec::External { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub velocity: VelocityConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub uncond_prob: f64,
    /// Global gradient-norm clip for generator updates.
    pub grad_clip: Option<f64>,
    /// Differentiate the selected-sample loss through only the last K
    /// sampler steps.
    pub grad_last_steps: Option<usize>,
    pub sign_policy: SignPolicy,
    pub gate_hidden: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            velocity: VelocityConfig::default(),
            lr: 3e-3,
            weight_decay: 0.1,
            uncond_prob: 0.1,
            grad_clip: Some(1.0),
            grad_last_steps: None,
            sign_policy: SignPolicy::Paired,
            gate_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorSettings {
    #[serde(flatten)]
    pub model: SelectorConfig,
    /// Use only the first N validation-half batches per reward sweep.
    pub val_half_batches: Option<usize>,
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianConfig {
    pub noise_scale: f64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self { noise_scale: 1.0 }
    }
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_input_len() -> usize {
    DEFAULT_INPUT_LEN
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_forecasters() -> Vec<ForecasterSpec> {
    vec![ForecasterSpec::Builtin(ForecasterKind::Linear)]
}
fn default_modes() -> Vec<Mode> {
    vec![Mode::Baseline, Mode::Dad4ts]
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    4
}
fn default_providers() -> Vec<ProviderSpec> {
    ProviderSpec::defaults()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    /// Defaults to the dataset preset's horizons.
    #[serde(default)]
    pub horizons: Vec<usize>,
    #[serde(default = "default_forecasters")]
    pub forecasters: Vec<ForecasterSpec>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Epoch budget of every mode; overrides `forecaster_train.max_epochs`.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Mini-batch size of every mode; overrides `forecaster_train.batch_size`.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub selector: SelectorSettings,
    /// Optimizer and patience; the seed is derived per cell.
    #[serde(default)]
    pub forecaster_train: TrainConfig,
    #[serde(default)]
    pub gaussian: GaussianConfig,
    #[serde(default = "default_providers")]
    pub providers: Vec<ProviderSpec>,
}

impl ExperimentConfig {
    /// Parses, fills preset defaults and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    fn resolve(&mut self) {
        if self.horizons.is_empty() {
            self.horizons = preset(&self.dataset.name).map_or(DEFAULT_HORIZONS, |p| p.horizons).to_vec();
        }
        if self.dataset.period.is_none() {
            self.dataset.period = self.dataset.resolved_period();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return fail(format!("invalid experiment name '{}'", self.name));
        }
        if self.input_len == 0 {
            return fail("input_len must be positive".into());
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return fail("horizons must be a non-empty list of positive lengths".into());
        }
        if self.modes.is_empty() {
            return fail("at least one mode is required".into());
        }
        if self.forecasters.is_empty() {
            return fail("at least one forecaster is required".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        let unique = |xs: Vec<String>| xs.iter().collect::<BTreeSet<_>>().len() == xs.len();
        if !unique(self.modes.iter().map(|m| m.to_string()).collect())
            || !unique(self.horizons.iter().map(|h| h.to_string()).collect())
            || !unique(self.forecasters.iter().map(|f| f.name().to_string()).collect())
        {
            return fail("modes, horizons and forecasters must not repeat".into());
        }
        self.sampler.validate()?;
        let t = &self.forecaster_train;
        if !(t.lr > 0.0) || t.max_epochs == 0 || t.patience == 0 || t.batch_size == 0 {
            return fail("forecaster_train values must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.generator.uncond_prob) {
            return fail("generator.uncond_prob must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.selector.model.dropout) || !(self.selector.model.temperature > 0.0) {
            return fail("selector dropout must lie in [0, 1) and temperature be positive".into());
        }
        if !self.selector.model.width.is_multiple_of(self.selector.model.heads.max(1)) || self.selector.model.heads == 0 {
            return fail("selector width must be divisible by its head count".into());
        }
        if self.generator.velocity.time_dim < 2 || self.generator.velocity.hidden == 0 {
            return fail("generator velocity model sizes must be positive".into());
        }
        let uses_gen = self.modes.iter().any(|m| m.uses_generator());
        if uses_gen && self.providers.is_empty() {
            return fail("generator modes need at least one embedding provider".into());
        }
        if !unique(self.providers.iter().map(|p| p.id().to_string()).collect()) {
            return fail("provider ids must be unique".into());
        }
        if uses_gen && self.forecasters.iter().any(|f| matches!(f, ForecasterSpec::External { .. })) {
            return fail("external forecasters are only supported in baseline and gaussian modes".into());
        }
        if self.modes.contains(&Mode::Gaussian) && self.dataset.period.is_none() {
            return fail(format!(
                "gaussian mode needs a seasonal period; dataset '{}' has none, set dataset.period",
                self.dataset.name
            ));
        }
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => fail("dataset needs exactly one of `path` or `synthetic`".into()),
        }
    }

    /// Directory holding this experiment's artifacts.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}
