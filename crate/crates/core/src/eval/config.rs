use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, Upsample, Variant};
use crate::diffusion::{case_seed, TrainConfig};
use crate::error::{Error, Result};
use crate::simulate::ToyProcess;

pub const SEED_ENV: &str = "TRACEDIFF_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Argmax,
    ModelFree,
    ModelAware,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Argmax => "argmax",
            Method::ModelFree => "ddtr-model-free",
            Method::ModelAware => "ddtr-model-aware",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Argmax => None,
            Method::ModelFree => Some(Variant::ModelFree),
            Method::ModelAware => Some(Variant::ModelAware),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    /// Label written into the `dataset` column of the metrics table.
    #[serde(default = "default_dataset_name")]
    pub dataset: String,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

fn default_dataset_name() -> String {
    "synthetic".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("tracediff-out")
}

fn default_methods() -> Vec<Method> {
    vec![Method::Argmax, Method::ModelFree, Method::ModelAware]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub traces: usize,
    #[serde(default = "default_choice")]
    pub choice_prob: f64,
    #[serde(default = "default_loop")]
    pub loop_prob: f64,
}

fn default_choice() -> f64 {
    ToyProcess::default().choice_prob
}

fn default_loop() -> f64 {
    ToyProcess::default().loop_prob
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// DK log to load; when absent the toy process is simulated.
    pub dk_log: Option<PathBuf>,
    /// SK log paired with `dk_log`; when absent SK traces are synthesised.
    pub sk_log: Option<PathBuf>,
    /// Externally supplied flow matrix; when absent one is mined from the
    /// training split.
    pub flow_matrix: Option<PathBuf>,
    pub max_len: usize,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    pub simulate: Option<SimulateSection>,
}

fn default_fraction() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    pub seed: Option<u64>,
    /// `[lo, hi, steps]`.
    pub sweep: Option<(f64, f64, usize)>,
    /// SK draws per held-out trace at each sweep level.
    #[serde(default = "default_replicates")]
    pub sweep_replicates: usize,
}

fn default_lambda() -> f64 {
    crate::noise_synth::DEFAULT_LAMBDA
}

fn default_concentration() -> f64 {
    crate::noise_synth::DEFAULT_CONCENTRATION
}

fn default_replicates() -> usize {
    1
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            lambda: default_lambda(),
            concentration: default_concentration(),
            seed: None,
            sweep: None,
            sweep_replicates: default_replicates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_levels")]
    pub levels: usize,
    #[serde(default = "d_base")]
    pub base_channels: usize,
    #[serde(default = "d_time")]
    pub time_embed_dim: usize,
    #[serde(default = "d_head")]
    pub attention_head_dim: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_kernel")]
    pub kernel: usize,
    #[serde(default = "d_upsample")]
    pub upsample: Upsample,
    pub seed: Option<u64>,
}

fn d_levels() -> usize {
    2
}
fn d_base() -> usize {
    32
}
fn d_time() -> usize {
    64
}
fn d_head() -> usize {
    32
}
fn d_heads() -> usize {
    1
}
fn d_kernel() -> usize {
    3
}
fn d_upsample() -> Upsample {
    Upsample::Nearest
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            levels: d_levels(),
            base_channels: d_base(),
            time_embed_dim: d_time(),
            attention_head_dim: d_head(),
            heads: d_heads(),
            kernel: d_kernel(),
            upsample: d_upsample(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(rename = "T", default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_beta")]
    pub beta: (f64, f64),
}

fn d_steps() -> usize {
    500
}
fn d_beta() -> (f64, f64) {
    (1e-4, 0.02)
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            steps: d_steps(),
            beta: d_beta(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_drop")]
    pub p_no_sk: f64,
    #[serde(default = "d_drop")]
    pub p_no_f: f64,
    pub seed: Option<u64>,
}

fn d_epochs() -> usize {
    TrainConfig::default().epochs
}
fn d_lr() -> f64 {
    TrainConfig::default().lr
}
fn d_gamma() -> f64 {
    TrainConfig::default().gamma
}
fn d_drop() -> f64 {
    TrainConfig::default().p_no_sk
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: d_epochs(),
            lr: d_lr(),
            gamma: d_gamma(),
            p_no_sk: d_drop(),
            p_no_f: d_drop(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoverSection {
    pub seed: Option<u64>,
}

/// Everything needed to reproduce a run. Unset component seeds are derived
/// from `experiment.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub recover: RecoverSection,
}

/// A component seed derived from the experiment seed. Kept below 2^63 so a
/// resolved config can be written back as TOML integers.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    case_seed(base, label) >> 1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.experiment.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{raw}`")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with every derived seed written out explicitly.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.noise.seed = Some(self.noise_seed());
        c.model.seed = Some(self.model_seed());
        c.train.seed = Some(self.train_seed());
        c.recover.seed = Some(self.recover_seed());
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.dk_log.is_none() && d.simulate.is_none() {
            return Err(Error::Config("set either data.dk_log or [data.simulate]".into()));
        }
        if d.sk_log.is_some() && d.dk_log.is_none() {
            return Err(Error::Config("data.sk_log needs a matching data.dk_log".into()));
        }
        if self.experiment.methods.is_empty() {
            return Err(Error::Config("experiment.methods is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.noise.lambda) {
            return Err(Error::Config(format!("noise.lambda must lie in [0, 1], got {}", self.noise.lambda)));
        }
        if !(self.noise.concentration > 0.0) {
            return Err(Error::Config("noise.concentration must be positive".into()));
        }
        if self.noise.sweep_replicates == 0 {
            return Err(Error::Config("noise.sweep_replicates must be at least 1".into()));
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise.seed.unwrap_or_else(|| derive_seed(self.experiment.seed, "noise"))
    }

    pub fn model_seed(&self) -> u64 {
        self.model.seed.unwrap_or_else(|| derive_seed(self.experiment.seed, "model"))
    }

    pub fn train_seed(&self) -> u64 {
        self.train.seed.unwrap_or_else(|| derive_seed(self.experiment.seed, "train"))
    }

    pub fn recover_seed(&self) -> u64 {
        self.recover.seed.unwrap_or_else(|| derive_seed(self.experiment.seed, "recover"))
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.experiment.seed, "split")
    }

    pub fn simulate_seed(&self) -> u64 {
        derive_seed(self.experiment.seed, "simulate")
    }

    pub fn denoiser_config(&self, num_activities: usize, variant: Variant) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            num_activities,
            max_len: self.data.max_len,
            levels: m.levels,
            base_channels: m.base_channels,
            time_embed_dim: m.time_embed_dim,
            attention_head_dim: m.attention_head_dim,
            heads: m.heads,
            kernel: m.kernel,
            upsample: m.upsample,
            variant,
            steps: self.diffusion.steps,
            seed: self.model_seed(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            gamma: t.gamma,
            p_no_sk: t.p_no_sk,
            p_no_f: t.p_no_f,
            seed: self.train_seed(),
        }
    }
}
