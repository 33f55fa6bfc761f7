use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Trace and SK streams only.
    ModelFree,
    /// Adds the latent flow-matrix stream, cross attention and the flow head.
    ModelAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsample {
    Nearest,
    TransposedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Activities `K`, excluding the padding class.
    pub num_activities: usize,
    pub max_len: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub attention_head_dim: usize,
    pub heads: usize,
    pub kernel: usize,
    pub upsample: Upsample,
    pub variant: Variant,
    /// Number of diffusion steps `T`; valid time steps are `1..=T`.
    pub steps: usize,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn new(num_activities: usize, max_len: usize, variant: Variant) -> Self {
        DenoiserConfig {
            num_activities,
            max_len,
            levels: 2,
            base_channels: 32,
            time_embed_dim: 64,
            attention_head_dim: 32,
            heads: 1,
            kernel: 3,
            upsample: Upsample::Nearest,
            variant,
            steps: 500,
            seed: 0,
        }
    }

    /// Trace classes including padding.
    pub fn classes(&self) -> usize {
        self.num_activities + 1
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Width of the flow-matrix features.
    pub fn flow_dim(&self) -> usize {
        self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.num_activities < 2 {
            return err(format!("num_activities must be at least 2, got {}", self.num_activities));
        }
        for (name, v) in [
            ("max_len", self.max_len),
            ("levels", self.levels),
            ("base_channels", self.base_channels),
            ("attention_head_dim", self.attention_head_dim),
            ("heads", self.heads),
            ("steps", self.steps),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.levels > 16 || self.max_len % (1 << self.levels) != 0 {
            return err(format!(
                "max_len {} is not divisible by 2^levels = 2^{}",
                self.max_len, self.levels
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return err(format!(
                "time_embed_dim must be a positive even number, got {}",
                self.time_embed_dim
            ));
        }
        if self.kernel % 2 == 0 {
            return err(format!("kernel width must be odd, got {}", self.kernel));
        }
        Ok(())
    }
}
