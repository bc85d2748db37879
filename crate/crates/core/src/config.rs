//! Run configuration: one JSON document with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::action_offset::OffsetConfig;
use crate::ecn::EcnConfig;
use crate::error::{json_parse_error, Error, Result};
use crate::iea::IeaConfig;
use crate::implicit_mining::DEFAULT_MODEL;
use crate::rng::DEFAULT_SEED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Plms,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { method: SamplerMethod::Plms, steps: 10, train_steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent is `latent_size × latent_size × dim`.
    pub latent_size: usize,
    pub dim: usize,
    pub text_dim: usize,
    pub fourier_freqs: usize,
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { latent_size: 8, dim: 64, text_dim: 64, fourier_freqs: 8, blocks: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmModeConfig {
    Http,
    Mock,
    /// No mining; scenes without triplets get none.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub mode: LlmModeConfig,
    pub model: String,
    /// Overrides `CEIDM_LLM_ENDPOINT` when set.
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub cache: Option<PathBuf>,
    /// Custom mock rule table; the bundled one is used otherwise.
    pub mock_rules: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            mode: LlmModeConfig::Http,
            model: DEFAULT_MODEL.into(),
            endpoint: None,
            timeout_secs: 30.0,
            max_retries: 2,
            cache: None,
            mock_rules: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// JSON phrase → vector table replacing the surrogate text encoder.
    pub embedding_table: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub iea: IeaConfig,
    pub ecn: EcnConfig,
    pub offsets: OffsetConfig,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub llm: LlmConfig,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: DEFAULT_SEED,
            iea: IeaConfig::default(),
            ecn: EcnConfig::default(),
            offsets: OffsetConfig::default(),
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            llm: LlmConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| json_parse_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.iea.validate()?;
        self.ecn.validate()?;
        self.offsets.validate()?;
        let s = &self.sampler;
        if s.steps == 0 || s.train_steps == 0 || s.steps > s.train_steps {
            return Err(Error::validation(format!(
                "sampler.steps must be in 1..={}, got {}",
                s.train_steps, s.steps
            )));
        }
        if s.method == SamplerMethod::Plms && s.steps < 4 {
            return Err(Error::validation(format!("PLMS needs at least 4 steps, got {}; use ddim", s.steps)));
        }
        if !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err(Error::validation("need 0 < sampler.beta_start <= sampler.beta_end < 1"));
        }
        let m = &self.model;
        if m.latent_size == 0 || m.dim == 0 || m.text_dim == 0 || m.blocks == 0 {
            return Err(Error::validation("model dimensions and block count must be positive"));
        }
        if !(self.llm.timeout_secs.is_finite() && self.llm.timeout_secs > 0.0) {
            return Err(Error::validation("llm.timeout_secs must be positive"));
        }
        Ok(())
    }
}
