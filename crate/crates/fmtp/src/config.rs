//! Run configuration: a flat `key = value` text format with `#` comments,
//! defaults for every tunable, constraint validation mirroring the module
//! invariants, and the reproducibility manifest written next to every
//! artifact.

use std::path::Path;

use crate::data::{NormalizationMode, PatternMix, SynthConfig};
use crate::eval::{PipelineConfig, PredictConfig};
use crate::lm::{LmConfig, LmTrainConfig, MaskKind};
use crate::vq::{VqConfig, VqTrainConfig};

#[derive(Debug, Clone, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}`")]
    BadValue { key: String, value: String },
    #[error("malformed config line {line}: `{text}` (expected `key = value`)")]
    Malformed { line: usize, text: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::sync::Arc<std::io::Error>,
    },
}

/// Every tunable of the pipeline. Field order here is the canonical
/// serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // Trajectory protocol.
    pub t_obs: usize,
    pub t_pred: usize,
    // Memory storage module.
    pub window: usize,
    pub k: usize,
    pub n_k: usize,
    pub beta: f64,
    pub hidden: usize,
    pub vq_attn_heads: usize,
    // Sequence model.
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub mask: MaskKind,
    // Training.
    pub lr_vq: f64,
    pub lr_lm: f64,
    pub vq_epochs: usize,
    pub lm_epochs: usize,
    pub batch_size: usize,
    pub vq_batch_size: usize,
    pub eval_every: u64,
    pub plateau_patience: usize,
    pub dead_entry_steps: u64,
    // Sampling / evaluation.
    pub k_samples: usize,
    pub temperature: f64,
    // Normalization.
    pub rotate: bool,
    // Synthetic corpus.
    pub synth_n: usize,
    pub noise_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            t_obs: 8,
            t_pred: 12,
            window: 2,
            k: 64,
            n_k: 16,
            beta: 0.25,
            hidden: 64,
            vq_attn_heads: 4,
            d_model: 64,
            heads: 4,
            layers: 3,
            ff: 128,
            mask: MaskKind::SemiCausal,
            lr_vq: 2e-3,
            lr_lm: 1e-3,
            vq_epochs: 50,
            lm_epochs: 60,
            batch_size: 64,
            vq_batch_size: 16,
            eval_every: 10,
            plateau_patience: 20,
            dead_entry_steps: 100,
            k_samples: 20,
            temperature: 1.0,
            rotate: false,
            synth_n: 4000,
            noise_sigma: 0.01,
        }
    }
}

macro_rules! config_fields {
    ($macro:ident) => {
        $macro!(seed, u64);
        $macro!(t_obs, usize);
        $macro!(t_pred, usize);
        $macro!(window, usize);
        $macro!(k, usize);
        $macro!(n_k, usize);
        $macro!(beta, f64);
        $macro!(hidden, usize);
        $macro!(vq_attn_heads, usize);
        $macro!(d_model, usize);
        $macro!(heads, usize);
        $macro!(layers, usize);
        $macro!(ff, usize);
        $macro!(mask, mask);
        $macro!(lr_vq, f64);
        $macro!(lr_lm, f64);
        $macro!(vq_epochs, usize);
        $macro!(lm_epochs, usize);
        $macro!(batch_size, usize);
        $macro!(vq_batch_size, usize);
        $macro!(eval_every, u64);
        $macro!(plateau_patience, usize);
        $macro!(dead_entry_steps, u64);
        $macro!(k_samples, usize);
        $macro!(temperature, f64);
        $macro!(rotate, bool);
        $macro!(synth_n, usize);
        $macro!(noise_sigma, f64);
    };
}

fn render_mask(mask: MaskKind) -> &'static str {
    mask.name()
}

fn render_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

impl RunConfig {
    /// Applies `key = value` lines over the current values. Unknown keys and
    /// malformed lines are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '=');
            let key = parts.next().unwrap_or("").trim();
            let value = match parts.next() {
                Some(v) => v.trim(),
                None => {
                    return Err(ConfigError::Malformed { line: i + 1, text: raw.to_string() })
                }
            };
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: std::sync::Arc::new(e),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        macro_rules! setter {
            ($field:ident, mask) => {
                if key == stringify!($field) {
                    self.$field = match value {
                        "semi-causal" | "semi_causal" => MaskKind::SemiCausal,
                        "causal" => MaskKind::Causal,
                        _ => {
                            return Err(ConfigError::BadValue {
                                key: key.into(),
                                value: value.into(),
                            })
                        }
                    };
                    return Ok(());
                }
            };
            ($field:ident, bool) => {
                if key == stringify!($field) {
                    self.$field = match value {
                        "true" => true,
                        "false" => false,
                        _ => {
                            return Err(ConfigError::BadValue {
                                key: key.into(),
                                value: value.into(),
                            })
                        }
                    };
                    return Ok(());
                }
            };
            ($field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    self.$field = value.parse::<$ty>().map_err(|_| ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                    })?;
                    return Ok(());
                }
            };
        }
        config_fields!(setter);
        Err(ConfigError::UnknownKey(key.to_string()))
    }

    /// Canonical rendering; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        macro_rules! writer {
            ($field:ident, mask) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), render_mask(self.$field)));
            };
            ($field:ident, bool) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), render_bool(self.$field)));
            };
            ($field:ident, $ty:ty) => {
                out.push_str(&format!("{} = {}\n", stringify!($field), self.$field));
            };
        }
        config_fields!(writer);
        out
    }

    /// Mirrors module invariants so bad combinations fail at the CLI
    /// boundary.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.vq_config().validate().map_err(ConfigError::Invalid)?;
        self.lm_config().validate().map_err(ConfigError::Invalid)?;
        if self.k > u16::MAX as usize + 1 {
            return Err(ConfigError::Invalid(format!(
                "k = {} exceeds the 16-bit token id range",
                self.k
            )));
        }
        if self.k_samples == 0 {
            return Err(ConfigError::Invalid("k_samples must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(ConfigError::Invalid("temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.vq_batch_size == 0 || self.vq_epochs == 0 || self.lm_epochs == 0 {
            return Err(ConfigError::Invalid("epochs and batch_size must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(ConfigError::Invalid("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.serialize().as_bytes())
    }

    pub fn normalization(&self) -> NormalizationMode {
        if self.rotate {
            NormalizationMode::TranslationRotation
        } else {
            NormalizationMode::Translation
        }
    }

    pub fn vq_config(&self) -> VqConfig {
        VqConfig {
            k: self.k,
            n_k: self.n_k,
            window: self.window,
            beta: self.beta,
            hidden: self.hidden,
            attn_heads: self.vq_attn_heads,
            t_obs: self.t_obs,
            t_pred: self.t_pred,
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            vocab: self.k,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ff: self.ff,
            max_len: self.t_obs / self.window + self.t_pred / self.window,
        }
    }

    pub fn vq_train_config(&self) -> VqTrainConfig {
        VqTrainConfig {
            epochs: self.vq_epochs,
            batch_size: self.vq_batch_size,
            learning_rate: self.lr_vq,
            seed: self.seed,
            dead_entry_steps: self.dead_entry_steps,
            normalization: self.normalization(),
            cosine_decay: true,
        }
    }

    pub fn lm_train_config(&self) -> LmTrainConfig {
        LmTrainConfig {
            epochs: self.lm_epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr_lm,
            seed: self.seed,
            mask: self.mask,
            eval_every: self.eval_every,
            plateau_patience: self.plateau_patience,
            ..Default::default()
        }
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig {
            k_samples: self.k_samples,
            temperature: self.temperature,
            seed: self.seed,
            mask: self.mask,
            normalization: self.normalization(),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n: self.synth_n,
            t_obs: self.t_obs,
            t_pred: self.t_pred,
            noise_sigma: self.noise_sigma,
            mix: PatternMix::uniform(),
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            vq: self.vq_config(),
            lm: self.lm_config(),
            vq_train: self.vq_train_config(),
            lm_train: self.lm_train_config(),
            predict: self.predict_config(),
        }
    }
}

/// 64-bit FNV-1a; used for config and input hashes in run manifests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Reproducibility record written next to every artifact: the command, the
/// full config, and content hashes of every input. No wall-clock fields, so
/// identical runs produce identical manifests.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<(String, u64)>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push((path.display().to_string(), fnv1a(&bytes)));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("command = {}\n", self.command));
        out.push_str(&format!("config_hash = {:016x}\n", self.config.hash()));
        out.push_str(&format!("seed = {}\n", self.config.seed));
        for (path, hash) in &self.inputs {
            out.push_str(&format!("input = {path} fnv1a={hash:016x}\n"));
        }
        for path in &self.outputs {
            out.push_str(&format!("output = {path}\n"));
        }
        out.push_str("\n# full config\n");
        for line in self.config.serialize().lines() {
            out.push_str(&format!("config.{line}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut config = RunConfig::default();
        config.k = 128;
        config.mask = MaskKind::Causal;
        config.rotate = true;
        config.noise_sigma = 0.025;
        let text = config.serialize();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("nonsense = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "nonsense"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let config = RunConfig::parse("# a comment\n\nseed = 99 # trailing\n").unwrap();
        assert_eq!(config.seed, 99);
    }

    #[test]
    fn constraint_checks_fire() {
        // window must divide t_obs and t_pred.
        assert!(RunConfig::parse("window = 3\n").is_err());
        // d_model divisible by heads.
        assert!(RunConfig::parse("heads = 5\n").is_err());
        // temperature positive.
        assert!(RunConfig::parse("temperature = 0\n").is_err());
    }

    #[test]
    fn manifest_is_deterministic() {
        let config = RunConfig::default();
        let a = Manifest::new("synth", &config).render();
        let b = Manifest::new("synth", &config).render();
        assert_eq!(a, b);
        assert!(a.contains("config_hash ="));
        assert!(a.contains("config.seed = 7"));
    }
}
