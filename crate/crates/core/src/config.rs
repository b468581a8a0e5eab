//! Flat `key=value` run configuration: training hyperparameters plus
//! encoder dimensions, loadable from a text file with CLI overrides.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::trainer::{LossMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{path}:{line}: expected `key=value`")]
    BadLine { path: String, line: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything a run needs apart from the data files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Minimum token frequency for vocabulary inclusion.
    pub min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 128,
            dropout: 0.0,
            min_count: 1,
        }
    }
}

impl RunConfig {
    /// Parse a config file of `key=value` lines (`#` comments allowed) over
    /// the defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                path: path.display().to_string(),
                line: idx + 1,
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "warmup_fraction" => self.train.warmup_fraction = parse(key, value)?,
            "warmup_steps" => {
                self.train.warmup_steps = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "total_steps" => self.train.total_steps = parse(key, value)?,
            "tau" => self.train.tau = parse(key, value)?,
            "mu" => self.train.mu = parse(key, value)?,
            "queue_capacity" => self.train.queue_capacity = parse(key, value)?,
            "lambda1" => self.train.lambda1 = parse(key, value)?,
            "lambda2" => self.train.lambda2 = parse(key, value)?,
            "mask_rate" => self.train.mask_rate = parse(key, value)?,
            "affective_mask_rate" => self.train.affective_mask_rate = parse(key, value)?,
            "word_cl_sample" => self.train.word_cl_sample = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "loss_mode" => {
                self.train.loss_mode =
                    value.parse::<LossMode>().map_err(|e| ConfigError::BadValue {
                        key: key.to_string(),
                        value: value.to_string(),
                        reason: e,
                    })?
            }
            "polarity_threshold" => self.train.polarity_threshold = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden_dim: self.hidden_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            dropout: self.dropout,
            seed: self.train.seed,
        }
    }

    /// Canonical `key=value` rendering of the resolved configuration.
    pub fn render(&self) -> String {
        let t = &self.train;
        let warmup = match t.warmup_steps {
            Some(s) => s.to_string(),
            None => "none".to_string(),
        };
        format!(
            "batch_size={}\nlr={}\nwarmup_fraction={}\nwarmup_steps={}\ntotal_steps={}\n\
             tau={}\nmu={}\nqueue_capacity={}\nlambda1={}\nlambda2={}\nmask_rate={}\n\
             affective_mask_rate={}\nword_cl_sample={}\nweight_decay={}\nseed={}\n\
             loss_mode={}\npolarity_threshold={}\nhidden_dim={}\nn_layers={}\nn_heads={}\n\
             ffn_dim={}\nmax_len={}\ndropout={}\nmin_count={}\n",
            t.batch_size,
            t.lr,
            t.warmup_fraction,
            warmup,
            t.total_steps,
            t.tau,
            t.mu,
            t.queue_capacity,
            t.lambda1,
            t.lambda2,
            t.mask_rate,
            t.affective_mask_rate,
            t.word_cl_sample,
            t.weight_decay,
            t.seed,
            t.loss_mode.as_str(),
            t.polarity_threshold,
            self.hidden_dim,
            self.n_layers,
            self.n_heads,
            self.ffn_dim,
            self.max_len,
            self.dropout,
            self.min_count,
        )
    }
}
