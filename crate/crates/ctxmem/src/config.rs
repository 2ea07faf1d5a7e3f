//! Plain-text run configuration: one `key = value` per line, `#` comments.
//! Unknown keys are errors so typos surface immediately.

use std::collections::HashMap;

use thiserror::Error;

use crate::memory::MergeStrategy;
use crate::model::ModelConfig;
use crate::rnn::{RnnCore, RnnDirection};
use crate::text::ContextMode;
use crate::transformer::TransformerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key {key:?}")]
    UnknownKey { key: String },
    #[error("missing required configuration key {key:?}")]
    MissingKey { key: String },
    #[error("bad value {value:?} for configuration key {key:?}")]
    BadValue { key: String, value: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed configuration line {line}: expected `key = value`")]
    BadLine { line: usize },
}

pub const REQUIRED_KEYS: &[&str] = &[
    "num_layers",
    "model_dim",
    "num_heads",
    "ffn_dim",
    "dropout",
    "label_smoothing",
    "warmup_steps",
    "train_steps",
    "batch_tokens",
    "memory_size",
    "context_mode",
    "merge_strategy",
    "rnn_core",
    "rnn_direction",
    "seed",
    "bpe_merges",
];

pub const OPTIONAL_KEYS: &[&str] = &[
    "checkpoint_every",
    "grad_clip",
    "max_positions",
    "gate_override",
];

/// Environment variable consulted when the config omits `seed`.
pub const SEED_ENV: &str = "CTXMEM_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub warmup_steps: usize,
    pub train_steps: usize,
    pub batch_tokens: usize,
    pub memory_size: usize,
    pub context_mode: ContextMode,
    pub merge_kind: String,
    pub rnn_core: RnnCore,
    pub rnn_direction: RnnDirection,
    pub seed: u64,
    pub bpe_merges: usize,
    pub checkpoint_every: usize,
    pub grad_clip: f64,
    pub max_positions: usize,
    pub gate_override: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &str) -> Result<Self, ConfigError> {
        let body = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_string(),
            source,
        })?;
        Self::parse(&body)
    }

    pub fn parse(body: &str) -> Result<Self, ConfigError> {
        let mut entries: HashMap<String, String> = HashMap::new();
        for (i, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine { line: i + 1 });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !REQUIRED_KEYS.contains(&key.as_str()) && !OPTIONAL_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { key });
            }
            entries.insert(key, value);
        }

        let get = |key: &str| -> Result<String, ConfigError> {
            entries.get(key).cloned().ok_or(ConfigError::MissingKey {
                key: key.to_string(),
            })
        };
        let parse_num = |key: &str, value: &str| -> Result<usize, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        };
        let parse_f64 = |key: &str, value: &str| -> Result<f64, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        };

        let usize_key = |key: &str| -> Result<usize, ConfigError> { parse_num(key, &get(key)?) };
        let f64_key = |key: &str| -> Result<f64, ConfigError> { parse_f64(key, &get(key)?) };

        let seed: u64 = match entries.get("seed") {
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: "seed".to_string(),
                value: v.clone(),
            })?,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v.parse().map_err(|_| ConfigError::BadValue {
                    key: "seed".to_string(),
                    value: v,
                })?,
                Err(_) => {
                    return Err(ConfigError::MissingKey {
                        key: "seed".to_string(),
                    })
                }
            },
        };

        let context_mode_raw = get("context_mode")?;
        let context_mode =
            ContextMode::parse(&context_mode_raw).ok_or_else(|| ConfigError::BadValue {
                key: "context_mode".to_string(),
                value: context_mode_raw.clone(),
            })?;
        let rnn_core_raw = get("rnn_core")?;
        let rnn_core = RnnCore::parse(&rnn_core_raw).ok_or_else(|| ConfigError::BadValue {
            key: "rnn_core".to_string(),
            value: rnn_core_raw.clone(),
        })?;
        let rnn_direction_raw = get("rnn_direction")?;
        let rnn_direction =
            RnnDirection::parse(&rnn_direction_raw).ok_or_else(|| ConfigError::BadValue {
                key: "rnn_direction".to_string(),
                value: rnn_direction_raw.clone(),
            })?;
        let merge_kind = get("merge_strategy")?;
        if MergeStrategy::parse(&merge_kind, rnn_core, rnn_direction).is_none() {
            return Err(ConfigError::BadValue {
                key: "merge_strategy".to_string(),
                value: merge_kind,
            });
        }

        let train_steps = usize_key("train_steps")?;
        let checkpoint_every = match entries.get("checkpoint_every") {
            Some(v) => parse_num("checkpoint_every", v)?,
            None => train_steps.max(1),
        };
        let gate_override = match entries.get("gate_override") {
            Some(v) => {
                let g = parse_f64("gate_override", v)?;
                if !(0.0..=1.0).contains(&g) {
                    return Err(ConfigError::BadValue {
                        key: "gate_override".to_string(),
                        value: v.clone(),
                    });
                }
                Some(g)
            }
            None => None,
        };

        Ok(RunConfig {
            num_layers: usize_key("num_layers")?,
            model_dim: usize_key("model_dim")?,
            num_heads: usize_key("num_heads")?,
            ffn_dim: usize_key("ffn_dim")?,
            dropout: f64_key("dropout")?,
            label_smoothing: f64_key("label_smoothing")?,
            warmup_steps: usize_key("warmup_steps")?,
            train_steps,
            batch_tokens: usize_key("batch_tokens")?,
            memory_size: usize_key("memory_size")?,
            context_mode,
            merge_kind,
            rnn_core,
            rnn_direction,
            seed,
            bpe_merges: usize_key("bpe_merges")?,
            checkpoint_every,
            grad_clip: match entries.get("grad_clip") {
                Some(v) => parse_f64("grad_clip", v)?,
                None => 0.0,
            },
            max_positions: match entries.get("max_positions") {
                Some(v) => parse_num("max_positions", v)?,
                None => 512,
            },
            gate_override,
        })
    }

    /// Stable round-trippable rendering (used inside checkpoints).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("num_layers", self.num_layers.to_string());
        push("model_dim", self.model_dim.to_string());
        push("num_heads", self.num_heads.to_string());
        push("ffn_dim", self.ffn_dim.to_string());
        push("dropout", format!("{:?}", self.dropout));
        push("label_smoothing", format!("{:?}", self.label_smoothing));
        push("warmup_steps", self.warmup_steps.to_string());
        push("train_steps", self.train_steps.to_string());
        push("batch_tokens", self.batch_tokens.to_string());
        push("memory_size", self.memory_size.to_string());
        push("context_mode", self.context_mode.name().to_string());
        push("merge_strategy", self.merge_kind.clone());
        push("rnn_core", self.rnn_core.name().to_string());
        push("rnn_direction", self.rnn_direction.name().to_string());
        push("seed", self.seed.to_string());
        push("bpe_merges", self.bpe_merges.to_string());
        push("checkpoint_every", self.checkpoint_every.to_string());
        push("grad_clip", format!("{:?}", self.grad_clip));
        push("max_positions", self.max_positions.to_string());
        if let Some(g) = self.gate_override {
            push("gate_override", format!("{g:?}"));
        }
        out
    }

    pub fn merge_strategy(&self) -> MergeStrategy {
        MergeStrategy::parse(&self.merge_kind, self.rnn_core, self.rnn_direction)
            .expect("merge kind validated at parse time")
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            dropout_p: self.dropout,
            max_positions: self.max_positions,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            transformer: self.transformer_config(),
            vocab_size,
            memory_size: self.memory_size,
            merge: self.merge_strategy(),
        }
    }
}
