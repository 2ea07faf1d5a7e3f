//! Checkpoint file format.
//!
//! Layout: magic `CTXMEM1`, a little-endian u32 header length, the UTF-8
//! text header, then little-endian f32 payloads in table order. The header
//! carries three sections:
//!
//! ```text
//! [config]
//! <run configuration, key = value>
//! [state]
//! vocab_size / step / rng_seed / rng_word_pos
//! [arrays]
//! name <TAB> dims (x-separated) <TAB> byte offset into the payload
//! ```
//!
//! Saving the same state twice is byte-identical; loading checks every
//! section length and re-derives the expected array shapes from the config,
//! so a truncated file or an edited header fails loudly.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{OptimizerState, Trainer};
use crate::config::{ConfigError, RunConfig};
use crate::model::ModelParameters;
use crate::text::{BpeModel, TextError, Vocabulary};

pub const MAGIC: &[u8; 7] = b"CTXMEM1";
pub const BPE_FILE: &str = "bpe.merges";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("truncated checkpoint: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("malformed checkpoint header: {what}")]
    BadHeader { what: String },
    #[error("checkpoint does not match its configuration: {what}")]
    ConfigMismatch { what: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// A fully materialized checkpoint: everything needed to resume training or
/// to translate.
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab_size: usize,
    pub step: usize,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// (name, shape, values) in canonical order
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshot a trainer. Arrays are emitted as every parameter in store
    /// order followed by the Adam moments (`adam_m.*`, `adam_v.*`).
    pub fn from_trainer(trainer: &Trainer) -> Self {
        let mut arrays = Vec::new();
        for p in trainer.model.store.iter() {
            arrays.push((p.name.clone(), p.shape.clone(), p.value.clone()));
        }
        for (p, m) in trainer
            .model
            .store
            .iter()
            .zip(&trainer.optimizer.first_moment)
        {
            arrays.push((format!("adam_m.{}", p.name), p.shape.clone(), m.clone()));
        }
        for (p, v) in trainer
            .model
            .store
            .iter()
            .zip(&trainer.optimizer.second_moment)
        {
            arrays.push((format!("adam_v.{}", p.name), p.shape.clone(), v.clone()));
        }
        Checkpoint {
            config: trainer.config.clone(),
            vocab_size: trainer.model.config.vocab_size,
            step: trainer.optimizer.step,
            rng_seed: trainer.rng.get_seed(),
            rng_word_pos: trainer.rng.get_word_pos(),
            arrays,
        }
    }

    /// Rebuild a trainer, resuming exactly where the snapshot was taken.
    pub fn into_trainer(self) -> Result<Trainer, CheckpointError> {
        let mut model = ModelParameters::init(
            self.config.model_config(self.vocab_size),
            self.config.seed,
        )
        .map_err(|e| CheckpointError::ConfigMismatch {
            what: e.to_string(),
        })?;
        let mut optimizer = OptimizerState::new(&model, self.config.warmup_steps);
        optimizer.step = self.step;

        for (name, shape, values) in &self.arrays {
            let (kind, base) = if let Some(rest) = name.strip_prefix("adam_m.") {
                ("m", rest)
            } else if let Some(rest) = name.strip_prefix("adam_v.") {
                ("v", rest)
            } else {
                ("p", name.as_str())
            };
            let idx = model.store.find(base).ok_or_else(|| {
                CheckpointError::ConfigMismatch {
                    what: format!(
                        "array {name:?} has no place in this configuration \
                         (check memory_size/merge_strategy)"
                    ),
                }
            })?;
            let expected = model.store.get(idx).shape.clone();
            if *shape != expected {
                return Err(CheckpointError::ConfigMismatch {
                    what: format!(
                        "parameter {base:?}: stored shape {shape:?} does not match \
                         configured shape {expected:?} \
                         (check model_dim/ffn_dim/num_layers/vocab)"
                    ),
                });
            }
            match kind {
                "p" => model.store.get_mut(idx).value = values.clone(),
                "m" => optimizer.first_moment[idx] = values.clone(),
                _ => optimizer.second_moment[idx] = values.clone(),
            }
        }

        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        Ok(Trainer {
            config: self.config,
            model,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: &str) -> Result<(), CheckpointError> {
        let mut header = String::new();
        header.push_str("[config]\n");
        header.push_str(&self.config.to_text());
        header.push_str("[state]\n");
        header.push_str(&format!("vocab_size = {}\n", self.vocab_size));
        header.push_str(&format!("step = {}\n", self.step));
        header.push_str(&format!("rng_seed = {}\n", hex(&self.rng_seed)));
        header.push_str(&format!("rng_word_pos = {}\n", self.rng_word_pos));
        header.push_str("[arrays]\n");
        let mut offset = 0usize;
        for (name, shape, values) in &self.arrays {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{name}\t{}\t{offset}\n", dims.join("x")));
            offset += values.len() * 4;
        }

        let mut bytes = Vec::with_capacity(MAGIC.len() + 4 + header.len() + offset);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for (_, _, values) in &self.arrays {
            for &v in values {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }

        // atomic write: temp file in the same directory, then rename
        let target = Path::new(path);
        let tmp: PathBuf = target.with_extension("tmp");
        let io_err = |source: std::io::Error| CheckpointError::Io {
            path: path.to_string(),
            source,
        };
        let mut file = std::fs::File::create(&tmp).map_err(io_err)?;
        file.write_all(&bytes).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
        drop(file);
        std::fs::rename(&tmp, target).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &str) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_string(),
            source,
        })?;
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len =
            u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes")) as usize;
        let header_end = 11 + header_len;
        if bytes.len() < header_end {
            return Err(CheckpointError::Truncated {
                expected: header_end,
                actual: bytes.len(),
            });
        }
        let header = std::str::from_utf8(&bytes[11..header_end]).map_err(|_| {
            CheckpointError::BadHeader {
                what: "header is not UTF-8".to_string(),
            }
        })?;

        let mut config_text = String::new();
        let mut state_text = String::new();
        let mut array_lines: Vec<&str> = Vec::new();
        let mut section = "";
        for line in header.lines() {
            match line {
                "[config]" => section = "config",
                "[state]" => section = "state",
                "[arrays]" => section = "arrays",
                _ => match section {
                    "config" => {
                        config_text.push_str(line);
                        config_text.push('\n');
                    }
                    "state" => {
                        state_text.push_str(line);
                        state_text.push('\n');
                    }
                    "arrays" => array_lines.push(line),
                    _ => {
                        return Err(CheckpointError::BadHeader {
                            what: format!("unexpected line before any section: {line:?}"),
                        })
                    }
                },
            }
        }

        let config = RunConfig::parse(&config_text)?;
        let mut vocab_size = None;
        let mut step = None;
        let mut rng_seed = None;
        let mut rng_word_pos = None;
        for line in state_text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                return Err(CheckpointError::BadHeader {
                    what: format!("bad state line {line:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "vocab_size" => vocab_size = v.parse().ok(),
                "step" => step = v.parse().ok(),
                "rng_seed" => rng_seed = unhex(v),
                "rng_word_pos" => rng_word_pos = v.parse().ok(),
                other => {
                    return Err(CheckpointError::BadHeader {
                        what: format!("unknown state key {other:?}"),
                    })
                }
            }
        }
        let missing = |what: &str| CheckpointError::BadHeader {
            what: format!("missing or malformed state key {what:?}"),
        };
        let vocab_size = vocab_size.ok_or_else(|| missing("vocab_size"))?;
        let step = step.ok_or_else(|| missing("step"))?;
        let rng_seed = rng_seed.ok_or_else(|| missing("rng_seed"))?;
        let rng_word_pos = rng_word_pos.ok_or_else(|| missing("rng_word_pos"))?;

        let payload = &bytes[header_end..];
        let mut arrays = Vec::with_capacity(array_lines.len());
        let mut expected_offset = 0usize;
        for line in &array_lines {
            let mut parts = line.split('\t');
            let (Some(name), Some(dims), Some(off)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return Err(CheckpointError::BadHeader {
                    what: format!("bad array line {line:?}"),
                });
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| CheckpointError::BadHeader {
                    what: format!("bad dims in array line {line:?}"),
                })?;
            let offset: usize = off.parse().map_err(|_| CheckpointError::BadHeader {
                what: format!("bad offset in array line {line:?}"),
            })?;
            if offset != expected_offset {
                return Err(CheckpointError::BadHeader {
                    what: format!("array {name:?} at offset {offset}, expected {expected_offset}"),
                });
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * 4;
            if payload.len() < end {
                return Err(CheckpointError::Truncated {
                    expected: header_end + end,
                    actual: bytes.len(),
                });
            }
            let values: Vec<f64> = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            arrays.push((name.to_string(), shape, values));
            expected_offset = end;
        }
        if payload.len() != expected_offset {
            return Err(CheckpointError::Truncated {
                expected: header_end + expected_offset,
                actual: bytes.len(),
            });
        }

        Ok(Checkpoint {
            config,
            vocab_size,
            step,
            rng_seed,
            rng_word_pos,
            arrays,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

/// A loaded model ready to translate: checkpoint plus the sibling BPE and
/// vocabulary files from the same directory.
pub struct TranslationSystem {
    pub config: RunConfig,
    pub model: ModelParameters,
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

impl TranslationSystem {
    pub fn load(checkpoint_path: &str) -> Result<Self, CheckpointError> {
        let trainer = Checkpoint::load(checkpoint_path)?.into_trainer()?;
        let dir = Path::new(checkpoint_path)
            .parent()
            .unwrap_or_else(|| Path::new("."));
        let bpe = BpeModel::load(dir.join(BPE_FILE).to_str().expect("utf-8 path"))?;
        let vocab = Vocabulary::load(dir.join(VOCAB_FILE).to_str().expect("utf-8 path"))?;
        if vocab.len() != trainer.model.config.vocab_size {
            return Err(CheckpointError::ConfigMismatch {
                what: format!(
                    "vocabulary file has {} entries but the checkpoint was trained with {}",
                    vocab.len(),
                    trainer.model.config.vocab_size
                ),
            });
        }
        Ok(TranslationSystem {
            config: trainer.config,
            model: trainer.model,
            bpe,
            vocab,
        })
    }
}
