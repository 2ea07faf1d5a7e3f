//! Document-aware decoding: greedy and beam search that thread each
//! sentence's document context through the memory network.

use thiserror::Error;

use crate::memory::gated_encoder_output;
use crate::model::ModelParameters;
use crate::tensor::Tape;
use crate::text::{
    decode_sentence, empty_context, encode_sentence, ContextMode, BOS, EOS, PAD,
};
use crate::training::TranslationSystem;
use crate::transformer::{decode_logits, Dropout, EncodedSequence, ModelError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("random context selection is a training control, not an inference mode")]
    RandomContextAtInference,
    #[error("memory size {requested} exceeds the trained capacity {trained}")]
    CapacityExceeded { requested: usize, trained: usize },
    #[error("concatenation merging is trained for exactly {trained} context sentences, got {requested}")]
    ConcatSizeMismatch { requested: usize, trained: usize },
}

/// Decoding settings; `memory_size`, `context_mode` and `gate_override` may
/// deviate from the checkpoint where the parameter set allows it.
#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub beam: usize,
    pub alpha: f64,
    pub max_len: usize,
    pub memory_size: usize,
    pub context_mode: ContextMode,
    pub gate_override: Option<f64>,
}

impl DecodeOptions {
    pub fn from_system(system: &TranslationSystem) -> Self {
        DecodeOptions {
            beam: 4,
            alpha: 0.6,
            max_len: 64,
            memory_size: system.config.memory_size,
            context_mode: system.config.context_mode,
            gate_override: system.config.gate_override,
        }
    }

    /// Check the settings against what the checkpoint was trained with.
    pub fn validate(&self, model: &ModelParameters) -> Result<(), InferError> {
        if self.memory_size > 0 && self.context_mode == ContextMode::Random {
            return Err(InferError::RandomContextAtInference);
        }
        let trained = model.config.memory_size;
        if self.memory_size > trained {
            return Err(InferError::CapacityExceeded {
                requested: self.memory_size,
                trained,
            });
        }
        if model.config.merge.params_depend_on_m()
            && self.memory_size != trained
            && self.memory_size != 0
        {
            return Err(InferError::ConcatSizeMismatch {
                requested: self.memory_size,
                trained,
            });
        }
        Ok(())
    }
}

fn encode_memory(
    tape: &mut Tape,
    model: &ModelParameters,
    gate_override: Option<f64>,
    source: &[u32],
    contexts: &[Vec<u32>],
) -> Result<(crate::model::BoundModel, EncodedSequence), ModelError> {
    let bound = model.bind(tape, gate_override);
    let cfg = model.config.transformer.clone();
    let mut dropout = Dropout::disabled();
    let memory = gated_encoder_output(
        tape,
        source,
        contexts,
        &bound.encoder,
        bound.memory.as_ref(),
        &cfg,
        &mut dropout,
    )?;
    Ok((bound, memory))
}

fn next_token_log_probs(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - log_denom).collect()
}

/// Greedy decoding: repeatedly append the argmax token (ties to the lowest
/// id; PAD and BOS are never emitted), stopping at EOS or `max_len`. The
/// returned ids include the final EOS when one was produced.
pub fn greedy_decode(
    model: &ModelParameters,
    gate_override: Option<f64>,
    source: &[u32],
    contexts: &[Vec<u32>],
    max_len: usize,
) -> Result<Vec<u32>, ModelError> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut tape = Tape::new();
    let (bound, memory) = encode_memory(&mut tape, model, gate_override, source, contexts)?;
    let cfg = model.config.transformer.clone();
    let mut dropout = Dropout::disabled();

    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = decode_logits(&mut tape, &prefix, &memory, &bound.decoder, &cfg, &mut dropout)?;
        let (rows, vocab) = tape.tensor(logits).rc();
        let row = &tape.data(logits)[(rows - 1) * vocab..rows * vocab];
        let mut best = f64::NEG_INFINITY;
        let mut best_id = EOS;
        for (id, &score) in row.iter().enumerate() {
            let id = id as u32;
            if id == PAD || id == BOS {
                continue;
            }
            if score > best {
                best = score;
                best_id = id;
            }
        }
        out.push(best_id);
        if best_id == EOS {
            break;
        }
        prefix.push(best_id);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    ids: Vec<u32>,
    log_prob: f64,
}

impl Hypothesis {
    fn normalized(&self, alpha: f64) -> f64 {
        let len = self.ids.len().max(1) as f64;
        self.log_prob / ((5.0 + len) / 6.0).powf(alpha)
    }
}

fn better(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> std::cmp::Ordering {
    b.normalized(alpha)
        .partial_cmp(&a.normalized(alpha))
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search with the ((5+len)/6)^alpha length penalty. Finished
/// hypotheses compete against open ones on normalized score; ties break by
/// (score, token-id sequence), so beam = 1 with alpha = 0 reproduces greedy
/// decoding exactly.
pub fn beam_search(
    model: &ModelParameters,
    gate_override: Option<f64>,
    source: &[u32],
    contexts: &[Vec<u32>],
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<u32>, ModelError> {
    assert!(beam >= 1, "beam width must be at least 1");
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut tape = Tape::new();
    let (bound, memory) = encode_memory(&mut tape, model, gate_override, source, contexts)?;
    let cfg = model.config.transformer.clone();
    let mut dropout = Dropout::disabled();

    let mut open = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        if open.is_empty() {
            break;
        }
        let mut pool: Vec<Hypothesis> = Vec::new();
        for hyp in &open {
            let mut prefix = Vec::with_capacity(hyp.ids.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&hyp.ids);
            let logits =
                decode_logits(&mut tape, &prefix, &memory, &bound.decoder, &cfg, &mut dropout)?;
            let (rows, vocab) = tape.tensor(logits).rc();
            let row = &tape.data(logits)[(rows - 1) * vocab..rows * vocab];
            let log_probs = next_token_log_probs(row);
            for (id, &lp) in log_probs.iter().enumerate() {
                let id = id as u32;
                if id == PAD || id == BOS {
                    continue;
                }
                let mut ids = hyp.ids.clone();
                ids.push(id);
                let candidate = Hypothesis {
                    ids,
                    log_prob: hyp.log_prob + lp,
                };
                if id == EOS {
                    finished.push(candidate);
                } else {
                    pool.push(candidate);
                }
            }
        }
        pool.sort_by(|a, b| better(a, b, alpha));
        pool.truncate(beam);
        open = pool;
    }
    // hypotheses still open at max_len compete as they stand
    finished.extend(open);
    finished.sort_by(|a, b| better(a, b, alpha));
    Ok(finished.into_iter().next().expect("at least one hypothesis").ids)
}

/// Translate one document sentence by sentence, each with its own context
/// drawn from the document's source side.
pub fn translate_document(
    system: &TranslationSystem,
    sentences: &[String],
    opts: &DecodeOptions,
) -> Result<Vec<String>, InferError> {
    opts.validate(&system.model)?;
    let encoded: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| encode_sentence(s, &system.bpe, &system.vocab))
        .collect();
    let mut out = Vec::with_capacity(sentences.len());
    for pos in 0..encoded.len() {
        let contexts = document_context(&encoded, pos, opts.context_mode, opts.memory_size);
        let ids = if opts.beam == 1 && opts.alpha == 0.0 {
            greedy_decode(
                &system.model,
                opts.gate_override,
                &encoded[pos],
                &contexts,
                opts.max_len,
            )?
        } else {
            beam_search(
                &system.model,
                opts.gate_override,
                &encoded[pos],
                &contexts,
                opts.beam,
                opts.alpha,
                opts.max_len,
            )?
        };
        out.push(decode_sentence(&ids, &system.vocab));
    }
    Ok(out)
}

/// Previous/next source-side context within a single document.
pub fn document_context(
    encoded: &[Vec<u32>],
    pos: usize,
    mode: ContextMode,
    m: usize,
) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(m);
    match mode {
        ContextMode::Previous => {
            for offset in (1..=m).rev() {
                if pos >= offset {
                    out.push(encoded[pos - offset].clone());
                } else {
                    out.push(empty_context());
                }
            }
        }
        ContextMode::Next => {
            for offset in 1..=m {
                if pos + offset < encoded.len() {
                    out.push(encoded[pos + offset].clone());
                } else {
                    out.push(empty_context());
                }
            }
        }
        ContextMode::Random => unreachable!("validated before decoding"),
    }
    out
}

/// Translate a whole corpus of documents, optionally spreading documents
/// over worker threads. Output order always matches input order.
pub fn translate_corpus(
    system: &TranslationSystem,
    documents: &[Vec<String>],
    opts: &DecodeOptions,
    threads: usize,
) -> Result<Vec<Vec<String>>, InferError> {
    opts.validate(&system.model)?;
    if threads <= 1 || documents.len() <= 1 {
        return documents
            .iter()
            .map(|doc| translate_document(system, doc, opts))
            .collect();
    }
    let workers = threads.min(documents.len());
    let mut results: Vec<Option<Result<Vec<String>, InferError>>> =
        (0..documents.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= documents.len() {
                    break;
                }
                let translated = translate_document(system, &documents[i], opts);
                slots.lock().expect("worker panicked")[i] = Some(translated);
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every document translated"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MergeStrategy;
    use crate::model::ModelConfig;
    use crate::transformer::TransformerConfig;

    fn tiny_model(memory_size: usize) -> ModelParameters {
        ModelParameters::init(
            ModelConfig {
                transformer: TransformerConfig {
                    num_layers: 1,
                    model_dim: 8,
                    num_heads: 2,
                    ffn_dim: 16,
                    dropout_p: 0.0,
                    max_positions: 32,
                },
                vocab_size: 9,
                memory_size,
                merge: MergeStrategy::Average,
            },
            21,
        )
        .unwrap()
    }

    #[test]
    fn max_len_one_emits_a_single_token() {
        let model = tiny_model(0);
        let out = greedy_decode(&model, None, &[4, 5, EOS], &[], 1).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn greedy_never_emits_pad_or_bos_and_ends_at_eos() {
        let model = tiny_model(0);
        let out = greedy_decode(&model, None, &[4, 5, 6, EOS], &[], 16).unwrap();
        assert!(out.iter().all(|&id| id != PAD && id != BOS));
        let eos_count = out.iter().filter(|&&id| id == EOS).count();
        assert!(eos_count <= 1);
        if eos_count == 1 {
            assert_eq!(*out.last().unwrap(), EOS);
        }
    }

    #[test]
    fn beam_one_alpha_zero_equals_greedy() {
        let model = tiny_model(2);
        let source = vec![4, 7, 5, EOS];
        let contexts = vec![vec![6, EOS], vec![8, EOS]];
        let greedy = greedy_decode(&model, None, &source, &contexts, 12).unwrap();
        let beam = beam_search(&model, None, &source, &contexts, 1, 0.0, 12).unwrap();
        assert_eq!(greedy, beam);
    }

    #[test]
    fn full_width_beam_matches_exhaustive_search_on_two_steps() {
        let model = tiny_model(0);
        let source = vec![4, 5, EOS];
        let vocab = 9u32;
        let max_len = 2;
        let beam = beam_search(&model, None, &source, &[], vocab as usize, 0.0, max_len).unwrap();

        // exhaustive oracle over all sequences of length <= 2
        let score_of = |ids: &[u32]| -> f64 {
            let mut tape = Tape::new();
            let (bound, memory) = encode_memory(&mut tape, &model, None, &source, &[]).unwrap();
            let cfg = model.config.transformer.clone();
            let mut dropout = Dropout::disabled();
            let mut log_prob = 0.0;
            let mut prefix = vec![BOS];
            for &id in ids {
                let logits =
                    decode_logits(&mut tape, &prefix, &memory, &bound.decoder, &cfg, &mut dropout)
                        .unwrap();
                let (rows, v) = tape.tensor(logits).rc();
                let row = &tape.data(logits)[(rows - 1) * v..rows * v];
                log_prob += next_token_log_probs(row)[id as usize];
                prefix.push(id);
            }
            log_prob
        };
        let mut best: Option<(f64, Vec<u32>)> = None;
        let mut consider = |ids: Vec<u32>| {
            let s = score_of(&ids);
            let replace = match &best {
                None => true,
                Some((bs, bids)) => s > *bs || (s == *bs && ids < *bids),
            };
            if replace {
                best = Some((s, ids));
            }
        };
        for t1 in 2..vocab {
            if t1 == EOS {
                consider(vec![EOS]);
                continue;
            }
            for t2 in 2..vocab {
                consider(vec![t1, t2]);
            }
        }
        assert_eq!(beam, best.unwrap().1);
    }

    #[test]
    fn beam_score_at_least_greedy_score() {
        let model = tiny_model(0);
        let source = vec![6, 4, EOS];
        let greedy = greedy_decode(&model, None, &source, &[], 10).unwrap();
        let wide = beam_search(&model, None, &source, &[], 4, 0.0, 10).unwrap();
        // scores under alpha = 0 are raw log probs; recompute both
        let score_of = |ids: &[u32]| -> f64 {
            let mut tape = Tape::new();
            let (bound, memory) = encode_memory(&mut tape, &model, None, &source, &[]).unwrap();
            let cfg = model.config.transformer.clone();
            let mut dropout = Dropout::disabled();
            let mut log_prob = 0.0;
            let mut prefix = vec![BOS];
            for &id in ids {
                let logits =
                    decode_logits(&mut tape, &prefix, &memory, &bound.decoder, &cfg, &mut dropout)
                        .unwrap();
                let (rows, v) = tape.tensor(logits).rc();
                let row = &tape.data(logits)[(rows - 1) * v..rows * v];
                log_prob += next_token_log_probs(row)[id as usize];
                prefix.push(id);
            }
            log_prob
        };
        assert!(score_of(&wide) >= score_of(&greedy) - 1e-12);
    }

    #[test]
    fn random_context_mode_is_rejected() {
        let model = tiny_model(2);
        let opts = DecodeOptions {
            beam: 1,
            alpha: 0.0,
            max_len: 8,
            memory_size: 2,
            context_mode: ContextMode::Random,
            gate_override: None,
        };
        assert!(matches!(
            opts.validate(&model),
            Err(InferError::RandomContextAtInference)
        ));
    }

    #[test]
    fn memory_size_beyond_capacity_is_rejected() {
        let model = tiny_model(2);
        let opts = DecodeOptions {
            beam: 1,
            alpha: 0.0,
            max_len: 8,
            memory_size: 3,
            context_mode: ContextMode::Previous,
            gate_override: None,
        };
        assert!(matches!(
            opts.validate(&model),
            Err(InferError::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn memoryless_documents_decode_sentence_independently() {
        use crate::config::RunConfig;
        use crate::rnn::{RnnCore, RnnDirection};
        use crate::text::BpeModel;
        use crate::text::Vocabulary;

        let lines = vec!["aa bb cc".to_string(), "dd ee".to_string()];
        let bpe = BpeModel::train(&lines, 6).unwrap();
        let vocab = Vocabulary::new(bpe.corpus_symbols(&lines)).unwrap();
        let config = RunConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            label_smoothing: 0.1,
            warmup_steps: 10,
            train_steps: 1,
            batch_tokens: 64,
            memory_size: 0,
            context_mode: ContextMode::Previous,
            merge_kind: "average".to_string(),
            rnn_core: RnnCore::Rnn,
            rnn_direction: RnnDirection::Forward,
            seed: 3,
            bpe_merges: 6,
            checkpoint_every: 1,
            grad_clip: 0.0,
            max_positions: 32,
            gate_override: None,
        };
        let model =
            crate::model::ModelParameters::init(config.model_config(vocab.len()), 3).unwrap();
        let system = crate::training::TranslationSystem {
            config,
            model,
            bpe,
            vocab,
        };
        let opts = DecodeOptions {
            beam: 1,
            alpha: 0.0,
            max_len: 8,
            memory_size: 0,
            context_mode: ContextMode::Previous,
            gate_override: None,
        };
        let doc = vec!["aa bb".to_string(), "dd ee".to_string(), "cc".to_string()];
        let together = translate_document(&system, &doc, &opts).unwrap();
        for (i, sentence) in doc.iter().enumerate() {
            let alone = translate_document(&system, std::slice::from_ref(sentence), &opts).unwrap();
            assert_eq!(alone[0], together[i], "sentence {i} depended on its document");
        }
    }

    #[test]
    fn document_context_previous_and_next() {
        let encoded = vec![vec![4, EOS], vec![5, EOS], vec![6, EOS]];
        let prev = document_context(&encoded, 2, ContextMode::Previous, 3);
        assert_eq!(prev, vec![vec![EOS], vec![4, EOS], vec![5, EOS]]);
        let next = document_context(&encoded, 1, ContextMode::Next, 2);
        assert_eq!(next, vec![vec![6, EOS], vec![EOS]]);
    }
}
