//! BLEU and the document-level analysis metrics (consistency,
//! disambiguation, coherence), plus ablation sweeps over trained models.

use std::collections::{HashMap, HashSet};

use thiserror::Error;
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::inference::{translate_corpus, DecodeOptions, InferError};
use crate::text::{ContextMode, Vocabulary, UNK};
use crate::training::TranslationSystem;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no candidate sentences to score")]
    EmptyInput,
    #[error("candidate and reference counts differ: {candidates} vs {references}")]
    CountMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("metric resource missing: {what}")]
    MissingResource { what: String },
    #[error("no document has two or more sentences")]
    NoConsecutivePairs,
    #[error("{kind} sweeps need a trained checkpoint per grid point")]
    NeedsRetraining { kind: String },
    #[error("grid has {grid} points but {systems} checkpoints were given")]
    GridSystemsMismatch { grid: usize, systems: usize },
    #[error("checkpoint for grid point {setting:?} was trained with {actual:?}")]
    WrongCheckpoint { setting: String, actual: String },
    #[error("bad grid value {value:?} for a {kind} sweep")]
    BadGridValue { kind: String, value: String },
    #[error(transparent)]
    Infer(#[from] InferError),
}

// ── BLEU ────────────────────────────────────────────────────────────────

/// Corpus-level BLEU-4 on whitespace tokens: geometric mean of clipped
/// n-gram precisions with the brevity penalty exp(1 - r/c) for c < r; 0 if
/// any precision is 0. Orders with no candidate n-grams at all (corpus
/// shorter than n) are vacuously satisfied so that identity still scores
/// exactly 100.
pub fn bleu(candidates: &[String], references: &[String]) -> Result<f64, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, reference) in candidates.iter().zip(references) {
        let c: Vec<&str> = cand.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        cand_len += c.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=4usize {
            if c.len() + 1 > n {
                totals[n - 1] += (c.len() + 1 - n) as u64;
            }
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            if r.len() + 1 > n {
                for gram in r.windows(n) {
                    *ref_counts.entry(gram).or_insert(0) += 1;
                }
            }
            let mut cand_counts: HashMap<&[&str], u64> = HashMap::new();
            if c.len() + 1 > n {
                for gram in c.windows(n) {
                    *cand_counts.entry(gram).or_insert(0) += 1;
                }
            }
            for (gram, count) in cand_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
        }
    }

    if cand_len == 0 {
        return Ok(if ref_len == 0 { 100.0 } else { 0.0 });
    }
    let mut log_precision_sum = 0.0;
    for n in 0..4 {
        if totals[n] == 0 {
            continue; // vacuous order
        }
        if matches[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let brevity = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision_sum / 4.0).exp())
}

// ── consistency ─────────────────────────────────────────────────────────

/// A token is dropped by the metric filters when it is punctuation-only, a
/// stopword, or the UNK rendering.
fn keep_token(token: &str, stopwords: &HashSet<String>, unk_token: &str) -> bool {
    if token == unk_token || stopwords.contains(token) {
        return false;
    }
    !token
        .chars()
        .all(|c| c.general_category_group() == GeneralCategoryGroup::Punctuation)
}

/// Mean count of (filtered) words per sentence that also occur in the
/// m-sentence window of the same document on the same text side. Sentences
/// whose window is empty (document edges) contribute zero.
pub fn consistency(
    documents: &[Vec<String>],
    window: ContextMode,
    m: usize,
    stopwords: &HashSet<String>,
    unk_token: &str,
) -> Result<f64, EvalError> {
    assert!(
        window != ContextMode::Random,
        "consistency windows are previous or next"
    );
    let mut total = 0u64;
    let mut sentences = 0u64;
    for doc in documents {
        for (pos, sentence) in doc.iter().enumerate() {
            sentences += 1;
            let mut window_tokens: HashSet<&str> = HashSet::new();
            let range: Vec<usize> = match window {
                ContextMode::Previous => (pos.saturating_sub(m)..pos).collect(),
                ContextMode::Next => (pos + 1..(pos + 1 + m).min(doc.len())).collect(),
                ContextMode::Random => unreachable!(),
            };
            for &w in &range {
                for token in doc[w].split_whitespace() {
                    if keep_token(token, stopwords, unk_token) {
                        window_tokens.insert(token);
                    }
                }
            }
            for token in sentence.split_whitespace() {
                if keep_token(token, stopwords, unk_token) && window_tokens.contains(token) {
                    total += 1;
                }
            }
        }
    }
    if sentences == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok(total as f64 / sentences as f64)
}

// ── disambiguation ──────────────────────────────────────────────────────

/// Dictionary of ambiguous source words: word -> candidate translations.
pub type AmbiguityDict = Vec<(String, Vec<String>)>;

/// Parse `source_word<TAB>cand1,cand2,...` lines; entries with fewer than
/// two candidates are skipped with a warning.
pub fn parse_dict(body: &str) -> AmbiguityDict {
    let mut dict = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((word, cands)) = line.split_once('\t') else {
            eprintln!("warning: dictionary line {}: no tab separator, skipped", i + 1);
            continue;
        };
        let candidates: Vec<String> = cands
            .split(',')
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect();
        if candidates.len() < 2 {
            eprintln!(
                "warning: dictionary entry {:?} has fewer than two candidates, skipped",
                word
            );
            continue;
        }
        dict.push((word.trim().to_string(), candidates));
    }
    dict
}

/// Population standard deviation of the pooled per-candidate translation
/// counts for every dictionary source word that occurs in the sources.
/// Lower means usage spread more evenly over the candidate senses.
pub fn disambiguation(
    translations: &[String],
    sources: &[String],
    dict: &AmbiguityDict,
) -> Result<f64, EvalError> {
    if translations.len() != sources.len() {
        return Err(EvalError::CountMismatch {
            candidates: translations.len(),
            references: sources.len(),
        });
    }
    let mut pooled: Vec<u64> = Vec::new();
    for (word, candidates) in dict {
        let mut counts = vec![0u64; candidates.len()];
        let mut seen = false;
        for (src, hyp) in sources.iter().zip(translations) {
            if !src.split_whitespace().any(|t| t == word) {
                continue;
            }
            seen = true;
            for token in hyp.split_whitespace() {
                if let Some(i) = candidates.iter().position(|c| c == token) {
                    counts[i] += 1;
                }
            }
        }
        if seen {
            pooled.extend(counts);
        }
    }
    if pooled.is_empty() {
        return Ok(0.0);
    }
    let mean = pooled.iter().sum::<u64>() as f64 / pooled.len() as f64;
    let var = pooled
        .iter()
        .map(|&c| (c as f64 - mean) * (c as f64 - mean))
        .sum::<f64>()
        / pooled.len() as f64;
    Ok(var.sqrt())
}

// ── coherence ───────────────────────────────────────────────────────────

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Mean cosine similarity of consecutive sentence vectors within each
/// document, averaged over documents. A sentence vector is the mean of its
/// word vectors; single-sentence documents are skipped with a warning.
pub fn coherence<F>(documents: &[Vec<String>], word_vector: F) -> Result<f64, EvalError>
where
    F: Fn(&str) -> Vec<f64>,
{
    let sentence_vector = |sentence: &str| -> Vec<f64> {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if words.is_empty() {
            return Vec::new();
        }
        let mut acc = word_vector(words[0]);
        for w in &words[1..] {
            for (a, v) in acc.iter_mut().zip(word_vector(w)) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= words.len() as f64;
        }
        acc
    };

    let mut doc_scores = Vec::new();
    for (i, doc) in documents.iter().enumerate() {
        if doc.len() < 2 {
            eprintln!("warning: document {i} has a single sentence, skipped for coherence");
            continue;
        }
        let vectors: Vec<Vec<f64>> = doc.iter().map(|s| sentence_vector(s)).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for w in vectors.windows(2) {
            if w[0].is_empty() || w[1].is_empty() {
                continue;
            }
            total += cosine(&w[0], &w[1]);
            pairs += 1;
        }
        if pairs > 0 {
            doc_scores.push(total / pairs as f64);
        }
    }
    if doc_scores.is_empty() {
        return Err(EvalError::NoConsecutivePairs);
    }
    Ok(doc_scores.iter().sum::<f64>() / doc_scores.len() as f64)
}

/// Word embedder backed by a trained model's target embedding table: a word
/// is segmented into subwords and embedded as the mean of their rows, with
/// unknown subwords falling back to the UNK row.
pub fn model_word_embedder<'a>(
    system: &'a TranslationSystem,
) -> impl Fn(&str) -> Vec<f64> + 'a {
    let table = system.model.store.get(system.model.tgt_embed);
    let dim = table.shape[1];
    move |word: &str| {
        let symbols = system.bpe.segment_word(word);
        let mut acc = vec![0.0; dim];
        for sym in &symbols {
            let id = system.vocab.id(sym) as usize;
            let row = &table.value[id * dim..(id + 1) * dim];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= symbols.len().max(1) as f64;
        }
        acc
    }
}

/// The UNK rendering used when decoded output is compared textually.
pub fn unk_token(vocab: &Vocabulary) -> String {
    vocab.token(UNK).to_string()
}

// ── report ──────────────────────────────────────────────────────────────

#[derive(Debug, Default, Clone)]
pub struct ReportMetadata {
    pub window_mode: Option<String>,
    pub window_size: Option<usize>,
    pub stopwords_path: Option<String>,
    pub dict_path: Option<String>,
    pub checkpoint_path: Option<String>,
    pub source_path: Option<String>,
}

/// Scores plus the exact filtering setup that produced them.
#[derive(Debug, Default, Clone)]
pub struct EvaluationReport {
    pub bleu: Option<f64>,
    pub consistency: Option<f64>,
    pub disambiguation_std: Option<f64>,
    pub coherence: Option<f64>,
    pub metadata: ReportMetadata,
}

impl EvaluationReport {
    /// Deterministic JSON rendering (fixed key order, `null` for absent).
    pub fn to_json(&self) -> String {
        let num = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "null".to_string(),
        };
        let text = |v: &Option<String>| match v {
            Some(s) => format!("{s:?}"),
            None => "null".to_string(),
        };
        let size = |v: &Option<usize>| match v {
            Some(s) => s.to_string(),
            None => "null".to_string(),
        };
        format!(
            "{{\"bleu\": {}, \"consistency\": {}, \"disambiguation_std\": {}, \
             \"coherence\": {}, \"metadata\": {{\"window_mode\": {}, \"window_size\": {}, \
             \"stopwords\": {}, \"dict\": {}, \"checkpoint\": {}, \"source\": {}}}}}",
            num(&self.bleu),
            num(&self.consistency),
            num(&self.disambiguation_std),
            num(&self.coherence),
            text(&self.metadata.window_mode),
            size(&self.metadata.window_size),
            text(&self.metadata.stopwords_path),
            text(&self.metadata.dict_path),
            text(&self.metadata.checkpoint_path),
            text(&self.metadata.source_path),
        )
    }
}

// ── ablation sweeps ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    GateConstant,
    MemorySize,
    ContextMode,
    MergeStrategy,
    RnnCore,
}

impl AblationKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gate_constant" => Some(AblationKind::GateConstant),
            "memory_size" => Some(AblationKind::MemorySize),
            "context_mode" => Some(AblationKind::ContextMode),
            "merge_strategy" => Some(AblationKind::MergeStrategy),
            "rnn_core" => Some(AblationKind::RnnCore),
        _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::GateConstant => "gate_constant",
            AblationKind::MemorySize => "memory_size",
            AblationKind::ContextMode => "context_mode",
            AblationKind::MergeStrategy => "merge_strategy",
            AblationKind::RnnCore => "rnn_core",
        }
    }

    /// Whether one shared checkpoint may serve every grid point (the
    /// setting only changes evaluation-time behavior, not the trained
    /// parameter set).
    pub fn eval_time_only(&self) -> bool {
        matches!(
            self,
            AblationKind::GateConstant | AblationKind::MemorySize | AblationKind::ContextMode
        )
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub setting: String,
    pub bleu: f64,
    pub consistency: Option<f64>,
    pub disambiguation_std: Option<f64>,
    pub coherence: Option<f64>,
}

pub struct AblationInputs<'a> {
    pub source_documents: &'a [Vec<String>],
    pub reference_documents: &'a [Vec<String>],
    pub stopwords: Option<&'a HashSet<String>>,
    pub dict: Option<&'a AmbiguityDict>,
    pub metric_window: ContextMode,
    pub metric_m: usize,
    pub threads: usize,
}

/// Evaluate one grid of settings. `systems` holds either a single shared
/// checkpoint (legal only for evaluation-time settings) or one checkpoint
/// per grid point.
pub fn ablation_sweep(
    kind: AblationKind,
    grid: &[String],
    systems: &[TranslationSystem],
    base: &DecodeOptions,
    inputs: &AblationInputs,
) -> Result<Vec<AblationRow>, EvalError> {
    if systems.len() != 1 && systems.len() != grid.len() {
        return Err(EvalError::GridSystemsMismatch {
            grid: grid.len(),
            systems: systems.len(),
        });
    }
    if systems.len() == 1 && grid.len() > 1 && !kind.eval_time_only() {
        return Err(EvalError::NeedsRetraining {
            kind: kind.name().to_string(),
        });
    }

    let mut rows = Vec::with_capacity(grid.len());
    for (i, setting) in grid.iter().enumerate() {
        let system = if systems.len() == 1 {
            &systems[0]
        } else {
            &systems[i]
        };
        let mut opts = base.clone();
        opts.memory_size = opts.memory_size.min(system.config.memory_size);
        match kind {
            AblationKind::GateConstant => {
                let v: f64 = setting.parse().map_err(|_| EvalError::BadGridValue {
                    kind: kind.name().to_string(),
                    value: setting.clone(),
                })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(EvalError::BadGridValue {
                        kind: kind.name().to_string(),
                        value: setting.clone(),
                    });
                }
                opts.gate_override = Some(v);
                opts.memory_size = system.config.memory_size;
            }
            AblationKind::MemorySize => {
                let m: usize = setting.parse().map_err(|_| EvalError::BadGridValue {
                    kind: kind.name().to_string(),
                    value: setting.clone(),
                })?;
                opts.memory_size = m;
            }
            AblationKind::ContextMode => {
                let mode =
                    ContextMode::parse(setting).ok_or_else(|| EvalError::BadGridValue {
                        kind: kind.name().to_string(),
                        value: setting.clone(),
                    })?;
                opts.context_mode = mode;
                opts.memory_size = system.config.memory_size;
            }
            AblationKind::MergeStrategy => {
                if system.config.merge_kind != *setting {
                    return Err(EvalError::WrongCheckpoint {
                        setting: setting.clone(),
                        actual: system.config.merge_kind.clone(),
                    });
                }
            }
            AblationKind::RnnCore => {
                if system.config.rnn_core.name() != setting {
                    return Err(EvalError::WrongCheckpoint {
                        setting: setting.clone(),
                        actual: system.config.rnn_core.name().to_string(),
                    });
                }
            }
        }

        let translated = translate_corpus(system, inputs.source_documents, &opts, inputs.threads)?;
        let cand: Vec<String> = translated.iter().flatten().cloned().collect();
        let refs: Vec<String> = inputs
            .reference_documents
            .iter()
            .flatten()
            .cloned()
            .collect();
        let bleu_score = bleu(&cand, &refs)?;
        let consistency_score = match inputs.stopwords {
            Some(stopwords) => Some(consistency(
                &translated,
                inputs.metric_window,
                inputs.metric_m,
                stopwords,
                &unk_token(&system.vocab),
            )?),
            None => None,
        };
        let disambiguation_score = match inputs.dict {
            Some(dict) => {
                let sources: Vec<String> = inputs
                    .source_documents
                    .iter()
                    .flatten()
                    .cloned()
                    .collect();
                Some(disambiguation(&cand, &sources, dict)?)
            }
            None => None,
        };
        let coherence_score = coherence(&translated, model_word_embedder(system)).ok();
        rows.push(AblationRow {
            setting: setting.clone(),
            bleu: bleu_score,
            consistency: consistency_score,
            disambiguation_std: disambiguation_score,
            coherence: coherence_score,
        });
    }
    Ok(rows)
}

/// Render sweep rows as tab-separated values with a header line.
pub fn rows_to_tsv(kind: AblationKind, rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{}\tbleu\tconsistency\tdisambiguation_std\tcoherence\n",
        kind.name()
    ));
    let opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.6}"),
        None => "-".to_string(),
    };
    for row in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{}\t{}\t{}\n",
            row.setting,
            row.bleu,
            opt(row.consistency),
            opt(row.disambiguation_std),
            opt(row.coherence),
        ));
    }
    out
}
