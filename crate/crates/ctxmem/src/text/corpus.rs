//! Parallel corpora with document boundaries and context-sentence selection.
//!
//! File format: UTF-8, one sentence per line, a blank line marks a document
//! boundary. Parallel files must carry the boundary at the same line
//! positions; trailing blank lines are ignored.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix_seed, read_to_string, BpeModel, TextError, Vocabulary, EOS};

#[derive(Debug, Clone)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct Document {
    pub sentences: Vec<SentencePair>,
}

/// Encoded parallel corpus; a sentence is addressed by (document index,
/// position in document).
#[derive(Debug, Clone, Default)]
pub struct DocumentCorpus {
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    Previous,
    Next,
    Random,
}

impl ContextMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "previous" => Some(ContextMode::Previous),
            "next" => Some(ContextMode::Next),
            "random" => Some(ContextMode::Random),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContextMode::Previous => "previous",
            ContextMode::Next => "next",
            ContextMode::Random => "random",
        }
    }
}

impl DocumentCorpus {
    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }

    pub fn pair(&self, doc: usize, pos: usize) -> &SentencePair {
        &self.documents[doc].sentences[pos]
    }
}

/// Split one side of the corpus format into documents of raw sentences.
pub fn parse_documents(body: &str) -> Vec<Vec<String>> {
    let mut docs: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// Load a single-side document file (used for translation input).
pub fn load_documents(path: &str) -> Result<Vec<Vec<String>>, TextError> {
    Ok(parse_documents(&read_to_string(path)?))
}

/// Load an aligned pair of document files as raw sentence pairs, validating
/// that blank-line boundaries sit at identical line positions.
pub fn load_parallel_text(
    source_path: &str,
    target_path: &str,
) -> Result<Vec<Vec<(String, String)>>, TextError> {
    let src_body = read_to_string(source_path)?;
    let tgt_body = read_to_string(target_path)?;
    let src_lines: Vec<&str> = src_body.lines().collect();
    let tgt_lines: Vec<&str> = tgt_body.lines().collect();

    // Trailing blank lines are ignored on both sides.
    let trimmed = |lines: &[&str]| -> usize {
        let mut n = lines.len();
        while n > 0 && lines[n - 1].trim().is_empty() {
            n -= 1;
        }
        n
    };
    let src_len = trimmed(&src_lines);
    let tgt_len = trimmed(&tgt_lines);
    if src_len != tgt_len {
        return Err(TextError::LineCountMismatch {
            line: src_len.min(tgt_len) + 1,
        });
    }

    let mut docs: Vec<Vec<(String, String)>> = Vec::new();
    let mut current: Vec<(String, String)> = Vec::new();
    for i in 0..src_len {
        let src_blank = src_lines[i].trim().is_empty();
        let tgt_blank = tgt_lines[i].trim().is_empty();
        if src_blank != tgt_blank {
            return Err(TextError::BoundaryMismatch { line: i + 1 });
        }
        if src_blank {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push((src_lines[i].to_string(), tgt_lines[i].to_string()));
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    if docs.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    Ok(docs)
}

/// Segment a sentence into subwords and map to ids, appending EOS. Unknown
/// symbols map to UNK; BOS is never included here.
pub fn encode_sentence(sentence: &str, bpe: &BpeModel, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids: Vec<u32> = bpe
        .segment_sentence(sentence)
        .iter()
        .map(|sym| vocab.id(sym))
        .collect();
    ids.push(EOS);
    ids
}

/// Turn decoded ids back into text: drop reserved ids, join subwords.
pub fn decode_sentence(ids: &[u32], vocab: &Vocabulary) -> String {
    let symbols: Vec<String> = ids
        .iter()
        .filter(|&&id| id > 3 || id == super::UNK)
        .map(|&id| vocab.token(id).to_string())
        .collect();
    BpeModel::join(&symbols)
}

/// Load and encode an aligned document corpus.
pub fn load_corpus(
    source_path: &str,
    target_path: &str,
    bpe: &BpeModel,
    vocab: &Vocabulary,
) -> Result<DocumentCorpus, TextError> {
    let raw = load_parallel_text(source_path, target_path)?;
    Ok(encode_corpus(&raw, bpe, vocab))
}

pub fn encode_corpus(
    raw: &[Vec<(String, String)>],
    bpe: &BpeModel,
    vocab: &Vocabulary,
) -> DocumentCorpus {
    DocumentCorpus {
        documents: raw
            .iter()
            .map(|doc| Document {
                sentences: doc
                    .iter()
                    .map(|(s, t)| SentencePair {
                        source: encode_sentence(s, bpe, vocab),
                        target: encode_sentence(t, bpe, vocab),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// The empty context sentence used to fill slots beyond document bounds.
pub fn empty_context() -> Vec<u32> {
    vec![EOS]
}

/// Pick `m` source-side context sentences for the sentence at (doc, pos).
///
/// `previous` returns positions pos-m..pos-1 in document order and `next`
/// returns pos+1..pos+m; slots outside the document are the empty sentence.
/// `random` draws uniformly without replacement from the whole corpus
/// excluding the current sentence, deterministically under `seed`.
pub fn select_context(
    corpus: &DocumentCorpus,
    doc: usize,
    pos: usize,
    mode: ContextMode,
    m: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    let sentences = &corpus.documents[doc].sentences;
    let mut out = Vec::with_capacity(m);
    match mode {
        ContextMode::Previous => {
            for offset in (1..=m).rev() {
                if pos >= offset {
                    out.push(sentences[pos - offset].source.clone());
                } else {
                    out.push(empty_context());
                }
            }
        }
        ContextMode::Next => {
            for offset in 1..=m {
                if pos + offset < sentences.len() {
                    out.push(sentences[pos + offset].source.clone());
                } else {
                    out.push(empty_context());
                }
            }
        }
        ContextMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, doc as u64, pos as u64));
            let flat: Vec<(usize, usize)> = corpus
                .documents
                .iter()
                .enumerate()
                .flat_map(|(d, document)| {
                    (0..document.sentences.len()).map(move |p| (d, p))
                })
                .collect();
            let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(m);
            let available = flat.len().saturating_sub(1);
            while chosen.len() < m.min(available) {
                let candidate = flat[rng.gen_range(0..flat.len())];
                if candidate == (doc, pos) || chosen.contains(&candidate) {
                    continue;
                }
                chosen.push(candidate);
            }
            for (d, p) in &chosen {
                out.push(corpus.documents[*d].sentences[*p].source.clone());
            }
            while out.len() < m {
                out.push(empty_context());
            }
        }
    }
    out
}
