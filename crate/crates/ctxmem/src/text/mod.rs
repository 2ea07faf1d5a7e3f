//! Corpus ingestion, subword tokenization, context selection and batching.

mod batch;
mod bpe;
mod corpus;
mod vocab;

pub use batch::{make_batches, Batch};
pub use corpus::{
    decode_sentence, empty_context, encode_corpus, encode_sentence, load_corpus, load_documents,
    load_parallel_text, parse_documents, select_context, ContextMode, Document, DocumentCorpus,
    SentencePair,
};
pub use bpe::{BpeModel, WORD_END};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parallel files disagree in length starting at line {line}")]
    LineCountMismatch { line: usize },
    #[error("document boundary mismatch at line {line}: blank on one side only")]
    BoundaryMismatch { line: usize },
    #[error("{path}:{line}: malformed {what}")]
    BadFormat {
        path: String,
        line: usize,
        what: String,
    },
    #[error("duplicate token {token:?} in vocabulary")]
    DuplicateToken { token: String },
}

pub(crate) fn read_to_string(path: &str) -> Result<String, TextError> {
    std::fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.to_string(),
        source,
    })
}

/// splitmix64 step; used to derive independent seeds from a base seed.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix64(seed ^ mix64(a ^ mix64(b)))
}
