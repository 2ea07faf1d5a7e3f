//! Synthetic document corpora shared by the integration tests.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxmem::config::RunConfig;
use ctxmem::rnn::{RnnCore, RnnDirection};
use ctxmem::text::ContextMode;

/// Raw parallel documents: (source sentences, target sentences).
pub type RawDocs = Vec<Vec<(String, String)>>;

/// A word-for-word translatable corpus for overfit tests: each source word
/// `w<k>` maps deterministically to target word `t<k>`.
pub fn copy_corpus(documents: usize, sentences_per_doc: usize, seed: u64) -> RawDocs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<usize> = (0..18).collect();
    (0..documents)
        .map(|_| {
            (0..sentences_per_doc)
                .map(|_| {
                    let len = rng.gen_range(3..=6);
                    let words: Vec<usize> =
                        (0..len).map(|_| *vocab.choose(&mut rng).unwrap()).collect();
                    let src: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
                    let tgt: Vec<String> = words.iter().map(|w| format!("t{w}")).collect();
                    (src.join(" "), tgt.join(" "))
                })
                .collect()
        })
        .collect()
}

/// Sense-disambiguation corpus: each two-sentence document opens with a
/// marker sentence and ends with a fixed ambiguous sentence whose correct
/// translation is decided solely by the marker. The marker sentence's
/// translation also carries the sense word, so consistent translations
/// echo their context.
///
/// Document (sense X in {a, b}, filler k):
///   s1: "markerX fillk pad"      -> "flagX senseX padt"
///   s2: "amb query"              -> "senseX out"
///
/// Every (sense, filler) combination appears equally often, so the
/// sentence-only distribution of s2 carries no sense information at all.
pub fn sense_corpus(docs_per_cell: usize, fillers: usize, seed: u64) -> RawDocs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs: RawDocs = Vec::new();
    for sense in ["a", "b"] {
        for filler in 0..fillers {
            for _ in 0..docs_per_cell {
                let s1_src = format!("marker{sense} fill{filler} pad");
                let s1_tgt = format!("flag{sense} sense{sense} padt");
                let s2_src = "amb query".to_string();
                let s2_tgt = format!("sense{sense} out");
                docs.push(vec![(s1_src, s1_tgt), (s2_src, s2_tgt)]);
            }
        }
    }
    docs.shuffle(&mut rng);
    docs
}

/// Write documents to a pair of corpus files and return the two paths.
pub fn write_corpus(dir: &std::path::Path, stem: &str, docs: &RawDocs) -> (String, String) {
    let mut src = String::new();
    let mut tgt = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            src.push('\n');
            tgt.push('\n');
        }
        for (s, t) in doc {
            src.push_str(s);
            src.push('\n');
            tgt.push_str(t);
            tgt.push('\n');
        }
    }
    let src_path = dir.join(format!("{stem}.src"));
    let tgt_path = dir.join(format!("{stem}.tgt"));
    std::fs::write(&src_path, src).unwrap();
    std::fs::write(&tgt_path, tgt).unwrap();
    (
        src_path.to_str().unwrap().to_string(),
        tgt_path.to_str().unwrap().to_string(),
    )
}

pub fn source_documents(docs: &RawDocs) -> Vec<Vec<String>> {
    docs.iter()
        .map(|d| d.iter().map(|(s, _)| s.clone()).collect())
        .collect()
}

pub fn target_documents(docs: &RawDocs) -> Vec<Vec<String>> {
    docs.iter()
        .map(|d| d.iter().map(|(_, t)| t.clone()).collect())
        .collect()
}

/// Joint source+target sentence list (the BPE training input).
pub fn all_lines(docs: &RawDocs) -> Vec<String> {
    docs.iter()
        .flatten()
        .flat_map(|(s, t)| [s.clone(), t.clone()])
        .collect()
}

/// Baseline run configuration for desk-scale experiments.
pub fn toy_config(memory_size: usize, merge: &str) -> RunConfig {
    RunConfig {
        num_layers: 2,
        model_dim: 64,
        num_heads: 4,
        ffn_dim: 128,
        dropout: 0.0,
        label_smoothing: 0.1,
        warmup_steps: 200,
        train_steps: 3000,
        batch_tokens: 160,
        memory_size,
        context_mode: ContextMode::Previous,
        merge_kind: merge.to_string(),
        rnn_core: RnnCore::Rnn,
        rnn_direction: RnnDirection::Forward,
        seed: 1234,
        bpe_merges: 40,
        checkpoint_every: 3000,
        grad_clip: 0.0,
        max_positions: 64,
        gate_override: None,
    }
}
