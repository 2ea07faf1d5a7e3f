//! Token-budget batching with padding masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix64, select_context, ContextMode, DocumentCorpus, PAD};

/// A padded batch. Masks are `true` exactly at PAD positions; true lengths
/// are kept alongside so unmasked positions reconstruct the original ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub items: usize,
    pub m: usize,
    pub s_max: usize,
    pub t_max: usize,
    pub k_max: usize,
    /// items x s_max
    pub src: Vec<u32>,
    pub src_mask: Vec<bool>,
    /// items x t_max
    pub tgt: Vec<u32>,
    pub tgt_mask: Vec<bool>,
    /// items x m x k_max
    pub ctx: Vec<u32>,
    pub ctx_mask: Vec<bool>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    /// items x m
    pub ctx_lens: Vec<usize>,
    /// (document, position) provenance per item
    pub origins: Vec<(usize, usize)>,
}

impl Batch {
    pub fn source(&self, item: usize) -> &[u32] {
        &self.src[item * self.s_max..item * self.s_max + self.src_lens[item]]
    }

    pub fn target(&self, item: usize) -> &[u32] {
        &self.tgt[item * self.t_max..item * self.t_max + self.tgt_lens[item]]
    }

    pub fn context(&self, item: usize, j: usize) -> &[u32] {
        let base = (item * self.m + j) * self.k_max;
        &self.ctx[base..base + self.ctx_lens[item * self.m + j]]
    }

    pub fn source_tokens(&self) -> usize {
        self.src_lens.iter().sum()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

/// Build deterministic length-bucketed batches under a source-token budget.
///
/// Sentences longer than the budget are skipped with a warning on stderr.
/// The same (corpus, mode, m, max_tokens, seed) always yields the same batch
/// sequence; context sentences travel with their sentence.
pub fn make_batches(
    corpus: &DocumentCorpus,
    mode: ContextMode,
    m: usize,
    max_tokens: usize,
    seed: u64,
) -> Vec<Batch> {
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (d, doc) in corpus.documents.iter().enumerate() {
        for p in 0..doc.sentences.len() {
            entries.push((d, p));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
    entries.shuffle(&mut rng);
    // stable sort by source length buckets similar lengths together while
    // keeping the shuffled order within a length
    entries.sort_by_key(|&(d, p)| corpus.pair(d, p).source.len());

    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut current: Vec<(usize, usize)> = Vec::new();
    let mut current_tokens = 0usize;
    for &(d, p) in &entries {
        let len = corpus.pair(d, p).source.len();
        if len > max_tokens {
            eprintln!(
                "warning: skipping sentence at document {d} position {p}: \
                 {len} tokens exceeds the batch budget of {max_tokens}"
            );
            continue;
        }
        if current_tokens + len > max_tokens && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current.push((d, p));
        current_tokens += len;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);

    groups
        .into_iter()
        .map(|group| build_batch(corpus, &group, mode, m, seed))
        .collect()
}

fn build_batch(
    corpus: &DocumentCorpus,
    group: &[(usize, usize)],
    mode: ContextMode,
    m: usize,
    seed: u64,
) -> Batch {
    let items = group.len();
    let contexts: Vec<Vec<Vec<u32>>> = group
        .iter()
        .map(|&(d, p)| select_context(corpus, d, p, mode, m, seed))
        .collect();

    let s_max = group
        .iter()
        .map(|&(d, p)| corpus.pair(d, p).source.len())
        .max()
        .unwrap_or(1);
    let t_max = group
        .iter()
        .map(|&(d, p)| corpus.pair(d, p).target.len())
        .max()
        .unwrap_or(1);
    let k_max = contexts
        .iter()
        .flat_map(|ctx| ctx.iter().map(|c| c.len()))
        .max()
        .unwrap_or(1)
        .max(1);

    let mut batch = Batch {
        items,
        m,
        s_max,
        t_max,
        k_max,
        src: vec![PAD; items * s_max],
        src_mask: vec![true; items * s_max],
        tgt: vec![PAD; items * t_max],
        tgt_mask: vec![true; items * t_max],
        ctx: vec![PAD; items * m * k_max],
        ctx_mask: vec![true; items * m * k_max],
        src_lens: Vec::with_capacity(items),
        tgt_lens: Vec::with_capacity(items),
        ctx_lens: Vec::with_capacity(items * m),
        origins: group.to_vec(),
    };

    for (i, &(d, p)) in group.iter().enumerate() {
        let pair = corpus.pair(d, p);
        batch.src_lens.push(pair.source.len());
        batch.tgt_lens.push(pair.target.len());
        for (j, &id) in pair.source.iter().enumerate() {
            batch.src[i * s_max + j] = id;
            batch.src_mask[i * s_max + j] = false;
        }
        for (j, &id) in pair.target.iter().enumerate() {
            batch.tgt[i * t_max + j] = id;
            batch.tgt_mask[i * t_max + j] = false;
        }
        for (j, ctx) in contexts[i].iter().enumerate() {
            batch.ctx_lens.push(ctx.len());
            let base = (i * m + j) * k_max;
            for (k, &id) in ctx.iter().enumerate() {
                batch.ctx[base + k] = id;
                batch.ctx_mask[base + k] = false;
            }
        }
    }
    batch
}
