//! The contextual associated memory network: encode the context sentences,
//! attend into each of them from the source sentence, merge the per-sentence
//! argument embeddings by a configurable strategy, and gate the result
//! against the source encoding.

use crate::rnn::{self, RnnCellVars, RnnCore, RnnDirection};
use crate::tensor::{Activation, Tape, Var};
use crate::transformer::{
    encode_source, encoder_block, embed_sequence, BlockVars, Dropout, EncodedSequence,
    EncoderVars, ModelError, TransformerConfig,
};

/// How the m argument embeddings reduce to one context embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeStrategy {
    Concatenation,
    Average,
    WeightedAverage,
    Flat,
    ContextualRnn {
        core: RnnCore,
        direction: RnnDirection,
    },
}

impl MergeStrategy {
    pub fn parse(kind: &str, core: RnnCore, direction: RnnDirection) -> Option<Self> {
        match kind {
            "concatenation" => Some(MergeStrategy::Concatenation),
            "average" => Some(MergeStrategy::Average),
            "weighted_average" => Some(MergeStrategy::WeightedAverage),
            "flat" => Some(MergeStrategy::Flat),
            "contextual_rnn" => Some(MergeStrategy::ContextualRnn { core, direction }),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            MergeStrategy::Concatenation => "concatenation",
            MergeStrategy::Average => "average",
            MergeStrategy::WeightedAverage => "weighted_average",
            MergeStrategy::Flat => "flat",
            MergeStrategy::ContextualRnn { .. } => "contextual_rnn",
        }
    }

    pub fn is_rnn(&self) -> bool {
        matches!(self, MergeStrategy::ContextualRnn { .. })
    }

    /// Whether the parameter set depends on the memory size m.
    pub fn params_depend_on_m(&self) -> bool {
        matches!(self, MergeStrategy::Concatenation)
    }
}

/// Learned gate blending the source encoding with the context encoding.
/// When `override_value` is set the learned projection is bypassed and the
/// gate equals the constant exactly.
pub struct ContextGateVars {
    pub w: Var,
    pub b: Var,
    pub override_value: Option<f64>,
}

/// Bound merge parameters; `Stateless` covers average, weighted average and
/// flat merging which carry no weights of their own.
#[allow(clippy::large_enum_variant)]
pub enum MergeVars {
    Stateless,
    Concat {
        proj: Var,
    },
    Rnn {
        forward: RnnCellVars,
        reverse: Option<RnnCellVars>,
        proj: Option<Var>,
        direction: RnnDirection,
    },
}

/// All bound memory-network parameters.
pub struct MemoryVars {
    pub ctx_block: BlockVars,
    pub gate_block: BlockVars,
    pub gate: ContextGateVars,
    pub merge: MergeVars,
    pub strategy: MergeStrategy,
}

/// Per-sentence attention state over the m context sentences.
pub struct ContextualMemory {
    /// c_j' states, one [K_j x d] per context sentence
    pub context_states: Vec<Var>,
    pub context_masks: Vec<Option<Vec<bool>>>,
    /// raw similarity x' c_j'^T, [S x K_j]
    pub raw_similarity: Vec<Var>,
    /// row-normalized similarity, rows sum to one over unmasked positions
    pub normalized: Vec<Var>,
    /// argument embeddings a_j, [S x d]
    pub argument_embeddings: Vec<Var>,
}

impl ContextualMemory {
    pub fn m(&self) -> usize {
        self.context_states.len()
    }

    /// Run inter-sentence attention from `x_enc` into every context state.
    pub fn build(
        tape: &mut Tape,
        x_enc: Var,
        context_states: &[Var],
        context_masks: &[Option<Vec<bool>>],
    ) -> Result<Self, ModelError> {
        assert_eq!(context_states.len(), context_masks.len());
        let mut memory = ContextualMemory {
            context_states: context_states.to_vec(),
            context_masks: context_masks.to_vec(),
            raw_similarity: Vec::with_capacity(context_states.len()),
            normalized: Vec::with_capacity(context_states.len()),
            argument_embeddings: Vec::with_capacity(context_states.len()),
        };
        for (state, mask) in context_states.iter().zip(context_masks) {
            let att = inter_sentence_attention(tape, x_enc, *state, mask.as_deref())?;
            memory.raw_similarity.push(att.raw);
            memory.normalized.push(att.normalized);
            memory.argument_embeddings.push(att.argument);
        }
        Ok(memory)
    }
}

pub struct InterSentenceAttention {
    pub raw: Var,
    pub normalized: Var,
    pub argument: Var,
}

/// Encode the source sentence and every context sentence with the shared
/// one-block context encoder (its parameters are distinct from the N-layer
/// source encoder). Inputs are embedded and position-encoded first.
pub fn encode_context(
    tape: &mut Tape,
    src_ids: &[u32],
    contexts: &[Vec<u32>],
    embed: Var,
    ctx_block: &BlockVars,
    cfg: &TransformerConfig,
    dropout: &mut Dropout,
) -> Result<(Var, Vec<Var>), ModelError> {
    let x = embed_sequence(tape, src_ids, embed, cfg, dropout)?;
    let x_enc = encoder_block(tape, x, None, ctx_block, cfg.num_heads, dropout)?;
    let mut ctx_encs = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let c = embed_sequence(tape, ctx, embed, cfg, dropout)?;
        ctx_encs.push(encoder_block(tape, c, None, ctx_block, cfg.num_heads, dropout)?);
    }
    Ok((x_enc, ctx_encs))
}

/// Raw similarity, its row-wise normalization over unmasked context
/// positions, and the argument embedding (one row per source position, each
/// a convex combination of context state rows).
pub fn inter_sentence_attention(
    tape: &mut Tape,
    x_enc: Var,
    ctx_enc: Var,
    ctx_mask: Option<&[bool]>,
) -> Result<InterSentenceAttention, ModelError> {
    let (s, _) = tape.tensor(x_enc).rc();
    let (k, _) = tape.tensor(ctx_enc).rc();
    let ct = tape.transpose(ctx_enc);
    let raw = tape.matmul(x_enc, ct)?;
    let full_mask: Option<Vec<bool>> = ctx_mask.map(|cm| {
        assert_eq!(cm.len(), k, "context mask length must match context length");
        let mut m = Vec::with_capacity(s * k);
        for _ in 0..s {
            m.extend_from_slice(cm);
        }
        m
    });
    let normalized = tape.softmax_rows_masked(raw, full_mask.as_deref());
    let argument = tape.matmul(normalized, ctx_enc)?;
    Ok(InterSentenceAttention {
        raw,
        normalized,
        argument,
    })
}

/// Merge by one of the strategies that is not the contextual RNN.
pub fn merge_contexts(
    tape: &mut Tape,
    memory: &ContextualMemory,
    strategy: MergeStrategy,
    concat_proj: Option<Var>,
) -> Result<Var, ModelError> {
    assert!(
        !strategy.is_rnn(),
        "contextual_rnn merging goes through merge_contextual_rnn"
    );
    let m = memory.m();
    assert!(m >= 1, "merging needs at least one context sentence");
    match strategy {
        MergeStrategy::Concatenation => {
            let proj = concat_proj.expect("concatenation merging needs its projection");
            let cat = tape.concat_cols(&memory.argument_embeddings)?;
            Ok(tape.matmul(cat, proj)?)
        }
        MergeStrategy::Average => {
            let mut acc = memory.argument_embeddings[0];
            for &a in &memory.argument_embeddings[1..] {
                acc = tape.add(acc, a)?;
            }
            Ok(tape.scale(acc, 1.0 / m as f64))
        }
        MergeStrategy::WeightedAverage => {
            // beta = softmax over j of the mean raw similarity
            let means: Vec<Var> = memory
                .raw_similarity
                .iter()
                .zip(&memory.context_masks)
                .map(|(&raw, mask)| {
                    let cell_mask = mask.as_ref().map(|cm| {
                        let (s, k) = tape.tensor(raw).rc();
                        assert_eq!(cm.len(), k);
                        let mut full = Vec::with_capacity(s * k);
                        for _ in 0..s {
                            full.extend_from_slice(cm);
                        }
                        full
                    });
                    tape.mean_masked(raw, cell_mask.as_deref())
                })
                .collect();
            let stacked = tape.concat_cols(&means)?;
            let beta = tape.softmax_rows(stacked);
            let mut out: Option<Var> = None;
            for (j, &a) in memory.argument_embeddings.iter().enumerate() {
                let beta_j = tape.slice_cols(beta, j, 1);
                let term = tape.scalar_mul(beta_j, a);
                out = Some(match out {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
            Ok(out.expect("at least one context"))
        }
        MergeStrategy::Flat => {
            // one softmax over the concatenation of all raw score rows,
            // then a weighted sum of the stacked context states
            let flat_raw = tape.concat_cols(&memory.raw_similarity)?;
            let (s, _) = tape.tensor(flat_raw).rc();
            let col_mask: Option<Vec<bool>> = if memory
                .context_masks
                .iter()
                .any(|m| m.is_some())
            {
                let mut cols = Vec::new();
                for (state, mask) in memory.context_states.iter().zip(&memory.context_masks) {
                    let (k, _) = tape.tensor(*state).rc();
                    match mask {
                        Some(cm) => cols.extend_from_slice(cm),
                        None => cols.extend(std::iter::repeat_n(false, k)),
                    }
                }
                Some(cols)
            } else {
                None
            };
            let full_mask = col_mask.map(|cols| {
                let mut full = Vec::with_capacity(s * cols.len());
                for _ in 0..s {
                    full.extend_from_slice(&cols);
                }
                full
            });
            let gamma = tape.softmax_rows_masked(flat_raw, full_mask.as_deref());
            let stacked = tape.concat_rows(&memory.context_states)?;
            Ok(tape.matmul(gamma, stacked)?)
        }
        MergeStrategy::ContextualRnn { .. } => unreachable!(),
    }
}

/// Merge by running a recurrent core over the memory index at every source
/// position; the final hidden state is the merged embedding. `backward`
/// reverses the order; `bidirectional` concatenates both final states and
/// projects back to d.
pub fn merge_contextual_rnn(
    tape: &mut Tape,
    memory: &ContextualMemory,
    forward: &RnnCellVars,
    reverse: Option<&RnnCellVars>,
    proj: Option<Var>,
    direction: RnnDirection,
) -> Result<Var, ModelError> {
    assert!(memory.m() >= 1, "merging needs at least one context sentence");
    let inputs = &memory.argument_embeddings;
    match direction {
        RnnDirection::Forward => rnn::run_final(tape, forward, inputs),
        RnnDirection::Backward => {
            let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
            rnn::run_final(tape, forward, &reversed)
        }
        RnnDirection::Bidirectional => {
            let fwd = rnn::run_final(tape, forward, inputs)?;
            let reversed: Vec<Var> = inputs.iter().rev().copied().collect();
            let bwd_cell = reverse.expect("bidirectional merging needs a reverse cell");
            let bwd = rnn::run_final(tape, bwd_cell, &reversed)?;
            let cat = tape.concat_cols(&[fwd, bwd])?;
            let proj = proj.expect("bidirectional merging needs its projection");
            Ok(tape.matmul(cat, proj)?)
        }
    }
}

/// Gated sum of the source and context encodings:
/// g = sigmoid(W [H_source, H_context] + b); H = g * H_source + (1 - g) * H_context.
/// With an override the constant replaces g exactly; the endpoints pass one
/// side through untouched.
pub fn context_gate(
    tape: &mut Tape,
    h_source: Var,
    h_context: Var,
    gate: &ContextGateVars,
) -> Result<Var, ModelError> {
    if tape.shape(h_source) != tape.shape(h_context) {
        return Err(ModelError::GateShape {
            lhs: tape.shape(h_source).to_vec(),
            rhs: tape.shape(h_context).to_vec(),
        });
    }
    if let Some(v) = gate.override_value {
        if v == 1.0 {
            return Ok(h_source);
        }
        if v == 0.0 {
            return Ok(h_context);
        }
        let src_part = tape.scale(h_source, v);
        let ctx_part = tape.scale(h_context, 1.0 - v);
        return Ok(tape.add(src_part, ctx_part)?);
    }
    let cat = tape.concat_cols(&[h_source, h_context])?;
    let pre = tape.matmul(cat, gate.w)?;
    let pre = tape.add_row(pre, gate.b)?;
    let g = tape.activation(pre, Activation::Sigmoid);
    let src_part = tape.mul(g, h_source)?;
    let neg_g = tape.scale(g, -1.0);
    let one_minus_g = tape.add_const(neg_g, 1.0);
    let ctx_part = tape.mul(one_minus_g, h_context)?;
    Ok(tape.add(src_part, ctx_part)?)
}

/// Learned gate activations for inspection: sigmoid(W [H_s, H_c] + b).
pub fn gate_values(
    tape: &mut Tape,
    h_source: Var,
    h_context: Var,
    gate: &ContextGateVars,
) -> Result<Var, ModelError> {
    let cat = tape.concat_cols(&[h_source, h_context])?;
    let pre = tape.matmul(cat, gate.w)?;
    let pre = tape.add_row(pre, gate.b)?;
    Ok(tape.activation(pre, Activation::Sigmoid))
}

/// The full memory-network encoder path. With no context sentences (m = 0)
/// this is exactly `encode_source`; otherwise the gated blend of the source
/// encoding and the merged context embedding replaces the encoder output as
/// the decoder's cross-attention memory.
pub fn gated_encoder_output(
    tape: &mut Tape,
    src_ids: &[u32],
    contexts: &[Vec<u32>],
    encoder: &EncoderVars,
    memory_vars: Option<&MemoryVars>,
    cfg: &TransformerConfig,
    dropout: &mut Dropout,
) -> Result<EncodedSequence, ModelError> {
    let encoded = encode_source(tape, src_ids, None, encoder, cfg, dropout)?;
    let mem = match (memory_vars, contexts.is_empty()) {
        (Some(mem), false) => mem,
        _ => return Ok(encoded),
    };
    let (x_enc, ctx_encs) = encode_context(
        tape,
        src_ids,
        contexts,
        encoder.embed,
        &mem.ctx_block,
        cfg,
        dropout,
    )?;
    let masks = vec![None; ctx_encs.len()];
    let memory = ContextualMemory::build(tape, x_enc, &ctx_encs, &masks)?;
    let merged = match &mem.merge {
        MergeVars::Stateless => merge_contexts(tape, &memory, mem.strategy, None)?,
        MergeVars::Concat { proj } => {
            merge_contexts(tape, &memory, MergeStrategy::Concatenation, Some(*proj))?
        }
        MergeVars::Rnn {
            forward,
            reverse,
            proj,
            direction,
        } => merge_contextual_rnn(tape, &memory, forward, reverse.as_ref(), *proj, *direction)?,
    };
    let h_context = encoder_block(tape, merged, None, &mem.gate_block, cfg.num_heads, dropout)?;
    let h = context_gate(tape, encoded.states, h_context, &mem.gate)?;
    Ok(EncodedSequence {
        states: h,
        mask: encoded.mask,
    })
}

/// The basic memory-network read this model generalizes: score the query
/// against each cell, normalize, and return the weighted sum.
pub fn memory_read_reference(query: &[f64], cells: &[Vec<f64>]) -> Vec<f64> {
    assert!(!cells.is_empty(), "memory read needs at least one cell");
    let scores: Vec<f64> = cells
        .iter()
        .map(|cell| {
            assert_eq!(cell.len(), query.len(), "cell/query dimensions must agree");
            query.iter().zip(cell).map(|(q, m)| q * m).sum()
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let denom: f64 = weights.iter().sum();
    let mut out = vec![0.0; query.len()];
    for (w, cell) in weights.iter().zip(cells) {
        for (o, v) in out.iter_mut().zip(cell) {
            *o += (w / denom) * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::GateVars;
    use crate::tensor::Tensor;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hand_computed_attention_row() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let c = tape.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let att = inter_sentence_attention(&mut tape, x, c, None).unwrap();
        assert_eq!(tape.data(att.raw), &[1.0, 0.0]);
        let e = 1.0f64.exp();
        let alpha0 = e / (e + 1.0);
        let weights = tape.data(att.normalized);
        assert!(close(weights[0], alpha0, 1e-6));
        assert!(close(weights[1], 1.0 - alpha0, 1e-6));
        let arg = tape.data(att.argument);
        assert!(close(arg[0], alpha0, 1e-6));
        assert!(close(arg[1], 1.0 - alpha0, 1e-6));
    }

    #[test]
    fn identical_context_rows_collapse_to_that_row() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.1, 0.0, 0.0]));
        let row = [0.7, 0.3];
        let c = tape.input(Tensor::matrix(4, 2, row.repeat(4)));
        let att = inter_sentence_attention(&mut tape, x, c, None).unwrap();
        let arg = tape.data(att.argument);
        for i in 0..3 {
            assert!(close(arg[i * 2], 0.7, 1e-12));
            assert!(close(arg[i * 2 + 1], 0.3, 1e-12));
        }
    }

    #[test]
    fn masking_matches_deleting_the_token() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 2, vec![1.0, 0.2, -0.4, 0.9]));
        let c3 = tape.input(Tensor::matrix(3, 2, vec![0.3, 0.1, 0.8, -0.2, 0.05, 0.6]));
        let masked = inter_sentence_attention(&mut tape, x, c3, Some(&[false, true, false])).unwrap();
        let c2 = tape.input(Tensor::matrix(2, 2, vec![0.3, 0.1, 0.05, 0.6]));
        let plain = inter_sentence_attention(&mut tape, x, c2, None).unwrap();
        let m = tape.data(masked.normalized);
        // column 1 zeroed, remaining columns renormalized
        assert_eq!(m[1], 0.0);
        assert_eq!(m[4], 0.0);
        let p = tape.data(plain.normalized);
        for row in 0..2 {
            assert!(close(m[row * 3], p[row * 2], 1e-12));
            assert!(close(m[row * 3 + 2], p[row * 2 + 1], 1e-12));
        }
        assert_eq!(tape.data(masked.argument), tape.data(plain.argument));
    }

    fn toy_memory(tape: &mut Tape) -> ContextualMemory {
        let x = tape.input(Tensor::matrix(2, 2, vec![0.4, -0.3, 1.0, 0.8]));
        let c1 = tape.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let c2 = tape.input(Tensor::matrix(3, 2, vec![0.2, 0.5, -0.1, 0.7, 0.9, 0.0]));
        ContextualMemory::build(tape, x, &[c1, c2], &[None, None]).unwrap()
    }

    #[test]
    fn average_of_two_unit_rows() {
        let mut tape = Tape::new();
        let a1 = tape.input(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let a2 = tape.input(Tensor::matrix(1, 2, vec![0.0, 1.0]));
        let memory = ContextualMemory {
            context_states: vec![a1, a2],
            context_masks: vec![None, None],
            raw_similarity: vec![a1, a2],
            normalized: vec![a1, a2],
            argument_embeddings: vec![a1, a2],
        };
        let merged = merge_contexts(&mut tape, &memory, MergeStrategy::Average, None).unwrap();
        assert_eq!(tape.data(merged), &[0.5, 0.5]);
    }

    #[test]
    fn weighted_average_with_equal_means_equals_average() {
        let mut tape = Tape::new();
        let memory = toy_memory(&mut tape);
        // force equal raw means by reusing the same raw matrix
        let raw = memory.raw_similarity[0];
        let memory = ContextualMemory {
            raw_similarity: vec![raw, raw],
            ..memory
        };
        let avg = merge_contexts(&mut tape, &memory, MergeStrategy::Average, None).unwrap();
        let weighted =
            merge_contexts(&mut tape, &memory, MergeStrategy::WeightedAverage, None).unwrap();
        for (a, b) in tape.data(avg).iter().zip(tape.data(weighted)) {
            assert!(close(*a, *b, 1e-6));
        }
    }

    #[test]
    fn flat_with_one_context_equals_the_argument_embedding() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 2, vec![0.4, -0.3, 1.0, 0.8]));
        let c1 = tape.input(Tensor::matrix(3, 2, vec![0.2, 0.5, -0.1, 0.7, 0.9, 0.0]));
        let memory = ContextualMemory::build(&mut tape, x, &[c1], &[None]).unwrap();
        let flat = merge_contexts(&mut tape, &memory, MergeStrategy::Flat, None).unwrap();
        for (a, b) in tape
            .data(flat)
            .iter()
            .zip(tape.data(memory.argument_embeddings[0]))
        {
            assert!(close(*a, *b, 1e-6));
        }
    }

    #[test]
    fn concatenation_with_block_projection_selects_first_argument() {
        let mut tape = Tape::new();
        let memory = toy_memory(&mut tape);
        // projection [2d x d] = [I; 0] picks a_1
        let mut proj = vec![0.0; 4 * 2];
        proj[0] = 1.0;
        proj[3] = 1.0;
        let proj = tape.input(Tensor::matrix(4, 2, proj));
        let merged =
            merge_contexts(&mut tape, &memory, MergeStrategy::Concatenation, Some(proj)).unwrap();
        assert_eq!(
            tape.data(merged),
            tape.data(memory.argument_embeddings[0])
        );
    }

    fn identity_cell(tape: &mut Tape, d: usize) -> RnnCellVars {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        RnnCellVars::Rnn {
            gate: GateVars {
                w_ih: tape.input(Tensor::matrix(d, d, eye)),
                w_hh: tape.input(Tensor::zeros(vec![d, d])),
                b: tape.input(Tensor::zeros(vec![d])),
            },
            activation: Activation::Identity,
        }
    }

    #[test]
    fn zero_recurrence_forward_returns_last_context() {
        let mut tape = Tape::new();
        let memory = toy_memory(&mut tape);
        let cell = identity_cell(&mut tape, 2);
        let out =
            merge_contextual_rnn(&mut tape, &memory, &cell, None, None, RnnDirection::Forward)
                .unwrap();
        assert_eq!(
            tape.data(out),
            tape.data(memory.argument_embeddings[1])
        );
    }

    #[test]
    fn zero_recurrence_backward_returns_first_context() {
        let mut tape = Tape::new();
        let memory = toy_memory(&mut tape);
        let cell = identity_cell(&mut tape, 2);
        let out =
            merge_contextual_rnn(&mut tape, &memory, &cell, None, None, RnnDirection::Backward)
                .unwrap();
        assert_eq!(
            tape.data(out),
            tape.data(memory.argument_embeddings[0])
        );
    }

    #[test]
    fn single_context_forward_equals_backward() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 2, vec![0.4, -0.3, 1.0, 0.8]));
        let c1 = tape.input(Tensor::matrix(2, 2, vec![0.2, 0.5, -0.1, 0.7]));
        let memory = ContextualMemory::build(&mut tape, x, &[c1], &[None]).unwrap();
        let cell = identity_cell(&mut tape, 2);
        let fwd =
            merge_contextual_rnn(&mut tape, &memory, &cell, None, None, RnnDirection::Forward)
                .unwrap();
        let bwd =
            merge_contextual_rnn(&mut tape, &memory, &cell, None, None, RnnDirection::Backward)
                .unwrap();
        assert_eq!(tape.data(fwd), tape.data(bwd));
    }

    #[test]
    fn gate_with_zero_weights_is_the_midpoint() {
        let mut tape = Tape::new();
        let hs = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let hc = tape.input(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]));
        let gate = ContextGateVars {
            w: tape.input(Tensor::zeros(vec![4, 2])),
            b: tape.input(Tensor::zeros(vec![2])),
            override_value: None,
        };
        let h = context_gate(&mut tape, hs, hc, &gate).unwrap();
        assert_eq!(tape.data(h), &[0.5, 1.0, 2.0, 2.5]);
    }

    #[test]
    fn gate_overrides_pass_sides_through_exactly() {
        let mut tape = Tape::new();
        let hs = tape.input(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let hc = tape.input(Tensor::matrix(1, 2, vec![-3.0, 5.0]));
        let w = tape.input(Tensor::zeros(vec![4, 2]));
        let b = tape.input(Tensor::zeros(vec![2]));
        let source_side = ContextGateVars {
            w,
            b,
            override_value: Some(1.0),
        };
        let h = context_gate(&mut tape, hs, hc, &source_side).unwrap();
        assert_eq!(h, hs);
        let context_side = ContextGateVars {
            w,
            b,
            override_value: Some(0.0),
        };
        let h = context_gate(&mut tape, hs, hc, &context_side).unwrap();
        assert_eq!(h, hc);
    }

    #[test]
    fn gate_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let hs = tape.input(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let hc = tape.input(Tensor::matrix(2, 2, vec![0.0; 4]));
        let gate = ContextGateVars {
            w: tape.input(Tensor::zeros(vec![4, 2])),
            b: tape.input(Tensor::zeros(vec![2])),
            override_value: None,
        };
        assert!(matches!(
            context_gate(&mut tape, hs, hc, &gate),
            Err(ModelError::GateShape { .. })
        ));
    }

    fn memory_model(merge: MergeStrategy, m: usize) -> crate::model::ModelParameters {
        use crate::model::{ModelConfig, ModelParameters};
        use crate::transformer::TransformerConfig;
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
                vocab_size: 12,
                memory_size: m,
                merge,
            },
            55,
        )
        .unwrap()
    }

    #[test]
    fn encode_context_shapes_and_empty_sentences() {
        let params = memory_model(MergeStrategy::Average, 2);
        let cfg = params.config.transformer.clone();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, None);
        let mem = bound.memory.as_ref().unwrap();
        let mut dropout = Dropout::disabled();
        let contexts = vec![vec![4u32, 5, 2], vec![2u32]]; // second is empty (EOS only)
        let (x_enc, ctx_encs) = encode_context(
            &mut tape,
            &[6, 7, 8, 2],
            &contexts,
            bound.encoder.embed,
            &mem.ctx_block,
            &cfg,
            &mut dropout,
        )
        .unwrap();
        assert_eq!(tape.shape(x_enc), &[4, 8]);
        assert_eq!(tape.shape(ctx_encs[0]), &[3, 8]);
        assert_eq!(tape.shape(ctx_encs[1]), &[1, 8]);

        // identical context sentences encode identically
        let (_, twice) = encode_context(
            &mut tape,
            &[6, 7, 8, 2],
            &[vec![4u32, 5, 2], vec![4u32, 5, 2]],
            bound.encoder.embed,
            &mem.ctx_block,
            &cfg,
            &mut dropout,
        )
        .unwrap();
        assert_eq!(tape.data(twice[0]), tape.data(twice[1]));
    }

    #[test]
    fn average_merge_is_invariant_under_context_permutation() {
        let params = memory_model(MergeStrategy::Average, 2);
        let cfg = params.config.transformer.clone();
        let source = [4u32, 9, 2];
        let c1 = vec![5u32, 6, 2];
        let c2 = vec![7u32, 2];
        let run = |contexts: &[Vec<u32>]| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, None);
            let mut dropout = Dropout::disabled();
            let enc = gated_encoder_output(
                &mut tape,
                &source,
                contexts,
                &bound.encoder,
                bound.memory.as_ref(),
                &cfg,
                &mut dropout,
            )
            .unwrap();
            tape.data(enc.states).to_vec()
        };
        let forward_order = run(&[c1.clone(), c2.clone()]);
        let swapped = run(&[c2, c1]);
        assert_eq!(forward_order, swapped);
    }

    #[test]
    fn memory_read_reference_contract() {
        // all cells equal -> that vector
        let v = vec![0.3, -0.2];
        let out = memory_read_reference(&[1.0, 1.0], &[v.clone(), v.clone(), v.clone()]);
        assert!(close(out[0], 0.3, 1e-12) && close(out[1], -0.2, 1e-12));

        // dominant score -> winner within 1e-6
        let m1 = vec![1.0, 0.0];
        let m2 = vec![0.0, 1.0];
        let out = memory_read_reference(&[25.0, 0.0], &[m1.clone(), m2]);
        assert!(close(out[0], m1[0], 1e-6) && close(out[1], m1[1], 1e-6));

        // single cell -> returned regardless of query
        let out = memory_read_reference(&[-9.0, 4.0], &[vec![7.0, 8.0]]);
        assert_eq!(out, vec![7.0, 8.0]);
    }
}
