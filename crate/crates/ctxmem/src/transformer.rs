//! The baseline Transformer: sinusoidal positions, multi-head attention,
//! position-wise feed-forward, encoder and decoder stacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};
use crate::text::BOS;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("decoder prefix must begin with BOS")]
    MissingBos,
    #[error("positional encoding requires an even dimension, got {dim}")]
    OddModelDim { dim: usize },
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    HeadMismatch { dim: usize, heads: usize },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("context gate expects matching shapes, got {lhs:?} and {rhs:?}")]
    GateShape { lhs: Vec<usize>, rhs: Vec<usize> },
}

/// Architecture hyperparameters of the Transformer stacks.
#[derive(Debug, Clone)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    pub max_positions: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.model_dim.is_multiple_of(2) {
            return Err(ModelError::OddModelDim {
                dim: self.model_dim,
            });
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::HeadMismatch {
                dim: self.model_dim,
                heads: self.num_heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Encoder output together with its key padding mask (`true` = PAD).
pub struct EncodedSequence {
    pub states: Var,
    pub mask: Option<Vec<bool>>,
}

// ── bound parameter views ──────────────────────────────────────────────

pub struct LnVars {
    pub gain: Var,
    pub bias: Var,
}

pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    /// No key bias: a per-row constant shift of the scores cancels inside
    /// the softmax, so such a parameter would never receive gradient.
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// One encoder-style block: self-attention and feed-forward, each wrapped in
/// residual + layer norm by the block itself.
pub struct BlockVars {
    pub attn: MhaVars,
    pub ln1: LnVars,
    pub ffn: FfnVars,
    pub ln2: LnVars,
}

pub struct DecLayerVars {
    pub self_attn: MhaVars,
    pub ln1: LnVars,
    pub cross_attn: MhaVars,
    pub ln2: LnVars,
    pub ffn: FfnVars,
    pub ln3: LnVars,
}

pub struct EncoderVars {
    pub embed: Var,
    pub layers: Vec<BlockVars>,
}

pub struct DecoderVars {
    pub embed: Var,
    pub layers: Vec<DecLayerVars>,
    pub out_w: Var,
    pub out_b: Var,
}

/// Inverted-scaling dropout; `rng: None` disables it (evaluation mode).
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn disabled() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        let rng = match (&mut self.rng, self.p > 0.0) {
            (Some(rng), true) => rng,
            _ => return x,
        };
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..tape.tensor(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.mul_const(x, mask)
    }
}

// ── operations ─────────────────────────────────────────────────────────

/// Interleaved sine/cosine position table with geometric wavelengths from
/// 2*pi to 10000*2*pi. Pure function of (length, dim).
pub fn positional_encoding(length: usize, dim: usize) -> Result<Tensor, ModelError> {
    if !dim.is_multiple_of(2) {
        return Err(ModelError::OddModelDim { dim });
    }
    let mut data = vec![0.0; length * dim];
    for pos in 0..length {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::matrix(length, dim, data))
}

/// Scaled dot-product attention over `num_heads` learned projections.
///
/// `key_mask` marks invalid key positions (`true` = masked) shared by all
/// queries; `row_mask`, when given, is the full L_q x L_k layout and wins
/// over `key_mask`. Masked positions get weight exactly zero. A fully masked
/// row would be an error; callers keep at least an EOS position unmasked.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    key_mask: Option<&[bool]>,
    params: &MhaVars,
    num_heads: usize,
) -> Result<Var, ModelError> {
    let (lq, d) = tape.tensor(q_in).rc();
    let (lk, dk_in) = tape.tensor(k_in).rc();
    let (lv, _) = tape.tensor(v_in).rc();
    if dk_in != d || lv != lk {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: tape.shape(k_in).to_vec(),
            rhs: tape.shape(v_in).to_vec(),
        }));
    }
    if d % num_heads != 0 {
        return Err(ModelError::HeadMismatch {
            dim: d,
            heads: num_heads,
        });
    }
    let head_dim = d / num_heads;
    let full_mask: Option<Vec<bool>> = key_mask.map(|km| {
        assert_eq!(km.len(), lk, "key mask length must match key count");
        let mut m = Vec::with_capacity(lq * lk);
        for _ in 0..lq {
            m.extend_from_slice(km);
        }
        m
    });
    attention_with_mask(tape, q_in, k_in, v_in, full_mask, params, num_heads, head_dim)
}

/// Variant with an explicit full L_q x L_k mask (used for causal decoding).
pub fn multi_head_attention_full_mask(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<Vec<bool>>,
    params: &MhaVars,
    num_heads: usize,
) -> Result<Var, ModelError> {
    let (_, d) = tape.tensor(q_in).rc();
    if d % num_heads != 0 {
        return Err(ModelError::HeadMismatch {
            dim: d,
            heads: num_heads,
        });
    }
    let head_dim = d / num_heads;
    attention_with_mask(tape, q_in, k_in, v_in, mask, params, num_heads, head_dim)
}

#[allow(clippy::too_many_arguments)]
fn attention_with_mask(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<Vec<bool>>,
    params: &MhaVars,
    num_heads: usize,
    head_dim: usize,
) -> Result<Var, ModelError> {
    let q = tape.matmul(q_in, params.wq)?;
    let q = tape.add_row(q, params.bq)?;
    let k = tape.matmul(k_in, params.wk)?;
    let v = tape.matmul(v_in, params.wv)?;
    let v = tape.add_row(v, params.bv)?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows_masked(scores, mask.as_deref());
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, params.wo)?;
    Ok(tape.add_row(out, params.bo)?)
}

/// Position-wise two-layer network with a ReLU in between. Residual and
/// layer norm are applied by the caller.
pub fn feed_forward(tape: &mut Tape, x: Var, params: &FfnVars) -> Result<Var, ModelError> {
    let h = tape.matmul(x, params.w1)?;
    let h = tape.add_row(h, params.b1)?;
    let h = tape.activation(h, Activation::Relu);
    let out = tape.matmul(h, params.w2)?;
    Ok(tape.add_row(out, params.b2)?)
}

/// Self-attention block: x = LN(x + drop(SelfAttn(x))); x = LN(x + drop(FFN(x))).
pub fn encoder_block(
    tape: &mut Tape,
    x: Var,
    key_mask: Option<&[bool]>,
    vars: &BlockVars,
    num_heads: usize,
    dropout: &mut Dropout,
) -> Result<Var, ModelError> {
    let attn = multi_head_attention(tape, x, x, x, key_mask, &vars.attn, num_heads)?;
    let attn = dropout.apply(tape, attn);
    let x = tape.add(x, attn)?;
    let x = tape.layer_norm(x, vars.ln1.gain, vars.ln1.bias);
    let ff = feed_forward(tape, x, &vars.ffn)?;
    let ff = dropout.apply(tape, ff);
    let x2 = tape.add(x, ff)?;
    Ok(tape.layer_norm(x2, vars.ln2.gain, vars.ln2.bias))
}

/// Embed ids, scale by sqrt(d), add positions, apply dropout.
pub fn embed_sequence(
    tape: &mut Tape,
    ids: &[u32],
    embed: Var,
    cfg: &TransformerConfig,
    dropout: &mut Dropout,
) -> Result<Var, ModelError> {
    let (vocab, d) = tape.tensor(embed).rc();
    for &id in ids {
        if id as usize >= vocab {
            return Err(ModelError::TokenOutOfRange { id, vocab });
        }
    }
    if ids.len() > cfg.max_positions {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max: cfg.max_positions,
        });
    }
    let positions: Vec<usize> = ids.iter().map(|&id| id as usize).collect();
    let x = tape.gather_rows(embed, &positions);
    let x = tape.scale(x, (d as f64).sqrt());
    let pe = tape.input(positional_encoding(ids.len(), d)?);
    let x = tape.add(x, pe)?;
    Ok(dropout.apply(tape, x))
}

/// Run the N-layer encoder over a source sentence.
pub fn encode_source(
    tape: &mut Tape,
    ids: &[u32],
    key_mask: Option<&[bool]>,
    enc: &EncoderVars,
    cfg: &TransformerConfig,
    dropout: &mut Dropout,
) -> Result<EncodedSequence, ModelError> {
    let mut x = embed_sequence(tape, ids, enc.embed, cfg, dropout)?;
    for layer in &enc.layers {
        x = encoder_block(tape, x, key_mask, layer, cfg.num_heads, dropout)?;
    }
    Ok(EncodedSequence {
        states: x,
        mask: key_mask.map(|m| m.to_vec()),
    })
}

/// Run the decoder over a BOS-prefixed target prefix against the given
/// cross-attention memory and project to vocabulary logits.
pub fn decode_logits(
    tape: &mut Tape,
    prefix: &[u32],
    memory: &EncodedSequence,
    dec: &DecoderVars,
    cfg: &TransformerConfig,
    dropout: &mut Dropout,
) -> Result<Var, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if prefix[0] != BOS {
        return Err(ModelError::MissingBos);
    }
    let t = prefix.len();
    let mut x = embed_sequence(tape, prefix, dec.embed, cfg, dropout)?;
    // position u may attend only to positions <= u
    let causal: Vec<bool> = (0..t)
        .flat_map(|row| (0..t).map(move |col| col > row))
        .collect();
    for layer in &dec.layers {
        let attn = multi_head_attention_full_mask(
            tape,
            x,
            x,
            x,
            Some(causal.clone()),
            &layer.self_attn,
            cfg.num_heads,
        )?;
        let attn = dropout.apply(tape, attn);
        let sum = tape.add(x, attn)?;
        x = tape.layer_norm(sum, layer.ln1.gain, layer.ln1.bias);

        let cross = multi_head_attention(
            tape,
            x,
            memory.states,
            memory.states,
            memory.mask.as_deref(),
            &layer.cross_attn,
            cfg.num_heads,
        )?;
        let cross = dropout.apply(tape, cross);
        let sum = tape.add(x, cross)?;
        x = tape.layer_norm(sum, layer.ln2.gain, layer.ln2.bias);

        let ff = feed_forward(tape, x, &layer.ffn)?;
        let ff = dropout.apply(tape, ff);
        let sum = tape.add(x, ff)?;
        x = tape.layer_norm(sum, layer.ln3.gain, layer.ln3.bias);
    }
    let logits = tape.matmul(x, dec.out_w)?;
    Ok(tape.add_row(logits, dec.out_b)?)
}
