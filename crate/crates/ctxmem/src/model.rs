//! Model parameters: creation, per-name seeded initialization, and binding
//! onto a tape for a forward/backward pass.
//!
//! Every parameter is initialized from an RNG seeded by (run seed, parameter
//! name), so two configurations sharing a parameter subset initialize that
//! subset identically. Values live on the f32 lattice (each f64 is exactly
//! representable as f32) which keeps the 32-bit checkpoint format lossless.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::memory::{ContextGateVars, MemoryVars, MergeStrategy, MergeVars};
use crate::rnn::{GateVars, RnnCellVars, RnnCore, RnnDirection};
use crate::tensor::{Activation, Tape, Tensor, Var};
use crate::text::mix_seed;
use crate::transformer::{
    BlockVars, DecLayerVars, DecoderVars, EncoderVars, FfnVars, LnVars, MhaVars, ModelError,
    TransformerConfig,
};

/// Snap to the nearest f32; parameters and optimizer state stay on this
/// lattice so 32-bit serialization round-trips exactly.
pub fn q32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.to_string(),
            shape,
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Lease every parameter onto the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundStore {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(Tensor::new(p.shape.clone(), p.value.clone())))
            .collect();
        BoundStore { vars }
    }

    /// Accumulate tape gradients back into the store after `backward`.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundStore) {
        for (param, &var) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(var) {
                for (acc, v) in param.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

/// Tape handles for one bound pass, index-aligned with the store.
pub struct BoundStore {
    vars: Vec<Var>,
}

impl BoundStore {
    /// Adopt externally created leaves (gradient checking does this); they
    /// must align one-to-one with the store's parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundStore { vars }
    }

    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

// ── initializers ────────────────────────────────────────────────────────

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(name), 0))
}

fn xavier(store: &mut ParamStore, seed: u64, name: &str, rows: usize, cols: usize) -> usize {
    let mut rng = name_rng(seed, name);
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let value = (0..rows * cols)
        .map(|_| q32(rng.gen_range(-limit..limit)))
        .collect();
    store.add(name, vec![rows, cols], value)
}

fn embedding(store: &mut ParamStore, seed: u64, name: &str, vocab: usize, dim: usize) -> usize {
    let mut rng = name_rng(seed, name);
    let limit = 1.0 / (dim as f64).sqrt();
    let value = (0..vocab * dim)
        .map(|_| q32(rng.gen_range(-limit..limit)))
        .collect();
    store.add(name, vec![vocab, dim], value)
}

fn zeros(store: &mut ParamStore, name: &str, len: usize) -> usize {
    store.add(name, vec![len], vec![0.0; len])
}

fn ones(store: &mut ParamStore, name: &str, len: usize) -> usize {
    store.add(name, vec![len], vec![1.0; len])
}

// ── architecture indices ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

impl LnIdx {
    fn create(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LnIdx {
            gain: ones(store, &format!("{prefix}.gain"), dim),
            bias: zeros(store, &format!("{prefix}.bias"), dim),
        }
    }

    pub fn bind(&self, b: &BoundStore) -> LnVars {
        LnVars {
            gain: b.var(self.gain),
            bias: b.var(self.bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MhaIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

impl MhaIdx {
    fn create(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize) -> Self {
        MhaIdx {
            wq: xavier(store, seed, &format!("{prefix}.wq"), dim, dim),
            bq: zeros(store, &format!("{prefix}.bq"), dim),
            wk: xavier(store, seed, &format!("{prefix}.wk"), dim, dim),
            wv: xavier(store, seed, &format!("{prefix}.wv"), dim, dim),
            bv: zeros(store, &format!("{prefix}.bv"), dim),
            wo: xavier(store, seed, &format!("{prefix}.wo"), dim, dim),
            bo: zeros(store, &format!("{prefix}.bo"), dim),
        }
    }

    pub fn bind(&self, b: &BoundStore) -> MhaVars {
        MhaVars {
            wq: b.var(self.wq),
            bq: b.var(self.bq),
            wk: b.var(self.wk),
            wv: b.var(self.wv),
            bv: b.var(self.bv),
            wo: b.var(self.wo),
            bo: b.var(self.bo),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl FfnIdx {
    fn create(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize, ffn: usize) -> Self {
        FfnIdx {
            w1: xavier(store, seed, &format!("{prefix}.w1"), dim, ffn),
            b1: zeros(store, &format!("{prefix}.b1"), ffn),
            w2: xavier(store, seed, &format!("{prefix}.w2"), ffn, dim),
            b2: zeros(store, &format!("{prefix}.b2"), dim),
        }
    }

    pub fn bind(&self, b: &BoundStore) -> FfnVars {
        FfnVars {
            w1: b.var(self.w1),
            b1: b.var(self.b1),
            w2: b.var(self.w2),
            b2: b.var(self.b2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockIdx {
    pub attn: MhaIdx,
    pub ln1: LnIdx,
    pub ffn: FfnIdx,
    pub ln2: LnIdx,
}

impl BlockIdx {
    fn create(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize, ffn: usize) -> Self {
        BlockIdx {
            attn: MhaIdx::create(store, seed, &format!("{prefix}.attn"), dim),
            ln1: LnIdx::create(store, &format!("{prefix}.ln1"), dim),
            ffn: FfnIdx::create(store, seed, &format!("{prefix}.ffn"), dim, ffn),
            ln2: LnIdx::create(store, &format!("{prefix}.ln2"), dim),
        }
    }

    pub fn bind(&self, b: &BoundStore) -> BlockVars {
        BlockVars {
            attn: self.attn.bind(b),
            ln1: self.ln1.bind(b),
            ffn: self.ffn.bind(b),
            ln2: self.ln2.bind(b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecLayerIdx {
    pub self_attn: MhaIdx,
    pub ln1: LnIdx,
    pub cross_attn: MhaIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
    pub ln3: LnIdx,
}

impl DecLayerIdx {
    fn create(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize, ffn: usize) -> Self {
        DecLayerIdx {
            self_attn: MhaIdx::create(store, seed, &format!("{prefix}.self_attn"), dim),
            ln1: LnIdx::create(store, &format!("{prefix}.ln1"), dim),
            cross_attn: MhaIdx::create(store, seed, &format!("{prefix}.cross_attn"), dim),
            ln2: LnIdx::create(store, &format!("{prefix}.ln2"), dim),
            ffn: FfnIdx::create(store, seed, &format!("{prefix}.ffn"), dim, ffn),
            ln3: LnIdx::create(store, &format!("{prefix}.ln3"), dim),
        }
    }

    pub fn bind(&self, b: &BoundStore) -> DecLayerVars {
        DecLayerVars {
            self_attn: self.self_attn.bind(b),
            ln1: self.ln1.bind(b),
            cross_attn: self.cross_attn.bind(b),
            ln2: self.ln2.bind(b),
            ffn: self.ffn.bind(b),
            ln3: self.ln3.bind(b),
        }
    }
}

#[derive(Debug, Clone)]
pub enum RnnCellIdx {
    Rnn {
        gate: GateIdx,
    },
    Lstm {
        input: GateIdx,
        forget: GateIdx,
        cell: GateIdx,
        output: GateIdx,
    },
    Gru {
        reset: GateIdx,
        update: GateIdx,
        candidate: GateIdx,
    },
}

#[derive(Debug, Clone)]
pub struct GateIdx {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b: usize,
}

impl GateIdx {
    fn create(store: &mut ParamStore, seed: u64, prefix: &str, dim: usize) -> Self {
        GateIdx {
            w_ih: xavier(store, seed, &format!("{prefix}.w_ih"), dim, dim),
            w_hh: xavier(store, seed, &format!("{prefix}.w_hh"), dim, dim),
            b: zeros(store, &format!("{prefix}.b"), dim),
        }
    }

    fn bind(&self, b: &BoundStore) -> GateVars {
        GateVars {
            w_ih: b.var(self.w_ih),
            w_hh: b.var(self.w_hh),
            b: b.var(self.b),
        }
    }
}

impl RnnCellIdx {
    fn create(store: &mut ParamStore, seed: u64, prefix: &str, core: RnnCore, dim: usize) -> Self {
        match core {
            RnnCore::Rnn => RnnCellIdx::Rnn {
                gate: GateIdx::create(store, seed, &format!("{prefix}.h"), dim),
            },
            RnnCore::Lstm => RnnCellIdx::Lstm {
                input: GateIdx::create(store, seed, &format!("{prefix}.i"), dim),
                forget: GateIdx::create(store, seed, &format!("{prefix}.f"), dim),
                cell: GateIdx::create(store, seed, &format!("{prefix}.g"), dim),
                output: GateIdx::create(store, seed, &format!("{prefix}.o"), dim),
            },
            RnnCore::Gru => RnnCellIdx::Gru {
                reset: GateIdx::create(store, seed, &format!("{prefix}.r"), dim),
                update: GateIdx::create(store, seed, &format!("{prefix}.z"), dim),
                candidate: GateIdx::create(store, seed, &format!("{prefix}.n"), dim),
            },
        }
    }

    fn bind(&self, b: &BoundStore) -> RnnCellVars {
        match self {
            RnnCellIdx::Rnn { gate } => RnnCellVars::Rnn {
                gate: gate.bind(b),
                activation: Activation::Tanh,
            },
            RnnCellIdx::Lstm {
                input,
                forget,
                cell,
                output,
            } => RnnCellVars::Lstm {
                input: input.bind(b),
                forget: forget.bind(b),
                cell: cell.bind(b),
                output: output.bind(b),
            },
            RnnCellIdx::Gru {
                reset,
                update,
                candidate,
            } => RnnCellVars::Gru {
                reset: reset.bind(b),
                update: update.bind(b),
                candidate: candidate.bind(b),
            },
        }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum MergeIdx {
    Stateless,
    Concat {
        proj: usize,
    },
    Rnn {
        forward: RnnCellIdx,
        reverse: Option<RnnCellIdx>,
        proj: Option<usize>,
        direction: RnnDirection,
    },
}

#[derive(Debug, Clone)]
pub struct MemoryIdx {
    pub ctx_block: BlockIdx,
    pub gate_block: BlockIdx,
    pub gate_w: usize,
    pub gate_b: usize,
    pub merge: MergeIdx,
}

/// Full model configuration (architecture plus memory settings).
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub vocab_size: usize,
    pub memory_size: usize,
    pub merge: MergeStrategy,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.transformer.validate()
    }
}

/// All learned weights plus the index structures that address them.
pub struct ModelParameters {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub encoder: Vec<BlockIdx>,
    pub decoder: Vec<DecLayerIdx>,
    pub memory: Option<MemoryIdx>,
}

impl ModelParameters {
    /// Create and initialize all parameters for the given configuration.
    /// Parameters shared between configurations (embeddings, encoder,
    /// decoder) come out identical for the same seed regardless of the
    /// memory settings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.transformer.model_dim;
        let ffn = config.transformer.ffn_dim;
        let vocab = config.vocab_size;
        let mut store = ParamStore::default();

        let src_embed = embedding(&mut store, seed, "src_embed", vocab, d);
        let tgt_embed = embedding(&mut store, seed, "tgt_embed", vocab, d);
        let out_w = xavier(&mut store, seed, "out_proj.w", d, vocab);
        let out_b = zeros(&mut store, "out_proj.b", vocab);

        let encoder = (0..config.transformer.num_layers)
            .map(|i| BlockIdx::create(&mut store, seed, &format!("encoder.{i}"), d, ffn))
            .collect();
        let decoder = (0..config.transformer.num_layers)
            .map(|i| DecLayerIdx::create(&mut store, seed, &format!("decoder.{i}"), d, ffn))
            .collect();

        let memory = if config.memory_size > 0 {
            let ctx_block = BlockIdx::create(&mut store, seed, "ctx_encoder", d, ffn);
            let gate_block = BlockIdx::create(&mut store, seed, "gate_block", d, ffn);
            let gate_w = xavier(&mut store, seed, "gate.w", 2 * d, d);
            let gate_b = zeros(&mut store, "gate.b", d);
            let merge = match config.merge {
                MergeStrategy::Concatenation => {
                    // block-average init: each d x d block is I/m, so the
                    // projection starts out equal to average merging
                    let m = config.memory_size;
                    let mut value = vec![0.0; m * d * d];
                    for block in 0..m {
                        for i in 0..d {
                            value[(block * d + i) * d + i] = q32(1.0 / m as f64);
                        }
                    }
                    let proj = store.add("merge.concat_proj", vec![m * d, d], value);
                    MergeIdx::Concat { proj }
                }
                MergeStrategy::Average | MergeStrategy::WeightedAverage | MergeStrategy::Flat => {
                    MergeIdx::Stateless
                }
                MergeStrategy::ContextualRnn { core, direction } => {
                    let forward = RnnCellIdx::create(&mut store, seed, "merge.rnn.0", core, d);
                    let (reverse, proj) = if direction == RnnDirection::Bidirectional {
                        let rev = RnnCellIdx::create(&mut store, seed, "merge.rnn.1", core, d);
                        let proj = xavier(&mut store, seed, "merge.bidir_proj", 2 * d, d);
                        (Some(rev), Some(proj))
                    } else {
                        (None, None)
                    };
                    MergeIdx::Rnn {
                        forward,
                        reverse,
                        proj,
                        direction,
                    }
                }
            };
            Some(MemoryIdx {
                ctx_block,
                gate_block,
                gate_w,
                gate_b,
                merge,
            })
        } else {
            None
        };

        Ok(ModelParameters {
            config,
            store,
            src_embed,
            tgt_embed,
            out_w,
            out_b,
            encoder,
            decoder,
            memory,
        })
    }

    /// Lease all parameters onto a tape and construct the bound views.
    /// `gate_override`, when set, pins the context gate to a constant.
    pub fn bind(&self, tape: &mut Tape, gate_override: Option<f64>) -> BoundModel {
        let bound = self.store.bind(tape);
        self.views(bound, gate_override)
    }

    /// Clone of every parameter as a plain tensor, in store order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.store
            .iter()
            .map(|p| Tensor::new(p.shape.clone(), p.value.clone()))
            .collect()
    }

    /// Construct the typed views over an already-bound store.
    pub fn views(&self, bound: BoundStore, gate_override: Option<f64>) -> BoundModel {
        let encoder = EncoderVars {
            embed: bound.var(self.src_embed),
            layers: self.encoder.iter().map(|l| l.bind(&bound)).collect(),
        };
        let decoder = DecoderVars {
            embed: bound.var(self.tgt_embed),
            layers: self.decoder.iter().map(|l| l.bind(&bound)).collect(),
            out_w: bound.var(self.out_w),
            out_b: bound.var(self.out_b),
        };
        let memory = self.memory.as_ref().map(|mem| MemoryVars {
            ctx_block: mem.ctx_block.bind(&bound),
            gate_block: mem.gate_block.bind(&bound),
            gate: ContextGateVars {
                w: bound.var(mem.gate_w),
                b: bound.var(mem.gate_b),
                override_value: gate_override,
            },
            merge: match &mem.merge {
                MergeIdx::Stateless => MergeVars::Stateless,
                MergeIdx::Concat { proj } => MergeVars::Concat {
                    proj: bound.var(*proj),
                },
                MergeIdx::Rnn {
                    forward,
                    reverse,
                    proj,
                    direction,
                } => MergeVars::Rnn {
                    forward: forward.bind(&bound),
                    reverse: reverse.as_ref().map(|r| r.bind(&bound)),
                    proj: proj.map(|p| bound.var(p)),
                    direction: *direction,
                },
            },
            strategy: self.config.merge,
        });
        BoundModel {
            bound,
            encoder,
            decoder,
            memory,
        }
    }

    /// Names of parameters belonging to the memory network (empty at m = 0).
    pub fn memory_param_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|p| {
                p.name.starts_with("ctx_encoder")
                    || p.name.starts_with("gate")
                    || p.name.starts_with("merge")
            })
            .map(|p| p.name.clone())
            .collect()
    }
}

/// A model bound to one tape: the leased store plus typed views.
pub struct BoundModel {
    pub bound: BoundStore,
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    pub memory: Option<MemoryVars>,
}
