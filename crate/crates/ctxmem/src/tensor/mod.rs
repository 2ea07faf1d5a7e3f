//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Every numeric operation in the crate is expressed through [`Tape`] ops so
//! that one `backward` call produces gradients for all parameters. The tape
//! owns the tensors it creates; callers keep lightweight [`Var`] handles.
//!
//! Values are computed and held in `f64`. Persistent state (parameters,
//! optimizer moments, checkpoints) is quantized to the `f32` lattice by the
//! training module, so checkpoint round-trips stay lossless.

mod grad_check;

pub use grad_check::grad_check;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("target id {id} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
}

/// Elementwise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

/// Dense row-major tensor. `grad`, when present, matches `data` in length.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// View the shape as (rows, cols); vectors count as a single row.
    pub fn rc(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("expected at most 2 dimensions, got shape {:?}", self.shape),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `a[r x c] + bias[c]` broadcast over rows.
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Broadcast multiply by a scalar tensor (gradient flows to both sides).
    ScalarMul {
        s: Var,
        a: Var,
    },
    Scale {
        a: Var,
        k: f64,
    },
    AddConst {
        a: Var,
    },
    /// Elementwise multiply by a constant array (dropout masks, gate overrides).
    MulConst {
        a: Var,
        mask: Vec<f64>,
    },
    Activation {
        a: Var,
        kind: Activation,
    },
    /// Row-wise softmax; masked cells were zeroed at forward time, and a
    /// zero output already zeroes the corresponding adjoint.
    SoftmaxRows {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceCols {
        a: Var,
        start: usize,
        len: usize,
    },
    Sum {
        a: Var,
    },
    /// Mean over unmasked cells (`true` mask entries are excluded).
    MeanMasked {
        a: Var,
        mask: Option<Vec<bool>>,
    },
    /// Sum over included rows of KL(smoothed one-hot || softmax(logits)).
    LabelSmoothedCeSum {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        include: Vec<bool>,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of executed operations. Inputs always precede their
/// consumers, so one reverse sweep propagates all adjoints.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant leaf; no gradient is kept for it.
    pub fn input(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    /// Record a trainable leaf; `backward` populates its grad slot.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.push(t, Op::Leaf)
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Clear every grad slot on the tape.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    // ── op builders ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ar, ac) = self.tensor(a).rc();
        let (br, bc) = self.tensor(b).rc();
        if ac != br {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; ar * bc];
        mm_nn_acc(self.data(a), self.data(b), ar, ac, bc, &mut out);
        Ok(self.push(Tensor::matrix(ar, bc, out), Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.tensor(a).rc();
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, out), Op::Transpose { a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data), Op::Add { a, b }))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.tensor(a).rc();
        if self.tensor(bias).numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bdata = self.data(bias).to_vec();
        let mut data = self.data(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bdata[j];
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data), Op::AddRow { a, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data), Op::Mul { a, b }))
    }

    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Var {
        assert!(
            self.tensor(s).is_scalar(),
            "scalar_mul: expected scalar, got shape {:?}",
            self.shape(s)
        );
        let sval = self.data(s)[0];
        let data: Vec<f64> = self.data(a).iter().map(|x| x * sval).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::ScalarMul { s, a })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Scale { a, k })
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + k).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::AddConst { a })
    }

    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Var {
        assert_eq!(
            mask.len(),
            self.tensor(a).numel(),
            "mul_const: mask length {} does not match tensor of shape {:?}",
            mask.len(),
            self.shape(a)
        );
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::MulConst { a, mask })
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| match kind {
                Activation::Relu => x.max(0.0),
                Activation::Sigmoid => sigmoid(x),
                Activation::Tanh => x.tanh(),
                Activation::Identity => x,
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Activation { a, kind })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
    }

    /// Row-wise softmax where masked cells (mask `true`, full r x c layout)
    /// get weight exactly zero. Each row must keep at least one unmasked
    /// cell; callers guarantee this by giving empty sequences an EOS token.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (r, c) = self.tensor(a).rc();
        if let Some(m) = mask {
            assert_eq!(
                m.len(),
                r * c,
                "softmax_rows_masked: mask must cover the full matrix"
            );
            for i in 0..r {
                assert!(
                    m[i * c..(i + 1) * c].iter().any(|&x| !x),
                    "softmax_rows_masked: row {i} is fully masked"
                );
            }
        }
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mask_row = mask.map(|m| &m[i * c..(i + 1) * c]);
            softmax_row_into(row, mask_row, &mut out[i * c..(i + 1) * c]);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::SoftmaxRows { a })
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// elementwise affine. Epsilon sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.tensor(x).rc();
        assert_eq!(self.tensor(gain).numel(), c, "layer_norm: gain length");
        assert_eq!(self.tensor(bias).numel(), c, "layer_norm: bias length");
        let src = self.data(x);
        let gdata = self.data(gain).to_vec();
        let bdata = self.data(bias).to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let (mean, inv_std) = row_moments(row);
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std * gdata[j] + bdata[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gain, bias })
    }

    /// Select rows of `table` by index; the adjoint scatter-adds into the
    /// table gradient, so repeated ids accumulate.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, cols) = self.tensor(table).rc();
        for &id in ids {
            assert!(
                id < rows,
                "gather_rows: id {} out of range for {} rows",
                id,
                rows
            );
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        self.push(
            Tensor::matrix(ids.len(), cols, out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let (r, _) = self.tensor(parts[0]).rc();
        let mut total_c = 0;
        for &p in parts {
            let (pr, pc) = self.tensor(p).rc();
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_c += pc;
        }
        let mut out = vec![0.0; r * total_c];
        let mut offset = 0;
        for &p in parts {
            let (_, pc) = self.tensor(p).rc();
            let src = self.data(p);
            for i in 0..r {
                out[i * total_c + offset..i * total_c + offset + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        Ok(self.push(
            Tensor::matrix(r, total_c, out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let (_, c) = self.tensor(parts[0]).rc();
        let mut total_r = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.tensor(p).rc();
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_r += pr;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(
            Tensor::matrix(total_r, c, out),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.tensor(a).rc();
        assert!(start + len <= c, "slice_cols: range out of bounds");
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(
            Tensor::matrix(r, len, out),
            Op::SliceCols { a, start, len },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    /// Mean over unmasked cells (`true` mask entries are excluded).
    pub fn mean_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let n = self.tensor(a).numel();
        if let Some(m) = mask {
            assert_eq!(m.len(), n, "mean_masked: mask length");
        }
        let (total, count) = masked_sum_count(self.data(a), mask);
        assert!(count > 0, "mean_masked: every cell is masked");
        self.push(
            Tensor::scalar(total / count as f64),
            Op::MeanMasked {
                a,
                mask: mask.map(|m| m.to_vec()),
            },
        )
    }

    /// Sum over included rows of the KL divergence from the label-smoothed
    /// target distribution to the predicted softmax. Divide by the number of
    /// included rows to get the per-token loss.
    pub fn label_smoothed_ce_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        include: &[bool],
    ) -> Result<Var, TensorError> {
        let (rows, vocab) = self.tensor(logits).rc();
        assert_eq!(targets.len(), rows, "label_smoothed_ce_sum: target count");
        assert_eq!(include.len(), rows, "label_smoothed_ce_sum: include count");
        assert!((0.0..1.0).contains(&smoothing), "smoothing must be in [0,1)");
        for &t in targets {
            if t >= vocab {
                return Err(TensorError::TargetOutOfRange { id: t, vocab });
            }
        }
        let src = self.data(logits);
        let mut total = 0.0;
        for i in 0..rows {
            if !include[i] {
                continue;
            }
            let row = &src[i * vocab..(i + 1) * vocab];
            total += smoothed_kl_row(row, targets[i], smoothing);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::LabelSmoothedCeSum {
                logits,
                targets: targets.to_vec(),
                smoothing,
                include: include.to_vec(),
            },
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates the grad slot of every
    /// `requires_grad` leaf reachable from `loss`; repeated calls without
    /// `zero_grad` accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.tensor(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut adj);
            let node = &mut self.nodes[idx];
            if node.tensor.requires_grad {
                match node.tensor.grad.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => node.tensor.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Push the adjoint `g` of node `idx` into its inputs.
    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let acc = |adj: &mut [Option<Vec<f64>>], v: Var, add: &dyn Fn(&mut [f64])| {
            let slot = &mut adj[v.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; self.nodes[v.0].tensor.numel()]);
            }
            add(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ar, ac) = self.tensor(*a).rc();
                let (_, bc) = self.tensor(*b).rc();
                let adata = self.data(*a);
                let bdata = self.data(*b);
                acc(adj, *a, &|ga| mm_nt_acc(g, bdata, ar, bc, ac, ga));
                acc(adj, *b, &|gb| mm_tn_acc(adata, g, ar, ac, bc, gb));
            }
            Op::Transpose { a } => {
                let (r, c) = self.tensor(*a).rc();
                acc(adj, *a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(adj, *a, &|ga| axpy(1.0, g, ga));
                acc(adj, *b, &|gb| axpy(1.0, g, gb));
            }
            Op::AddRow { a, bias } => {
                let (r, c) = self.tensor(*a).rc();
                acc(adj, *a, &|ga| axpy(1.0, g, ga));
                acc(adj, *bias, &|gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let adata = self.data(*a);
                let bdata = self.data(*b);
                acc(adj, *a, &|ga| {
                    for ((ga, gv), bv) in ga.iter_mut().zip(g).zip(bdata) {
                        *ga += gv * bv;
                    }
                });
                acc(adj, *b, &|gb| {
                    for ((gb, gv), av) in gb.iter_mut().zip(g).zip(adata) {
                        *gb += gv * av;
                    }
                });
            }
            Op::ScalarMul { s, a } => {
                let sval = self.data(*s)[0];
                let adata = self.data(*a);
                acc(adj, *s, &|gs| {
                    gs[0] += g.iter().zip(adata).map(|(gv, av)| gv * av).sum::<f64>();
                });
                acc(adj, *a, &|ga| axpy(sval, g, ga));
            }
            Op::Scale { a, k } => {
                acc(adj, *a, &|ga| axpy(*k, g, ga));
            }
            Op::AddConst { a } => {
                acc(adj, *a, &|ga| axpy(1.0, g, ga));
            }
            Op::MulConst { a, mask } => {
                acc(adj, *a, &|ga| {
                    for ((ga, gv), m) in ga.iter_mut().zip(g).zip(mask) {
                        *ga += gv * m;
                    }
                });
            }
            Op::Activation { a, kind } => {
                let input = self.data(*a);
                let output = &node.tensor.data;
                acc(adj, *a, &|ga| {
                    for i in 0..ga.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if input[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => output[i] * (1.0 - output[i]),
                            Activation::Tanh => 1.0 - output[i] * output[i],
                            Activation::Identity => 1.0,
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let (r, c) = self.tensor(*a).rc();
                let out = &node.tensor.data;
                acc(adj, *a, &|ga| {
                    for i in 0..r {
                        let s = &out[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = s.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                        let garow = &mut ga[i * c..(i + 1) * c];
                        for j in 0..c {
                            garow[j] += s[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = self.tensor(*x).rc();
                let src = self.data(*x);
                let gdata = self.data(*gain);
                acc(adj, *x, &|gx| {
                    for i in 0..r {
                        let row = &src[i * c..(i + 1) * c];
                        let (mean, inv_std) = row_moments(row);
                        let grow = &g[i * c..(i + 1) * c];
                        // ghat = upstream grad through the affine gain
                        let mut ghat_mean = 0.0;
                        let mut ghat_xhat_mean = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv_std;
                            let ghat = grow[j] * gdata[j];
                            ghat_mean += ghat;
                            ghat_xhat_mean += ghat * xhat;
                        }
                        ghat_mean /= c as f64;
                        ghat_xhat_mean /= c as f64;
                        let gxrow = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv_std;
                            let ghat = grow[j] * gdata[j];
                            gxrow[j] += inv_std * (ghat - ghat_mean - xhat * ghat_xhat_mean);
                        }
                    }
                });
                acc(adj, *gain, &|gg| {
                    for i in 0..r {
                        let row = &src[i * c..(i + 1) * c];
                        let (mean, inv_std) = row_moments(row);
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv_std;
                            gg[j] += g[i * c + j] * xhat;
                        }
                    }
                });
                acc(adj, *bias, &|gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let (_, cols) = self.tensor(*table).rc();
                acc(adj, *table, &|gt| {
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] += g[pos * cols + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let (r, total_c) = node.tensor.rc();
                let mut offset = 0;
                for &p in parts {
                    let (_, pc) = self.tensor(p).rc();
                    let off = offset;
                    acc(adj, p, &|gp| {
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * total_c + off + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.tensor(p).numel();
                    let off = offset;
                    acc(adj, p, &|gp| axpy(1.0, &g[off..off + n], gp));
                    offset += n;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (r, c) = self.tensor(*a).rc();
                acc(adj, *a, &|ga| {
                    for i in 0..r {
                        for j in 0..*len {
                            ga[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(adj, *a, &|ga| {
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::MeanMasked { a, mask } => {
                let n = self.tensor(*a).numel();
                let count = match mask {
                    Some(m) => m.iter().filter(|&&x| !x).count(),
                    None => n,
                } as f64;
                acc(adj, *a, &|ga| {
                    for i in 0..n {
                        let keep = mask.as_ref().is_none_or(|m| !m[i]);
                        if keep {
                            ga[i] += g[0] / count;
                        }
                    }
                });
            }
            Op::LabelSmoothedCeSum {
                logits,
                targets,
                smoothing,
                include,
            } => {
                let (rows, vocab) = self.tensor(*logits).rc();
                let src = self.data(*logits);
                acc(adj, *logits, &|gl| {
                    let mut probs = vec![0.0; vocab];
                    for i in 0..rows {
                        if !include[i] {
                            continue;
                        }
                        let row = &src[i * vocab..(i + 1) * vocab];
                        softmax_row_into(row, None, &mut probs);
                        let off = smoothing / (vocab as f64 - 1.0);
                        let grow = &mut gl[i * vocab..(i + 1) * vocab];
                        for v in 0..vocab {
                            let p = if v == targets[i] {
                                1.0 - smoothing
                            } else {
                                off
                            };
                            grow[v] += g[0] * (probs[v] - p);
                        }
                    }
                });
            }
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += k * xv;
    }
}

/// out += a[m x k] · b[k x n]
fn mm_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m x k] += g[m x n] · b[k x n]^T
fn mm_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *o += s;
        }
    }
}

/// out[k x n] += a[m x k]^T · g[m x n]
fn mm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn softmax_row_into(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if mask.is_none_or(|m| !m[j]) && v > max {
            max = v;
        }
    }
    let mut denom = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if mask.is_none_or(|m| !m[j]) {
            let e = (v - max).exp();
            out[j] = e;
            denom += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn masked_sum_count(data: &[f64], mask: Option<&[bool]>) -> (f64, usize) {
    match mask {
        None => (data.iter().sum(), data.len()),
        Some(m) => {
            let mut total = 0.0;
            let mut count = 0;
            for (v, &excluded) in data.iter().zip(m) {
                if !excluded {
                    total += v;
                    count += 1;
                }
            }
            (total, count)
        }
    }
}

/// KL from the smoothed one-hot distribution to softmax(row).
fn smoothed_kl_row(row: &[f64], target: usize, smoothing: f64) -> f64 {
    let vocab = row.len();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let log_q = |v: usize| row[v] - max - log_denom;
    let gold = 1.0 - smoothing;
    let off = smoothing / (vocab as f64 - 1.0);
    // entropy term: sum of p ln p, with 0 ln 0 = 0
    let mut loss = if gold > 0.0 { gold * gold.ln() } else { 0.0 };
    if off > 0.0 {
        loss += smoothing * off.ln();
    }
    loss -= gold * log_q(target);
    if off > 0.0 {
        for v in 0..vocab {
            if v != target {
                loss -= off * log_q(v);
            }
        }
    }
    loss
}
