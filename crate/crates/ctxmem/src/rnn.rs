//! Recurrent cells used by the contextual merging step. The sequence axis is
//! the memory index, so a step consumes one [S x d] slice per time step with
//! the source positions acting as the batch.

use crate::tensor::{Activation, Tape, Var};
use crate::transformer::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnnCore {
    Rnn,
    Lstm,
    Gru,
}

impl RnnCore {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rnn" => Some(RnnCore::Rnn),
            "lstm" => Some(RnnCore::Lstm),
            "gru" => Some(RnnCore::Gru),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RnnCore::Rnn => "rnn",
            RnnCore::Lstm => "lstm",
            RnnCore::Gru => "gru",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnnDirection {
    Forward,
    Backward,
    Bidirectional,
}

impl RnnDirection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward" => Some(RnnDirection::Forward),
            "backward" => Some(RnnDirection::Backward),
            "bidirectional" => Some(RnnDirection::Bidirectional),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RnnDirection::Forward => "forward",
            RnnDirection::Backward => "backward",
            RnnDirection::Bidirectional => "bidirectional",
        }
    }
}

/// One gate's affine parameters: x W_ih + h W_hh + b.
pub struct GateVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

pub enum RnnCellVars {
    Rnn {
        gate: GateVars,
        activation: Activation,
    },
    Lstm {
        input: GateVars,
        forget: GateVars,
        cell: GateVars,
        output: GateVars,
    },
    Gru {
        reset: GateVars,
        update: GateVars,
        candidate: GateVars,
    },
}

/// Hidden state; the cell slot is used by LSTM only.
pub struct RnnState {
    pub h: Var,
    pub c: Option<Var>,
}

pub fn zero_state(tape: &mut Tape, cell: &RnnCellVars, rows: usize, dim: usize) -> RnnState {
    let h = tape.input(crate::tensor::Tensor::zeros(vec![rows, dim]));
    let c = match cell {
        RnnCellVars::Lstm { .. } => {
            Some(tape.input(crate::tensor::Tensor::zeros(vec![rows, dim])))
        }
        _ => None,
    };
    RnnState { h, c }
}

fn gate_preact(
    tape: &mut Tape,
    x: Var,
    h: Var,
    gate: &GateVars,
) -> Result<Var, ModelError> {
    let xi = tape.matmul(x, gate.w_ih)?;
    let hi = tape.matmul(h, gate.w_hh)?;
    let sum = tape.add(xi, hi)?;
    Ok(tape.add_row(sum, gate.b)?)
}

/// Advance the recurrence by one step on input `x` of shape [rows x d].
pub fn step(
    tape: &mut Tape,
    cell: &RnnCellVars,
    x: Var,
    state: &RnnState,
) -> Result<RnnState, ModelError> {
    match cell {
        RnnCellVars::Rnn { gate, activation } => {
            let pre = gate_preact(tape, x, state.h, gate)?;
            let h = tape.activation(pre, *activation);
            Ok(RnnState { h, c: None })
        }
        RnnCellVars::Lstm {
            input,
            forget,
            cell: cell_gate,
            output,
        } => {
            let c_prev = state.c.expect("LSTM state carries a cell slot");
            let i_pre = gate_preact(tape, x, state.h, input)?;
            let i = tape.activation(i_pre, Activation::Sigmoid);
            let f_pre = gate_preact(tape, x, state.h, forget)?;
            let f = tape.activation(f_pre, Activation::Sigmoid);
            let g_pre = gate_preact(tape, x, state.h, cell_gate)?;
            let g = tape.activation(g_pre, Activation::Tanh);
            let o_pre = gate_preact(tape, x, state.h, output)?;
            let o = tape.activation(o_pre, Activation::Sigmoid);
            let keep = tape.mul(f, c_prev)?;
            let write = tape.mul(i, g)?;
            let c = tape.add(keep, write)?;
            let c_act = tape.activation(c, Activation::Tanh);
            let h = tape.mul(o, c_act)?;
            Ok(RnnState { h, c: Some(c) })
        }
        RnnCellVars::Gru {
            reset,
            update,
            candidate,
        } => {
            let r_pre = gate_preact(tape, x, state.h, reset)?;
            let r = tape.activation(r_pre, Activation::Sigmoid);
            let z_pre = gate_preact(tape, x, state.h, update)?;
            let z = tape.activation(z_pre, Activation::Sigmoid);
            let gated_h = tape.mul(r, state.h)?;
            let n_x = tape.matmul(x, candidate.w_ih)?;
            let n_h = tape.matmul(gated_h, candidate.w_hh)?;
            let n_sum = tape.add(n_x, n_h)?;
            let n_pre = tape.add_row(n_sum, candidate.b)?;
            let n = tape.activation(n_pre, Activation::Tanh);
            // h' = (1 - z) * h + z * n
            let neg_z = tape.scale(z, -1.0);
            let one_minus_z = tape.add_const(neg_z, 1.0);
            let carry = tape.mul(one_minus_z, state.h)?;
            let fresh = tape.mul(z, n)?;
            let h = tape.add(carry, fresh)?;
            Ok(RnnState { h, c: None })
        }
    }
}

/// Run the recurrence over `inputs` in order and return the final hidden
/// state (h_m). The initial state is zero.
pub fn run_final(
    tape: &mut Tape,
    cell: &RnnCellVars,
    inputs: &[Var],
) -> Result<Var, ModelError> {
    assert!(!inputs.is_empty(), "recurrence needs at least one step");
    let (rows, dim) = tape.tensor(inputs[0]).rc();
    let mut state = zero_state(tape, cell, rows, dim);
    for &x in inputs {
        state = step(tape, cell, x, &state)?;
    }
    Ok(state.h)
}
