//! Convolutional LSTM unit. Gates are 3×3 same-padded convolutions of the
//! input and the previous hidden state, so the spatial layout survives the
//! recurrence. Hidden width equals input width.

use crate::error::{Error, Result};
use crate::tensor::{msra_init, seed_for_name, Bindings, Graph, ParamSet, Real, Tensor, Var};

pub const KERNEL: usize = 3;

/// Gate order inside the stacked `4C` pre-activation.
const INPUT_GATE: usize = 0;
const FORGET_GATE: usize = 1;
const OUTPUT_GATE: usize = 2;
const CANDIDATE: usize = 3;

/// Hidden and cell tensors of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Real> BranchState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        BranchState {
            hidden: Tensor::zeros(shape),
            cell: Tensor::zeros(shape),
        }
    }
}

/// Graph handles of a branch state.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub hidden: Var,
    pub cell: Var,
}

pub fn input_weight_name(prefix: &str) -> String {
    format!("{prefix}.wx")
}

pub fn hidden_weight_name(prefix: &str) -> String {
    format!("{prefix}.wh")
}

pub fn bias_name(prefix: &str) -> String {
    format!("{prefix}.bias")
}

pub fn init_params<T: Real>(params: &mut ParamSet<T>, prefix: &str, channels: usize, seed: u64) -> Result<()> {
    let shape = [4 * channels, channels, KERNEL, KERNEL];
    let fan_in = channels * KERNEL * KERNEL;
    for name in [input_weight_name(prefix), hidden_weight_name(prefix)] {
        let w = msra_init(&shape, fan_in, seed_for_name(seed, &name));
        params.insert(&name, w, true)?;
    }
    params.insert(&bias_name(prefix), Tensor::zeros(&[4 * channels]), true)?;
    Ok(())
}

/// One recurrence step. `state == None` means the all-zero initial state.
/// Returns the output (the new hidden state) and the new state.
pub fn step<T: Real>(
    g: &mut Graph<T>,
    params: &Bindings,
    prefix: &str,
    x: Var,
    state: Option<StateVars>,
) -> Result<(Var, StateVars)> {
    let shape = g.shape(x).to_vec();
    let [c, _, _] = shape[..] else {
        return Err(Error::shape("convlstm_step", format!("input must be [C,H,W], got {shape:?}")));
    };
    if let Some(s) = state {
        if g.shape(s.hidden) != shape.as_slice() || g.shape(s.cell) != shape.as_slice() {
            return Err(Error::shape(
                "convlstm_step",
                format!(
                    "input {shape:?} vs hidden {:?} / cell {:?}",
                    g.shape(s.hidden),
                    g.shape(s.cell)
                ),
            ));
        }
    }
    let wx = params.get(&input_weight_name(prefix))?;
    let wh = params.get(&hidden_weight_name(prefix))?;
    let b = params.get(&bias_name(prefix))?;
    if g.shape(wx) != [4 * c, c, KERNEL, KERNEL] {
        return Err(Error::shape(
            "convlstm_step",
            format!("{c}-channel input against weights {:?}", g.shape(wx)),
        ));
    }

    let pad = KERNEL / 2;
    let mut z = g.conv2d(x, wx, Some(b), 1, pad)?;
    // A zero hidden state contributes nothing through Wh.
    if let Some(s) = state {
        let zh = g.conv2d(s.hidden, wh, None, 1, pad)?;
        z = g.add(z, zh)?;
    }
    let gate = |g: &mut Graph<T>, k: usize| g.narrow(z, k * c, c);
    let i = gate(g, INPUT_GATE)?;
    let i = g.sigmoid(i);
    let f = gate(g, FORGET_GATE)?;
    let f = g.sigmoid(f);
    let o = gate(g, OUTPUT_GATE)?;
    let o = g.sigmoid(o);
    let cand = gate(g, CANDIDATE)?;
    let cand = g.tanh(cand);

    let write = g.mul(i, cand)?;
    let cell = match state {
        Some(s) => {
            let keep = g.mul(f, s.cell)?;
            g.add(keep, write)?
        }
        None => write,
    };
    let squashed = g.tanh(cell);
    let hidden = g.mul(o, squashed)?;
    Ok((hidden, StateVars { hidden, cell }))
}

/// Graph-free step over concrete tensors.
pub fn convlstm_step<T: Real>(
    x: &Tensor<T>,
    state: &BranchState<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<(Tensor<T>, BranchState<T>)> {
    let mut g = Graph::new();
    let b = g.bind(params);
    let xv = g.input(x.clone());
    let s = StateVars {
        hidden: g.input(state.hidden.clone()),
        cell: g.input(state.cell.clone()),
    };
    let (out, next) = step(&mut g, &b, prefix, xv, Some(s))?;
    Ok((
        g.value(out).clone(),
        BranchState {
            hidden: g.value(next.hidden).clone(),
            cell: g.value(next.cell).clone(),
        },
    ))
}
