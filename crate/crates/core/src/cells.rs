//! Restricted RNN, GRU and LSTM cells and multi-layer stacking.
//!
//! Every weight matrix a cell multiplies by is gathered from the cell's
//! [`ParameterPool`] through the rows of its [`RestrictionPlan`]. Gate
//! order is fixed: `(i, f, g, o)` for LSTM and `(r, z, n)` for GRU, and gate
//! `j` of input `i` reads view `(i, j)`. Input 0 is the layer input `x_t`
//! and input 1 the previous hidden state `h_{t-1}`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::restriction::{InitSpec, ParameterPool, RestrictionPlan};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellFamily {
    Rnn,
    Gru,
    Lstm,
}

impl CellFamily {
    pub const ALL: [CellFamily; 3] = [CellFamily::Rnn, CellFamily::Gru, CellFamily::Lstm];

    /// Number of gates, i.e. output blocks sharing one pool.
    pub fn gates(self) -> usize {
        match self {
            CellFamily::Rnn => 1,
            CellFamily::Gru => 3,
            CellFamily::Lstm => 4,
        }
    }

    pub fn gate_order(self) -> &'static [&'static str] {
        match self {
            CellFamily::Rnn => &["h"],
            CellFamily::Gru => &["r", "z", "n"],
            CellFamily::Lstm => &["i", "f", "g", "o"],
        }
    }

    pub fn has_cell_state(self) -> bool {
        self == CellFamily::Lstm
    }

    pub fn name(self) -> &'static str {
        match self {
            CellFamily::Rnn => "rnn",
            CellFamily::Gru => "gru",
            CellFamily::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "rrnn" => Ok(CellFamily::Rnn),
            "gru" | "rgru" => Ok(CellFamily::Gru),
            "lstm" | "rlstm" => Ok(CellFamily::Lstm),
            other => Err(Error::validation(format!("unknown cell family {other:?}"))),
        }
    }
}

impl std::fmt::Display for CellFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape and sharing configuration of one recurrent layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub family: CellFamily,
    pub input_size: usize,
    pub hidden_size: usize,
    /// `2 × gates` sharing rates; row 0 for the layer input, row 1 for the hidden state.
    pub rates: Vec<Vec<f64>>,
}

impl CellSpec {
    pub fn new(family: CellFamily, input_size: usize, hidden_size: usize, rates: Vec<Vec<f64>>) -> Result<Self> {
        let n = family.gates();
        if rates.len() != 2 || rates.iter().any(|r| r.len() != n) {
            return Err(Error::config(format!(
                "{family} cells take a 2×{n} rate matrix, got {}×{}",
                rates.len(),
                rates.first().map_or(0, Vec::len)
            )));
        }
        Ok(Self {
            family,
            input_size,
            hidden_size,
            rates,
        })
    }

    pub fn uniform(family: CellFamily, input_size: usize, hidden_size: usize, rate: f64) -> Self {
        Self {
            family,
            input_size,
            hidden_size,
            rates: vec![vec![rate; family.gates()]; 2],
        }
    }

    pub fn plan(&self) -> Result<RestrictionPlan> {
        RestrictionPlan::new(
            2,
            self.family.gates(),
            self.hidden_size,
            &[self.input_size, self.hidden_size],
            &self.rates,
        )
    }
}

/// Recurrent state carried between time steps: `h` (and `c` for LSTM), each `d × batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

impl CellState {
    pub fn zeros(spec: &CellSpec, batch: usize) -> Self {
        let shape = [spec.hidden_size, batch];
        Self {
            h: Tensor::zeros(&shape),
            c: spec.family.has_cell_state().then(|| Tensor::zeros(&shape)),
        }
    }
}

/// A cell state living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateVars {
    pub h: Var,
    pub c: Option<Var>,
}

impl StateVars {
    /// Registers `state` as constants, cutting gradient flow to earlier windows.
    pub fn detached(tape: &mut Tape, state: &CellState) -> Self {
        Self {
            h: tape.constant(state.h.clone()),
            c: state.c.as_ref().map(|c| tape.constant(c.clone())),
        }
    }

    pub fn read(&self, tape: &Tape) -> CellState {
        CellState {
            h: tape.value(self.h).clone(),
            c: self.c.map(|c| tape.value(c).clone()),
        }
    }
}

/// One layer: its spec, pool layout and pool.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCell {
    pub spec: CellSpec,
    pub plan: RestrictionPlan,
    pub pool: ParameterPool,
}

impl RecurrentCell {
    pub fn new(spec: CellSpec, init: InitSpec, rng: &mut impl Rng) -> Result<Self> {
        let plan = spec.plan()?;
        let pool = ParameterPool::build_with_rng(&plan, init, rng);
        Ok(Self { spec, plan, pool })
    }

    pub fn from_pool(spec: CellSpec, pool: ParameterPool) -> Result<Self> {
        let plan = spec.plan()?;
        let pool = ParameterPool::from_tensors(&plan, pool.weight, pool.bias)?;
        Ok(Self { spec, plan, pool })
    }

    /// Records the pool on `tape` and gathers the per-input stacked views.
    ///
    /// With `trainable` the pool tensors are gradient leaves; otherwise constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundCell> {
        let (w, b) = if trainable {
            (tape.param(self.pool.weight.clone()), tape.param(self.pool.bias.clone()))
        } else {
            (tape.constant(self.pool.weight.clone()), tape.constant(self.pool.bias.clone()))
        };
        BoundCell::gather(tape, &self.spec, &self.plan, w, b)
    }

    /// One forward step outside of any training graph.
    pub fn step(&self, x: &Tensor, state: &CellState) -> Result<CellState> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(x.clone());
        let s = StateVars::detached(&mut tape, state);
        let next = bound.step(&mut tape, x, &s)?;
        Ok(next.read(&tape))
    }
}

/// A cell whose pool has been recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundCell {
    pub family: CellFamily,
    pub input_size: usize,
    pub hidden_size: usize,
    pub pool_weight: Var,
    pub pool_bias: Var,
    /// Stacked `(gates·d) × k_i` views, one per input.
    pub weights: [Var; 2],
    /// Stacked `(gates·d)` bias views, one per input.
    pub biases: [Var; 2],
    /// `biases[0] + biases[1]`, for families that never use them apart.
    summed_bias: Option<Var>,
}

impl BoundCell {
    /// Gathers the stacked views of `plan` from pool variables already on `tape`.
    pub fn gather(tape: &mut Tape, spec: &CellSpec, plan: &RestrictionPlan, pool_weight: Var, pool_bias: Var) -> Result<Self> {
        let mut weights = [pool_weight; 2];
        let mut biases = [pool_bias; 2];
        for i in 0..2 {
            let rows: Rc<[usize]> = Rc::from(plan.stacked_rows(i)?);
            weights[i] = tape.gather_rows(pool_weight, rows.clone(), plan.input_sizes()[i])?;
            biases[i] = tape.gather_rows(pool_bias, rows, 0)?;
        }
        let summed_bias = match spec.family {
            CellFamily::Gru => None,
            _ => Some(tape.add(biases[0], biases[1])?),
        };
        Ok(Self {
            family: spec.family,
            input_size: spec.input_size,
            hidden_size: spec.hidden_size,
            pool_weight,
            pool_bias,
            weights,
            biases,
            summed_bias,
        })
    }

    fn check_inputs(&self, tape: &Tape, x: Var, state: &StateVars) -> Result<()> {
        let xs = tape.value(x).shape();
        let hs = tape.value(state.h).shape();
        if xs.len() != 2 || xs[0] != self.input_size {
            return Err(Error::shape("cell input", xs, &[self.input_size, 0]));
        }
        if hs != [self.hidden_size, xs[1]] {
            return Err(Error::shape("cell state", hs, &[self.hidden_size, xs[1]]));
        }
        if let Some(c) = state.c {
            let cs = tape.value(c).shape();
            if cs != hs {
                return Err(Error::shape("cell memory", cs, hs));
            }
        }
        Ok(())
    }

    fn expect_family(&self, family: CellFamily) -> Result<()> {
        if self.family != family {
            return Err(Error::config(format!("{} step applied to a {} cell", family, self.family)));
        }
        Ok(())
    }

    /// Dispatches to the step function of this cell's family.
    pub fn step(&self, tape: &mut Tape, x: Var, state: &StateVars) -> Result<StateVars> {
        match self.family {
            CellFamily::Rnn => rnn_step(tape, self, x, state),
            CellFamily::Gru => gru_step(tape, self, x, state),
            CellFamily::Lstm => lstm_step(tape, self, x, state),
        }
    }

    /// `W_x·x + W_h·h + b_x + b_h` for all gates at once.
    fn summed_preactivation(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let wx = tape.matmul(self.weights[0], x)?;
        let wh = tape.matmul(self.weights[1], h)?;
        let sum = tape.add(wx, wh)?;
        let bias = self.summed_bias.expect("summed bias exists for rnn and lstm");
        tape.add_bias(sum, bias)
    }
}

/// `h_t = tanh(W_xh x_t + b_xh + W_hh h_{t-1} + b_hh)`.
pub fn rnn_step(tape: &mut Tape, cell: &BoundCell, x: Var, state: &StateVars) -> Result<StateVars> {
    cell.expect_family(CellFamily::Rnn)?;
    cell.check_inputs(tape, x, state)?;
    let pre = cell.summed_preactivation(tape, x, state.h)?;
    let h = tape.tanh(pre)?;
    Ok(StateVars { h, c: None })
}

/// LSTM step with gates `(i, f, g, o)`:
/// `c_t = f·c_{t-1} + i·g`, `h_t = o·tanh(c_t)`.
pub fn lstm_step(tape: &mut Tape, cell: &BoundCell, x: Var, state: &StateVars) -> Result<StateVars> {
    cell.expect_family(CellFamily::Lstm)?;
    let c_prev = state
        .c
        .ok_or_else(|| Error::State("lstm step needs a memory cell state".into()))?;
    cell.check_inputs(tape, x, state)?;
    let d = cell.hidden_size;
    let pre = cell.summed_preactivation(tape, x, state.h)?;
    let if_pre = tape.slice_rows(pre, 0, 2 * d)?;
    let g_pre = tape.slice_rows(pre, 2 * d, d)?;
    let o_pre = tape.slice_rows(pre, 3 * d, d)?;
    let if_gates = tape.sigmoid(if_pre)?;
    let i = tape.slice_rows(if_gates, 0, d)?;
    let f = tape.slice_rows(if_gates, d, d)?;
    let g = tape.tanh(g_pre)?;
    let o = tape.sigmoid(o_pre)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c)?;
    let h = tape.mul(o, c_act)?;
    Ok(StateVars { h, c: Some(c) })
}

/// GRU step with gates `(r, z, n)`. The reset gate multiplies the whole
/// hidden-side term of `n`, bias included:
/// `n_t = tanh(W_xn x_t + b_xn + r·(W_hn h_{t-1} + b_hn))`,
/// `h_t = (1 − z)·n_t + z·h_{t-1}`.
pub fn gru_step(tape: &mut Tape, cell: &BoundCell, x: Var, state: &StateVars) -> Result<StateVars> {
    cell.expect_family(CellFamily::Gru)?;
    cell.check_inputs(tape, x, state)?;
    let d = cell.hidden_size;
    let wx = tape.matmul(cell.weights[0], x)?;
    let gx = tape.add_bias(wx, cell.biases[0])?;
    let wh = tape.matmul(cell.weights[1], state.h)?;
    let gh = tape.add_bias(wh, cell.biases[1])?;

    let rz_x = tape.slice_rows(gx, 0, 2 * d)?;
    let rz_h = tape.slice_rows(gh, 0, 2 * d)?;
    let rz_pre = tape.add(rz_x, rz_h)?;
    let rz = tape.sigmoid(rz_pre)?;
    let r = tape.slice_rows(rz, 0, d)?;
    let z = tape.slice_rows(rz, d, d)?;

    let n_x = tape.slice_rows(gx, 2 * d, d)?;
    let n_h = tape.slice_rows(gh, 2 * d, d)?;
    let gated = tape.mul(r, n_h)?;
    let n_pre = tape.add(n_x, gated)?;
    let n = tape.tanh(n_pre)?;

    // (1 − z)·n + z·h  ==  n + z·(h − n)
    let diff = tape.sub(state.h, n)?;
    let carry = tape.mul(z, diff)?;
    let h = tape.add(n, carry)?;
    Ok(StateVars { h, c: None })
}

/// Inverted dropout mask: entries are `0` with probability `p`, else `1/(1−p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::validation(format!("dropout rate {p} must lie in [0, 1)")));
    }
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape, data)
}

/// Train-time dropout settings for [`stack_forward`].
pub struct Dropout<'a, R: Rng> {
    pub p: f64,
    /// Also drop the first layer's input (the embedding output).
    pub on_first_input: bool,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn apply(&mut self, tape: &mut Tape, v: Var) -> Result<Var> {
        if self.p == 0.0 {
            return Ok(v);
        }
        let mask = dropout_mask(tape.value(v).shape(), self.p, self.rng)?;
        tape.apply_mask(v, mask)
    }
}

/// Runs a stack of layers over a window of inputs.
///
/// `inputs` holds one `k × batch` variable per time step. With dropout,
/// masks apply to every layer input (the first only when
/// `on_first_input`) and to the final outputs; recurrent connections are
/// never dropped. Returns the last layer's `h` at every step and the
/// final state of each layer.
pub fn stack_forward<R: Rng>(
    tape: &mut Tape,
    layers: &[BoundCell],
    inputs: &[Var],
    states: &[StateVars],
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<(Vec<Var>, Vec<StateVars>)> {
    if layers.len() != states.len() {
        return Err(Error::config(format!(
            "{} layers but {} initial states",
            layers.len(),
            states.len()
        )));
    }
    for pair in layers.windows(2) {
        if pair[1].input_size != pair[0].hidden_size {
            return Err(Error::config(format!(
                "layer input size {} does not match previous hidden size {}",
                pair[1].input_size, pair[0].hidden_size
            )));
        }
    }
    let mut seq = inputs.to_vec();
    let mut finals = Vec::with_capacity(layers.len());
    for (l, (cell, init)) in layers.iter().zip(states).enumerate() {
        if let Some(d) = dropout.as_mut() {
            if l > 0 || d.on_first_input {
                for v in seq.iter_mut() {
                    *v = d.apply(tape, *v)?;
                }
            }
        }
        let mut state = *init;
        let mut outputs = Vec::with_capacity(seq.len());
        for &x in &seq {
            state = cell.step(tape, x, &state)?;
            outputs.push(state.h);
        }
        finals.push(state);
        seq = outputs;
    }
    if let Some(d) = dropout.as_mut() {
        for v in seq.iter_mut() {
            *v = d.apply(tape, *v)?;
        }
    }
    Ok((seq, finals))
}
