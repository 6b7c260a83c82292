//! Finite-difference check of pool gradients through a few cell steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cells::{CellFamily, CellSpec, CellState, RecurrentCell, StateVars};
use crate::error::{Error, Result};
use crate::restriction::InitSpec;
use crate::tape::{Fault, Tape};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub family: CellFamily,
    pub hidden: usize,
    pub input: usize,
    pub rate: f64,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    /// Deliberately perturb one backward rule; the check must then fail.
    #[doc(hidden)]
    pub corrupt_backward: bool,
}

impl GradcheckOptions {
    pub fn new(family: CellFamily, hidden: usize, input: usize, rate: f64) -> Self {
        Self {
            family,
            hidden,
            input,
            rate,
            seed: 0,
            steps: 3,
            batch: 2,
            corrupt_backward: false,
        }
    }
}

/// A single pool entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PoolEntry {
    /// `"weight"` or `"bias"`.
    pub tensor: &'static str,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub family: CellFamily,
    pub hidden: usize,
    pub input: usize,
    pub rate: f64,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<PoolEntry>,
    /// Pool entries read by more than one (input, gate) view.
    pub aliased_entries: usize,
    /// Largest relative error between the sum of per-view analytic
    /// gradients and the finite difference at aliased entries.
    pub alias_max_rel_error: f64,
    pub pass: bool,
}

struct Problem {
    cell: RecurrentCell,
    xs: Vec<Tensor>,
    probes: Vec<Tensor>,
    init: CellState,
}

fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).expect("positive shape")
}

fn slot<'a>(p: &'a mut Problem, tensor: &str, idx: usize) -> &'a mut f64 {
    if tensor == "weight" {
        &mut p.cell.pool.weight.data_mut()[idx]
    } else {
        &mut p.cell.pool.bias.data_mut()[idx]
    }
}

impl Problem {
    fn new(o: &GradcheckOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
        let spec = CellSpec::uniform(o.family, o.input, o.hidden, o.rate);
        let cell = RecurrentCell::new(spec, InitSpec::Uniform { bound: 1.0 }, &mut rng)?;
        let xs = (0..o.steps).map(|_| uniform(&[o.input, o.batch], &mut rng)).collect();
        let probes = (0..o.steps).map(|_| uniform(&[o.hidden, o.batch], &mut rng)).collect();
        let h = uniform(&[o.hidden, o.batch], &mut rng);
        let c = o.family.has_cell_state().then(|| uniform(&[o.hidden, o.batch], &mut rng));
        Ok(Self {
            cell,
            xs,
            probes,
            init: CellState { h, c },
        })
    }

    /// Records `Σ_t sum(h_t ⊙ R_t)` and returns the loss node and bound cell.
    fn record(&self, tape: &mut Tape, trainable: bool) -> Result<(crate::tape::Var, crate::cells::BoundCell)> {
        let bound = self.cell.bind(tape, trainable)?;
        let mut state = StateVars::detached(tape, &self.init);
        let mut total = None;
        for (x, r) in self.xs.iter().zip(&self.probes) {
            let x = tape.constant(x.clone());
            state = bound.step(tape, x, &state)?;
            let r = tape.constant(r.clone());
            let prod = tape.mul(state.h, r)?;
            let s = tape.sum(prod)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        let loss = total.ok_or_else(|| Error::validation("gradcheck needs at least one step"))?;
        Ok((loss, bound))
    }

    fn loss(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.record(&mut tape, false)?;
        Ok(tape.value(loss).item())
    }
}

/// Compares analytic pool gradients with central differences over every
/// trainable pool entry.
pub fn gradcheck(o: &GradcheckOptions) -> Result<GradcheckReport> {
    if o.hidden == 0 || o.input == 0 || o.steps == 0 || o.batch == 0 {
        return Err(Error::validation("gradcheck dimensions must be positive"));
    }
    let mut problem = Problem::new(o)?;
    let plan = problem.cell.plan.clone();

    let mut tape = if o.corrupt_backward {
        Tape::with_fault(Fault::TanhDerivative)
    } else {
        Tape::new()
    };
    let (loss, bound) = problem.record(&mut tape, true)?;
    tape.backward(loss)?;
    let zeros_w = Tensor::zeros(problem.cell.pool.weight.shape());
    let zeros_b = Tensor::zeros(problem.cell.pool.bias.shape());
    let grad_w = tape.grad(bound.pool_weight).unwrap_or(&zeros_w).clone();
    let grad_b = tape.grad(bound.pool_bias).unwrap_or(&zeros_b).clone();

    // Per-view paths summed back onto the pool, separately from the tape's own scatter.
    let cols = plan.pool_cols();
    let mut view_sum_w = vec![0.0; plan.pool_rows() * cols];
    let mut view_sum_b = vec![0.0; plan.pool_rows()];
    let mut readers_w = vec![0usize; plan.pool_rows() * cols];
    let mut readers_b = vec![0usize; plan.pool_rows()];
    for i in 0..plan.inputs() {
        let k = plan.input_sizes()[i];
        let gw = tape.grad(bound.weights[i]);
        let gb = tape.grad(bound.biases[i]);
        for j in 0..plan.gates() {
            let view = plan.view(i, j)?;
            for (local, &row) in view.rows.iter().enumerate() {
                let stacked = j * plan.hidden() + local;
                for c in 0..k {
                    readers_w[row * cols + c] += 1;
                    if let Some(g) = gw {
                        view_sum_w[row * cols + c] += g.get(stacked, c);
                    }
                }
                readers_b[row] += 1;
                if let Some(g) = gb {
                    view_sum_b[row] += g.data()[stacked];
                }
            }
        }
    }

    let mut report = GradcheckReport {
        family: o.family,
        hidden: o.hidden,
        input: o.input,
        rate: o.rate,
        entries_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        aliased_entries: 0,
        alias_max_rel_error: 0.0,
        pass: false,
    };

    let weight_mask = problem.cell.pool.weight_mask().to_vec();
    let bias_mask = problem.cell.pool.bias_mask().to_vec();
    for (tensor, mask) in [("weight", &weight_mask), ("bias", &bias_mask)] {
        for idx in 0..mask.len() {
            if !mask[idx] {
                continue;
            }
            let fd = {
                let orig = *slot(&mut problem, tensor, idx);
                *slot(&mut problem, tensor, idx) = orig + FD_STEP;
                let up = problem.loss()?;
                *slot(&mut problem, tensor, idx) = orig - FD_STEP;
                let down = problem.loss()?;
                *slot(&mut problem, tensor, idx) = orig;
                (up - down) / (2.0 * FD_STEP)
            };
            let (analytic, via_views, readers) = if tensor == "weight" {
                (grad_w.data()[idx], view_sum_w[idx], readers_w[idx])
            } else {
                (grad_b.data()[idx], view_sum_b[idx], readers_b[idx])
            };
            let err = relative_error(analytic, fd);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                let (row, col) = if tensor == "weight" { (idx / cols, idx % cols) } else { (idx, 0) };
                report.worst = Some(PoolEntry { tensor, row, col });
            }
            if readers > 1 {
                report.aliased_entries += 1;
                report.alias_max_rel_error = report.alias_max_rel_error.max(relative_error(via_views, fd));
            }
        }
    }
    report.pass = report.max_rel_error < TOLERANCE && report.alias_max_rel_error < TOLERANCE;
    Ok(report)
}
