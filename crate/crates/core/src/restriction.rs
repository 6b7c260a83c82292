//! Parameter pools shared between the input-side and hidden-side weights of a
//! recurrent cell.
//!
//! A cell with `m` inputs and `n` gates normally owns `m·n` independent
//! `d × k_i` weight matrices and bias vectors. Here every one of them is a
//! *view* into a single pool `W: (d_r, k_r)`, `b: (d_r,)`:
//!
//! * view `(i, j)` starts with `s[i][j] = round(rates[i][j]·d)` rows taken from
//!   the common prefix `W[0..s[i][j]]`, which every view reads;
//! * the remaining `q[i][j] = d − s[i][j]` rows come from a private block
//!   `W[offset(i,j)..offset(i,j)+q[i][j]]` owned by that view alone.
//!
//! Private blocks are laid out input-major after the `s_r = max(s)` prefix
//! rows. Views only use the first `k_i` columns; pool entries that no view
//! covers are placeholders and are excluded from training and counting.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row layout of a parameter pool for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictionPlan {
    inputs: usize,
    gates: usize,
    hidden: usize,
    input_sizes: Vec<usize>,
    rates: Vec<Vec<f64>>,
    shared: Vec<Vec<usize>>,
    private: Vec<Vec<usize>>,
    shared_rows: usize,
    pool_cols: usize,
    pool_rows: usize,
    offsets: Vec<Vec<usize>>,
}

/// Round half away from zero.
fn round_rows(rate: f64, d: usize) -> usize {
    (rate * d as f64).round() as usize
}

impl RestrictionPlan {
    /// Lays out the pool for `inputs` inputs of sizes `input_sizes`, `gates`
    /// outputs of `hidden` rows each, and an `inputs × gates` rate matrix.
    pub fn new(
        inputs: usize,
        gates: usize,
        hidden: usize,
        input_sizes: &[usize],
        rates: &[Vec<f64>],
    ) -> Result<Self> {
        if inputs == 0 || gates == 0 {
            return Err(Error::validation("a cell needs at least one input and one gate"));
        }
        if hidden == 0 {
            return Err(Error::validation("output channel size d must be at least 1"));
        }
        if input_sizes.len() != inputs {
            return Err(Error::validation(format!(
                "expected {inputs} input sizes, got {}",
                input_sizes.len()
            )));
        }
        if input_sizes.contains(&0) {
            return Err(Error::validation("input channel sizes must be at least 1"));
        }
        if rates.len() != inputs || rates.iter().any(|row| row.len() != gates) {
            return Err(Error::validation(format!(
                "rate matrix must be {inputs}×{gates}"
            )));
        }
        for (i, row) in rates.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::validation(format!(
                        "sharing rate [{i}][{j}] = {r} is outside [0, 1]"
                    )));
                }
            }
        }

        let shared: Vec<Vec<usize>> = rates
            .iter()
            .map(|row| row.iter().map(|&r| round_rows(r, hidden)).collect())
            .collect();
        let private: Vec<Vec<usize>> = shared
            .iter()
            .map(|row| row.iter().map(|&s| hidden - s).collect())
            .collect();
        let shared_rows = shared.iter().flatten().copied().max().unwrap_or(0);
        let pool_cols = input_sizes.iter().copied().max().unwrap_or(0);

        let mut offsets = vec![vec![0; gates]; inputs];
        let mut next = shared_rows;
        for i in 0..inputs {
            for j in 0..gates {
                offsets[i][j] = next;
                next += private[i][j];
            }
        }

        Ok(Self {
            inputs,
            gates,
            hidden,
            input_sizes: input_sizes.to_vec(),
            rates: rates.to_vec(),
            shared,
            private,
            shared_rows,
            pool_cols,
            pool_rows: next,
            offsets,
        })
    }

    /// Same rate for every (input, gate) pair.
    pub fn uniform(inputs: usize, gates: usize, hidden: usize, input_sizes: &[usize], rate: f64) -> Result<Self> {
        Self::new(inputs, gates, hidden, input_sizes, &vec![vec![rate; gates]; inputs])
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn gates(&self) -> usize {
        self.gates
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_sizes(&self) -> &[usize] {
        &self.input_sizes
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    /// Shared row count `s[i][j]`.
    pub fn shared(&self, i: usize, j: usize) -> usize {
        self.shared[i][j]
    }

    /// Private row count `q[i][j]`.
    pub fn private(&self, i: usize, j: usize) -> usize {
        self.private[i][j]
    }

    /// First pool row of the private block of view `(i, j)`.
    pub fn offset(&self, i: usize, j: usize) -> usize {
        self.offsets[i][j]
    }

    /// `s_r`: the number of prefix rows available for sharing.
    pub fn shared_rows(&self) -> usize {
        self.shared_rows
    }

    /// `k_r`: pool column count.
    pub fn pool_cols(&self) -> usize {
        self.pool_cols
    }

    /// `d_r`: pool row count.
    pub fn pool_rows(&self) -> usize {
        self.pool_rows
    }

    fn check_index(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.inputs || j >= self.gates {
            return Err(Error::validation(format!(
                "view ({i}, {j}) out of range for a {}×{} plan",
                self.inputs, self.gates
            )));
        }
        Ok(())
    }

    /// Pool rows read by view `(i, j)`, in view order.
    pub fn view(&self, i: usize, j: usize) -> Result<RestrictedView> {
        self.check_index(i, j)?;
        Ok(RestrictedView {
            input: i,
            gate: j,
            rows: self.view_rows(i, j),
            cols: self.input_sizes[i],
        })
    }

    fn view_rows(&self, i: usize, j: usize) -> Vec<usize> {
        let off = self.offsets[i][j];
        (0..self.shared[i][j])
            .chain(off..off + self.private[i][j])
            .collect()
    }

    /// Rows of all `n` gate views of input `i`, stacked gate after gate.
    ///
    /// Gathering these rows yields the `(n·d) × k_i` matrix that computes all
    /// gate pre-activations for input `i` in one product.
    pub fn stacked_rows(&self, i: usize) -> Result<Vec<usize>> {
        self.check_index(i, 0)?;
        Ok((0..self.gates).flat_map(|j| self.view_rows(i, j)).collect())
    }

    /// `(weight, bias)` coverage masks over the pool: true where some view reads.
    pub fn coverage(&self) -> (Vec<bool>, Vec<bool>) {
        let kr = self.pool_cols;
        let mut weight = vec![false; self.pool_rows * kr];
        let mut bias = vec![false; self.pool_rows];
        for i in 0..self.inputs {
            let k = self.input_sizes[i];
            for j in 0..self.gates {
                for r in self.view_rows(i, j) {
                    weight[r * kr..r * kr + k].iter_mut().for_each(|m| *m = true);
                    bias[r] = true;
                }
            }
        }
        (weight, bias)
    }

    /// Parameter accounting by enumeration of every distinct pool entry
    /// that some view reads.
    pub fn count_parameters(&self) -> ParamCounts {
        let unrestricted: usize = self
            .input_sizes
            .iter()
            .map(|&k| self.gates * self.hidden * (k + 1))
            .sum();
        let (weight, bias) = self.coverage();
        let restricted = weight.iter().filter(|&&m| m).count() + bias.iter().filter(|&&m| m).count();
        ParamCounts {
            unrestricted,
            shared: unrestricted - restricted,
            restricted,
        }
    }

    /// `P_r / P` from the enumerated counts.
    pub fn compression_rate(&self) -> f64 {
        self.count_parameters().compression()
    }

    /// Closed-form saved count `(mn − 1)·min(s)·(min(k) + 1)`.
    ///
    /// Exact when every rate and every input size is equal; an
    /// approximation otherwise.
    pub fn closed_form_shared(&self) -> usize {
        let min_s = self.shared.iter().flatten().copied().min().unwrap_or(0);
        let min_k = self.input_sizes.iter().copied().min().unwrap_or(0);
        (self.inputs * self.gates - 1) * min_s * (min_k + 1)
    }
}

/// Closed-form compression `(mnd − (mn − 1)s) / (mnd)` for uniform structure.
pub fn uniform_compression(inputs: usize, gates: usize, hidden: usize, shared: usize) -> f64 {
    let mn = (inputs * gates) as f64;
    let d = hidden as f64;
    (mn * d - (mn - 1.0) * shared as f64) / (mn * d)
}

/// The pool rows making up one restricted weight view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestrictedView {
    pub input: usize,
    pub gate: usize,
    pub rows: Vec<usize>,
    pub cols: usize,
}

impl RestrictedView {
    pub fn rows_rc(&self) -> Rc<[usize]> {
        Rc::from(self.rows.as_slice())
    }
}

/// Unrestricted, saved and restricted parameter counts of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// `P`: parameters of the equivalent cell without sharing.
    pub unrestricted: usize,
    /// `S_r`: parameters saved by sharing.
    pub shared: usize,
    /// `P_r = P − S_r`: distinct trainable parameters.
    pub restricted: usize,
}

impl ParamCounts {
    pub fn compression(&self) -> f64 {
        self.restricted as f64 / self.unrestricted as f64
    }
}

impl std::ops::Add for ParamCounts {
    type Output = ParamCounts;

    fn add(self, rhs: Self) -> Self {
        ParamCounts {
            unrestricted: self.unrestricted + rhs.unrestricted,
            shared: self.shared + rhs.shared,
            restricted: self.restricted + rhs.restricted,
        }
    }
}

/// How pool entries are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitSpec {
    Zeros,
    /// Independent draws from `U(-bound, bound)`.
    Uniform { bound: f64 },
}

impl InitSpec {
    /// `U(-1/√d, 1/√d)` for hidden size `d`.
    pub fn fan_in(hidden: usize) -> Self {
        InitSpec::Uniform {
            bound: 1.0 / (hidden as f64).sqrt(),
        }
    }
}

/// The master weight matrix and bias vector every view of a cell reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPool {
    pub weight: Tensor,
    pub bias: Tensor,
    weight_mask: Vec<bool>,
    bias_mask: Vec<bool>,
}

impl ParameterPool {
    pub fn build(plan: &RestrictionPlan, init: InitSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(plan, init, &mut rng)
    }

    /// Draws one value per pool entry in row-major order (weights, then
    /// biases). Placeholder entries are set to zero after drawing so the
    /// stream of draws does not depend on coverage.
    pub fn build_with_rng(plan: &RestrictionPlan, init: InitSpec, rng: &mut impl Rng) -> Self {
        let (rows, cols) = (plan.pool_rows(), plan.pool_cols());
        let mut draw = |n: usize| -> Vec<f64> {
            match init {
                InitSpec::Zeros => vec![0.0; n],
                InitSpec::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            }
        };
        let mut weight = draw(rows * cols);
        let mut bias = draw(rows);
        let (weight_mask, bias_mask) = plan.coverage();
        for (w, &m) in weight.iter_mut().zip(&weight_mask) {
            if !m {
                *w = 0.0;
            }
        }
        for (b, &m) in bias.iter_mut().zip(&bias_mask) {
            if !m {
                *b = 0.0;
            }
        }
        // A plan with every rate at 1 and d rows still has d_r >= 1, so
        // the extents are positive.
        Self {
            weight: Tensor::new(&[rows, cols], weight).expect("pool extents are positive"),
            bias: Tensor::new(&[rows], bias).expect("pool extents are positive"),
            weight_mask,
            bias_mask,
        }
    }

    /// Reassembles a pool from stored tensors, checking them against the plan.
    pub fn from_tensors(plan: &RestrictionPlan, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape() != [plan.pool_rows(), plan.pool_cols()] {
            return Err(Error::shape(
                "ParameterPool::from_tensors",
                weight.shape(),
                &[plan.pool_rows(), plan.pool_cols()],
            ));
        }
        if bias.shape() != [plan.pool_rows()] {
            return Err(Error::shape("ParameterPool::from_tensors", bias.shape(), &[plan.pool_rows()]));
        }
        let (weight_mask, bias_mask) = plan.coverage();
        Ok(Self {
            weight,
            bias,
            weight_mask,
            bias_mask,
        })
    }

    /// Trainable-entry mask over `weight`, row-major.
    pub fn weight_mask(&self) -> &[bool] {
        &self.weight_mask
    }

    pub fn bias_mask(&self) -> &[bool] {
        &self.bias_mask
    }

    pub fn trainable_count(&self) -> usize {
        self.weight_mask.iter().chain(&self.bias_mask).filter(|&&m| m).count()
    }

    /// Copies view `(i, j)` out of the pool as a `d × k_i` matrix and a length-`d` bias.
    pub fn view(&self, plan: &RestrictionPlan, i: usize, j: usize) -> Result<(Tensor, Tensor)> {
        let v = plan.view(i, j)?;
        let mut w = Vec::with_capacity(v.rows.len() * v.cols);
        for &r in &v.rows {
            w.extend_from_slice(&self.weight.row(r)[..v.cols]);
        }
        let b = v.rows.iter().map(|&r| self.bias.data()[r]).collect();
        Ok((Tensor::new(&[v.rows.len(), v.cols], w)?, Tensor::vector(b)))
    }
}
