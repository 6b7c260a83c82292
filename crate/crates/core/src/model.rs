//! A stacked restricted-cell language model with an embedding/softmax head.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{stack_forward, CellFamily, CellSpec, CellState, Dropout, RecurrentCell, StateVars};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::head::{lm_head_forward, HeadCounts, LMHead};
use crate::restriction::{InitSpec, ParamCounts};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Uniform init range of the embedding table.
pub const EMBEDDING_INIT_RANGE: f64 = 0.1;

/// Sharing rates: one scalar for every (input, gate) pair, or a full
/// `2 × gates` matrix applied to every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rates {
    Uniform(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Rates {
    pub fn matrix(&self, gates: usize) -> Vec<Vec<f64>> {
        match self {
            Rates::Uniform(r) => vec![vec![*r; gates]; 2],
            Rates::Matrix(m) => m.clone(),
        }
    }
}

impl Default for Rates {
    fn default() -> Self {
        Rates::Uniform(0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: CellFamily,
    pub layers: usize,
    pub hidden: usize,
    pub emb: usize,
    pub rates: Rates,
    pub tied: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: CellFamily::Lstm,
            layers: 3,
            hidden: 200,
            emb: 200,
            rates: Rates::default(),
            tied: true,
        }
    }
}

impl ModelConfig {
    pub fn layer_specs(&self) -> Result<Vec<CellSpec>> {
        if self.layers == 0 || self.hidden == 0 || self.emb == 0 {
            return Err(Error::config("layers, hidden and emb must all be at least 1"));
        }
        if self.tied && self.emb != self.hidden {
            return Err(Error::config(format!(
                "tied embedding needs emb ({}) equal to hidden ({})",
                self.emb, self.hidden
            )));
        }
        let rates = self.rates.matrix(self.family.gates());
        (0..self.layers)
            .map(|l| {
                let input = if l == 0 { self.emb } else { self.hidden };
                CellSpec::new(self.family, input, self.hidden, rates.clone())
            })
            .collect()
    }

    /// Parameter accounting for a model of this shape over `vocab` tokens.
    pub fn count_parameters(&self, vocab: usize) -> Result<ModelParamCounts> {
        let layers = self
            .layer_specs()?
            .iter()
            .map(|s| Ok(s.plan()?.count_parameters()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParamCounts::new(
            layers,
            LMHead::counts_for(vocab, self.emb, Some(self.hidden), self.tied),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelParamCounts {
    pub layers: Vec<ParamCounts>,
    pub recurrent: ParamCounts,
    pub head: HeadCounts,
}

impl ModelParamCounts {
    pub fn new(layers: Vec<ParamCounts>, head: HeadCounts) -> Self {
        let recurrent = layers.iter().copied().fold(
            ParamCounts {
                unrestricted: 0,
                shared: 0,
                restricted: 0,
            },
            |a, b| a + b,
        );
        Self {
            layers,
            recurrent,
            head,
        }
    }

    /// Recurrent trainables plus the softmax bias.
    pub fn recurrent_with_output_bias(&self) -> usize {
        self.recurrent.restricted + self.head.decoder_bias
    }

    pub fn total(&self) -> usize {
        self.recurrent.restricted + self.head.total()
    }
}

/// Parameters, gradients or optimizer buffers in model order:
/// each layer's pool weight and bias, then embedding, decoder weight (untied only), decoder bias.
pub type ParamList = Vec<Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub layers: Vec<RecurrentCell>,
    pub head: LMHead,
}

/// Result of recording one BPTT window.
#[derive(Debug)]
pub struct WindowPass {
    pub loss: Var,
    pub states: Vec<StateVars>,
    /// Tape leaves of the parameters, in [`ParamList`] order.
    pub params: Vec<Var>,
}

impl LanguageModel {
    pub fn new(config: ModelConfig, vocab: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, vocab, &mut rng)
    }

    pub fn with_rng(config: ModelConfig, vocab: usize, rng: &mut impl Rng) -> Result<Self> {
        let specs = config.layer_specs()?;
        let layers = specs
            .into_iter()
            .map(|s| {
                let init = InitSpec::fan_in(s.hidden_size);
                RecurrentCell::new(s, init, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = LMHead::new(vocab, config.emb, config.hidden, config.tied, EMBEDDING_INIT_RANGE, rng)?;
        Ok(Self { config, layers, head })
    }

    /// Rebuilds a model from its config and stored tensors (in [`ParamList`] order).
    pub fn from_params(config: ModelConfig, params: ParamList) -> Result<Self> {
        let specs = config.layer_specs()?;
        let expected = 2 * specs.len() + if config.tied { 2 } else { 3 };
        if params.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} parameter tensors, found {}",
                params.len()
            )));
        }
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let plan = spec.plan()?;
            let w = it.next().expect("counted");
            let b = it.next().expect("counted");
            let pool = crate::restriction::ParameterPool::from_tensors(&plan, w, b)?;
            layers.push(RecurrentCell { spec, plan, pool });
        }
        let embedding = it.next().expect("counted");
        let decoder = if config.tied { None } else { it.next() };
        let bias = it.next().expect("counted");
        if embedding.rank() != 2 || embedding.cols() != config.emb || bias.shape() != [embedding.rows()] {
            return Err(Error::Format("embedding and decoder bias shapes disagree".into()));
        }
        if let Some(d) = &decoder {
            if d.shape() != [embedding.rows(), config.hidden] {
                return Err(Error::Format("decoder weight shape disagrees with config".into()));
            }
        }
        Ok(Self {
            config,
            layers,
            head: LMHead {
                embedding,
                decoder,
                bias,
            },
        })
    }

    pub fn vocab(&self) -> usize {
        self.head.vocab()
    }

    pub fn param_counts(&self) -> ModelParamCounts {
        ModelParamCounts::new(
            self.layers.iter().map(|c| c.plan.count_parameters()).collect(),
            self.head.counts(),
        )
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 3);
        for l in &self.layers {
            out.push(&l.pool.weight);
            out.push(&l.pool.bias);
        }
        out.push(&self.head.embedding);
        if let Some(d) = &self.head.decoder {
            out.push(d);
        }
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 3);
        for l in &mut self.layers {
            out.push(&mut l.pool.weight);
            out.push(&mut l.pool.bias);
        }
        out.push(&mut self.head.embedding);
        if let Some(d) = &mut self.head.decoder {
            out.push(d);
        }
        out.push(&mut self.head.bias);
        out
    }

    /// Trainable-entry masks aligned with [`LanguageModel::params`]; `None` means fully trainable.
    pub fn param_masks(&self) -> Vec<Option<&[bool]>> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 3);
        for l in &self.layers {
            out.push(Some(l.pool.weight_mask()));
            out.push(Some(l.pool.bias_mask()));
        }
        out.push(None);
        if self.head.decoder.is_some() {
            out.push(None);
        }
        out.push(None);
        out
    }

    pub fn initial_states(&self, batch: usize) -> Vec<CellState> {
        self.layers.iter().map(|l| CellState::zeros(&l.spec, batch)).collect()
    }

    /// Records the loss of one window, starting from detached `states`.
    ///
    /// Dropout applies only when `dropout` is given (training).
    pub fn forward_window<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        states: &[CellState],
        trainable: bool,
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<WindowPass> {
        if states.len() != self.layers.len() {
            return Err(Error::State(format!(
                "{} states for {} layers",
                states.len(),
                self.layers.len()
            )));
        }
        let mut params = Vec::with_capacity(2 * self.layers.len() + 3);
        let mut bound = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let b = layer.bind(tape, trainable)?;
            params.push(b.pool_weight);
            params.push(b.pool_bias);
            bound.push(b);
        }
        let head = self.head.bind(tape, trainable);
        params.push(head.embedding);
        if let Some(d) = head.decoder {
            params.push(d);
        }
        params.push(head.bias);

        let state_vars: Vec<_> = states.iter().map(|s| StateVars::detached(tape, s)).collect();
        let inputs = (0..batch.seq_len)
            .map(|t| tape.embedding(head.embedding, Rc::from(batch.input_row(t))))
            .collect::<Result<Vec<_>>>()?;
        let (outputs, finals) = stack_forward(tape, &bound, &inputs, &state_vars, dropout)?;
        let features = tape.concat_cols(&outputs)?;
        let logits = lm_head_forward(tape, &head, features)?;
        let targets: Rc<[usize]> = batch.targets.iter().map(|&t| t as usize).collect();
        let loss = tape.cross_entropy(logits, targets)?;
        Ok(WindowPass {
            loss,
            states: finals,
            params,
        })
    }
}
