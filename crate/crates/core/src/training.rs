//! Truncated-BPTT training: loss, clipping, SGD with momentum, cosine schedule.

use std::f64::consts::PI;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{CellState, Dropout};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::tape::{softmax_cross_entropy, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt_len: usize,
    pub dropout_p: f64,
    /// Apply dropout to the embedding output as well as between layers.
    pub dropout_embedding: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1.0,
            momentum: 0.9,
            weight_decay: 1e-6,
            clip_norm: 0.25,
            epochs: 100,
            batch_size: 80,
            bptt_len: 35,
            dropout_p: 0.2,
            dropout_embedding: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.clip_norm == 0.0 {
            return Err(Error::validation("clip_norm must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.bptt_len == 0 {
            return Err(Error::validation("batch_size and bptt_len must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `targets` under column-wise softmax of
/// `logits` (`vocab × positions`).
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.cols() != targets.len() {
        return Err(Error::shape("cross_entropy_loss", logits.shape(), &[targets.len()]));
    }
    Ok(softmax_cross_entropy(logits, targets)?.1)
}

pub fn perplexity(mean_loss: f64) -> f64 {
    mean_loss.exp()
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the factor applied (1 when under the limit).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "clip_gradients" });
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    // max_norm / norm can round so that the rescaled norm lands one ulp
    // above the limit; step the factor down until it does not.
    let scaled_norm = |f: f64| {
        grads
            .iter()
            .map(|g| g.data().iter().map(|v| (v * f) * (v * f)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };
    let mut factor = max_norm / norm;
    while scaled_norm(factor) > max_norm {
        factor = f64::from_bits(factor.to_bits() - 1);
    }
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
    Ok(factor)
}

/// Half-cosine decay from `lr0` at epoch 0 to 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::validation(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    if epoch == total_epochs {
        return Ok(0.0);
    }
    let lr = lr0 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()) / 2.0;
    Ok(lr.max(0.0))
}

/// SGD with classical momentum and L2 weight decay:
/// `g ← grad + wd·p`, `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(shapes: &[&[usize]], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_model(model: &LanguageModel, cfg: &TrainConfig) -> Self {
        let params = model.params();
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(&shapes, cfg.momentum, cfg.weight_decay)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Updates every parameter once. Entries whose mask is false are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], masks: &[Option<Vec<bool>>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || masks.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {} params, {} grads, {} masks",
                self.velocity.len(),
                params.len(),
                grads.len(),
                masks.len()
            )));
        }
        for (((p, g), v), mask) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(masks) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
            let pd = p.data_mut();
            let gd = g.data();
            let vd = v.data_mut();
            for idx in 0..pd.len() {
                if let Some(m) = mask {
                    if !m[idx] {
                        continue;
                    }
                }
                let step = gd[idx] + self.weight_decay * pd[idx];
                vd[idx] = self.momentum * vd[idx] + step;
                pd[idx] -= lr * vd[idx];
            }
        }
        Ok(())
    }
}

/// Aggregates of one pass over the training windows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub loss: f64,
    pub perplexity: f64,
    /// Fraction of windows whose gradients were clipped.
    pub clip_rate: f64,
    pub windows: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub perplexity: f64,
}

/// A training epoch that stopped early, with what it had accumulated.
#[derive(Debug, thiserror::Error)]
#[error("epoch aborted after {} windows", partial.windows)]
pub struct EpochFailure {
    #[source]
    pub source: Error,
    pub partial: TrainStats,
}

/// Mutable training state beyond the model weights.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub optimizer: Sgd,
    pub masks: Vec<Option<Vec<bool>>>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &LanguageModel, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: Sgd::for_model(model, cfg),
            masks: model.param_masks().into_iter().map(|m| m.map(<[bool]>::to_vec)).collect(),
            // Dropout draws use their own stream so they do not shift with model size.
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d409_0d70_5a11),
        }
    }
}

/// One pass over `batches` at learning rate `lr`.
///
/// Hidden state starts at zero, is carried from window to window and is
/// detached at every window boundary.
pub fn train_epoch(
    model: &mut LanguageModel,
    batches: &[SequenceBatch],
    cfg: &TrainConfig,
    state: &mut TrainState,
    lr: f64,
) -> Result<TrainStats, EpochFailure> {
    let start = Instant::now();
    let mut stats = TrainStats::default();
    let mut total_loss = 0.0;
    let mut positions = 0usize;
    let mut clipped = 0usize;
    let mut hidden: Option<Vec<CellState>> = None;
    let mut tape = Tape::new();

    let finish = |stats: &mut TrainStats, total_loss: f64, positions: usize, clipped: usize| {
        if positions > 0 {
            stats.loss = total_loss / positions as f64;
            stats.perplexity = perplexity(stats.loss);
            stats.clip_rate = clipped as f64 / stats.windows as f64;
        }
        stats.seconds = start.elapsed().as_secs_f64();
    };

    for batch in batches {
        let result = (|| -> Result<(f64, bool, Vec<CellState>)> {
            let states = match hidden.take() {
                Some(h) if h[0].h.cols() == batch.batch_size => h,
                _ => model.initial_states(batch.batch_size),
            };
            tape.reset();
            let dropout = (cfg.dropout_p > 0.0).then_some(Dropout {
                p: cfg.dropout_p,
                on_first_input: cfg.dropout_embedding,
                rng: &mut state.rng,
            });
            let pass = model.forward_window(&mut tape, batch, &states, true, dropout)?;
            let loss = tape.value(pass.loss).item();
            tape.backward(pass.loss)?;
            let mut grads: Vec<Tensor> = pass
                .params
                .iter()
                .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
                .collect();
            let factor = clip_gradients(&mut grads, cfg.clip_norm)?;
            let mut params = model.params_mut();
            state.optimizer.step(&mut params, &grads, &state.masks, lr)?;
            let next = pass.states.iter().map(|s| s.read(&tape)).collect();
            Ok((loss, factor < 1.0, next))
        })();
        match result {
            Ok((loss, was_clipped, next)) => {
                total_loss += loss * batch.positions() as f64;
                positions += batch.positions();
                clipped += was_clipped as usize;
                stats.windows += 1;
                hidden = Some(next);
            }
            Err(source) => {
                finish(&mut stats, total_loss, positions, clipped);
                return Err(EpochFailure { source, partial: stats });
            }
        }
    }
    finish(&mut stats, total_loss, positions, clipped);
    Ok(stats)
}

/// Mean loss and perplexity over `batches` without dropout or updates.
pub fn evaluate(model: &LanguageModel, batches: &[SequenceBatch]) -> Result<EvalMetrics> {
    if batches.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    let mut tape = Tape::new();
    let mut hidden: Option<Vec<CellState>> = None;
    let mut total = 0.0;
    let mut positions = 0usize;
    for batch in batches {
        let states = match hidden.take() {
            Some(h) if h[0].h.cols() == batch.batch_size => h,
            _ => model.initial_states(batch.batch_size),
        };
        tape.reset();
        let pass = model.forward_window::<ChaCha8Rng>(&mut tape, batch, &states, false, None)?;
        total += tape.value(pass.loss).item() * batch.positions() as f64;
        positions += batch.positions();
        hidden = Some(pass.states.iter().map(|s| s.read(&tape)).collect());
    }
    let loss = total / positions as f64;
    Ok(EvalMetrics {
        loss,
        perplexity: perplexity(loss),
    })
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ppl: f64,
    pub valid_loss: f64,
    pub valid_ppl: f64,
    pub clip_rate: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Every field except wall time, for replay comparisons.
    pub fn without_timing(&self) -> EpochRecord {
        EpochRecord {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Drives whole epochs: schedule, training pass and validation.
#[derive(Debug)]
pub struct Trainer {
    pub model: LanguageModel,
    pub cfg: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model: LanguageModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = TrainState::new(&model, &cfg);
        Ok(Self { model, cfg, state })
    }

    /// Trains epoch `epoch` (0-based) and validates.
    pub fn run_epoch(
        &mut self,
        epoch: usize,
        train: &[SequenceBatch],
        valid: &[SequenceBatch],
    ) -> Result<EpochRecord, EpochFailure> {
        let lr = cosine_lr(epoch, self.cfg.epochs, self.cfg.lr0).map_err(|source| EpochFailure {
            source,
            partial: TrainStats::default(),
        })?;
        let stats = train_epoch(&mut self.model, train, &self.cfg, &mut self.state, lr)?;
        let valid = evaluate(&self.model, valid).map_err(|source| EpochFailure { source, partial: stats })?;
        Ok(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: stats.loss,
            train_ppl: stats.perplexity,
            valid_loss: valid.loss,
            valid_ppl: valid.perplexity,
            clip_rate: stats.clip_rate,
            seconds: stats.seconds,
        })
    }

    /// Runs every configured epoch, returning one record per epoch.
    pub fn fit(&mut self, train: &[SequenceBatch], valid: &[SequenceBatch]) -> Result<Vec<EpochRecord>, EpochFailure> {
        (0..self.cfg.epochs).map(|e| self.run_epoch(e, train, valid)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellFamily;
    use crate::data::{batchify, Corpus, TokenMode, UnkPolicy};
    use crate::model::{ModelConfig, Rates};

    fn direct_cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
        // logits[class][position]
        let n = targets.len();
        let mut total = 0.0;
        for (pos, &t) in targets.iter().enumerate() {
            let z: f64 = logits.iter().map(|row| row[pos].exp()).sum();
            total += -(logits[t][pos].exp() / z).ln();
        }
        total / n as f64
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[4, 3]);
        let loss = cross_entropy_loss(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let mut logits = Tensor::zeros(&[3, 2]);
        logits.set(2, 0, 1e4);
        logits.set(0, 1, 1e4);
        let loss = cross_entropy_loss(&logits, &[2, 0]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn random_logits_match_direct_summation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let targets = [0usize, 2, 1, 1, 0];
        let t = Tensor::new(&[3, 5], rows.iter().flatten().copied().collect()).unwrap();
        let loss = cross_entropy_loss(&t, &targets).unwrap();
        assert!((loss - direct_cross_entropy(&rows, &targets)).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let logits = Tensor::zeros(&[3, 1]);
        assert!(matches!(cross_entropy_loss(&logits, &[3]), Err(Error::Validation(_))));
    }

    #[test]
    fn perplexity_reference_points() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(10_000f64.ln()) - 10_000.0).abs() < 1e-8);
        assert!((perplexity(150f64.ln()) - 150.0).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![0.3, 0.0]), Tensor::vector(vec![0.4])];
        let f = clip_gradients(&mut g, 0.25).unwrap();
        assert!((f - 0.5).abs() < 1e-15);
        assert!((global_norm(&g) - 0.25).abs() < 1e-15);

        let mut small = vec![Tensor::vector(vec![0.06, 0.08])];
        assert_eq!(clip_gradients(&mut small, 0.25).unwrap(), 1.0);
        assert_eq!(small[0].data(), &[0.06, 0.08]);

        let mut zero = vec![Tensor::zeros(&[3])];
        assert_eq!(clip_gradients(&mut zero, 0.25).unwrap(), 1.0);

        let mut nan = vec![Tensor::vector(vec![f64::NAN])];
        assert!(matches!(clip_gradients(&mut nan, 0.25), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sgd_hand_recursion() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Sgd::new(&[&[]], 0.9, 0.0);
        let g = [Tensor::scalar(1.0)];
        opt.step(&mut [&mut p], &g, &[None], 1.0).unwrap();
        assert_eq!(p.item(), -1.0);
        opt.step(&mut [&mut p], &g, &[None], 1.0).unwrap();
        assert_eq!(p.item(), -1.0 - 1.9);
    }

    #[test]
    fn sgd_decay_only_and_noop() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(&[&[]], 0.9, 1e-6);
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0)], &[None], 1.0).unwrap();
        assert_eq!(p.item(), 1.0 - 1e-6);

        let mut q = Tensor::vector(vec![0.5, -2.0]);
        let mut opt = Sgd::new(&[&[2]], 0.9, 0.0);
        opt.step(&mut [&mut q], &[Tensor::zeros(&[2])], &[None], 1.0).unwrap();
        assert_eq!(q.data(), &[0.5, -2.0]);
    }

    #[test]
    fn sgd_skips_masked_entries() {
        let mut p = Tensor::vector(vec![1.0, 1.0]);
        let mut opt = Sgd::new(&[&[2]], 0.9, 0.1);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![1.0, 1.0])], &[Some(vec![true, false])], 1.0)
            .unwrap();
        assert_eq!(p.data()[1], 1.0);
        assert_ne!(p.data()[0], 1.0);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 1.0).unwrap(), 1.0);
        assert_eq!(cosine_lr(100, 100, 1.0).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 1.0).is_err());
        let lrs: Vec<f64> = (0..=100).map(|e| cosine_lr(e, 100, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.lr0, c.momentum, c.weight_decay, c.clip_norm), (1.0, 0.9, 1e-6, 0.25));
        assert_eq!((c.epochs, c.batch_size, c.bptt_len, c.dropout_p), (100, 80, 35, 0.2));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lr0: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { dropout_p: 1.0, ..c }.validate().is_err());
    }

    const TEXT: &str = "the cat sat on the mat. the dog sat on the log. a cat and a dog met on a mat.\n";

    fn tiny(family: CellFamily, rate: f64) -> (LanguageModel, Vec<SequenceBatch>, TrainConfig) {
        let text = TEXT.repeat(12);
        let corpus = Corpus::from_texts(&text, TEXT, TEXT, TokenMode::Char, &UnkPolicy::Forbid).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            bptt_len: 10,
            dropout_p: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let model = LanguageModel::new(
            ModelConfig {
                family,
                layers: 1,
                hidden: 12,
                emb: 12,
                rates: Rates::Uniform(rate),
                tied: true,
            },
            corpus.vocab.len(),
            cfg.seed,
        )
        .unwrap();
        let batches = batchify(&corpus.train, cfg.batch_size, cfg.bptt_len).unwrap();
        (model, batches, cfg)
    }

    #[test]
    fn frozen_step_leaves_parameters_and_matches_eval() {
        let (mut model, batches, cfg) = tiny(CellFamily::Lstm, 0.5);
        let before = model.clone();
        let mut state = TrainState::new(&model, &cfg);
        let stats = train_epoch(&mut model, &batches[..1], &cfg, &mut state, 0.0).unwrap();
        assert_eq!(model, before);
        let eval = evaluate(&model, &batches[..1]).unwrap();
        assert_eq!(stats.loss, eval.loss);
    }

    #[test]
    fn restricted_lstm_loss_decreases_every_epoch() {
        let (model, batches, cfg) = tiny(CellFamily::Lstm, 0.5);
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let records = trainer.fit(&batches, &batches).unwrap();
        let losses: Vec<f64> = records.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn replay_is_deterministic_and_training_beats_init() {
        let run = || {
            let (model, batches, mut cfg) = tiny(CellFamily::Gru, 0.5);
            cfg.dropout_p = 0.2;
            let untrained = evaluate(&model, &batches).unwrap();
            let mut trainer = Trainer::new(model, cfg).unwrap();
            let recs: Vec<_> = trainer.fit(&batches, &batches).unwrap().iter().map(EpochRecord::without_timing).collect();
            (untrained, recs)
        };
        let (untrained, a) = run();
        let (_, b) = run();
        assert_eq!(a, b);
        assert!(a.last().unwrap().valid_ppl < untrained.perplexity);
    }

    #[test]
    fn untrained_perplexity_is_near_vocab_size() {
        let (model, batches, _) = tiny(CellFamily::Rnn, 0.5);
        let v = model.vocab() as f64;
        let ppl = evaluate(&model, &batches).unwrap().perplexity;
        assert!(ppl > 0.5 * v && ppl < 1.5 * v, "ppl {ppl} vocab {v}");
    }

    #[test]
    fn degenerate_language_reaches_unit_perplexity() {
        let corpus = Corpus::from_texts(&"a".repeat(400), "aaaa", "aaaa", TokenMode::Char, &UnkPolicy::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            bptt_len: 10,
            dropout_p: 0.0,
            ..TrainConfig::default()
        };
        let model = LanguageModel::new(
            ModelConfig {
                family: CellFamily::Rnn,
                layers: 1,
                hidden: 4,
                emb: 4,
                rates: Rates::Uniform(0.5),
                tied: true,
            },
            corpus.vocab.len(),
            0,
        )
        .unwrap();
        let batches = batchify(&corpus.train, 4, 10).unwrap();
        let mut trainer = Trainer::new(model, cfg).unwrap();
        trainer.fit(&batches, &batches).unwrap();
        let ppl = evaluate(&trainer.model, &batches).unwrap().perplexity;
        assert!(ppl < 1.05, "ppl {ppl}");
    }

    #[test]
    fn aliased_pool_entries_update_once_per_step() {
        // With r = 1 every view reads the same rows. One SGD step must move
        // a shared entry by exactly -lr · (summed gradient + decay).
        let (model, batches, mut cfg) = tiny(CellFamily::Rnn, 1.0);
        cfg.weight_decay = 0.0;
        let mut tape = Tape::new();
        let pass = model
            .forward_window::<ChaCha8Rng>(&mut tape, &batches[0], &model.initial_states(4), true, None)
            .unwrap();
        tape.backward(pass.loss).unwrap();
        let g = tape.grad(pass.params[0]).unwrap().get(0, 0);
        let mut grads: Vec<Tensor> = pass.params.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
        let factor = clip_gradients(&mut grads, cfg.clip_norm).unwrap();
        let mut m2 = model.clone();
        let mut state = TrainState::new(&model, &cfg);
        train_epoch(&mut m2, &batches[..1], &cfg, &mut state, 0.1).unwrap();
        let moved = m2.layers[0].pool.weight.get(0, 0) - model.layers[0].pool.weight.get(0, 0);
        assert!((moved + 0.1 * g * factor).abs() < 1e-15);
    }
}
