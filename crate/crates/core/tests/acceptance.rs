//! Acceptance suite: one PASS/FAIL line per criterion on stdout.
//!
//! Lines are written straight to the process stdout so they show up even
//! when the test harness captures output.

// `ensure!` negates comparisons on purpose so that NaN counts as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrnn_core::data::{Corpus, TokenMode, UnkPolicy};
use rrnn_core::head::LMHead;
use rrnn_core::tape::Tape;
use rrnn_core::training::{clip_gradients, cosine_lr, global_norm, Sgd};
use rrnn_core::{
    batchify, gradcheck, uniform_compression, CellFamily, CellSpec, CellState, EpochRecord, GradcheckOptions,
    InitSpec, LanguageModel, ModelConfig, Rates, RecurrentCell, RestrictionPlan, Tensor, TrainConfig, Trainer,
};

fn verdict(name: &str, outcome: Result<String, String>) {
    let line = match &outcome {
        Ok(detail) => format!("PASS  {name}: {detail}\n"),
        Err(detail) => format!("FAIL  {name}: {detail}\n"),
    };
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    if let Err(detail) = outcome {
        panic!("{name}: {detail}");
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const PUBLISHED_RATES: [f64; 8] = [1.0, 0.95, 0.9, 0.7, 0.5, 0.3, 0.1, 0.0];

/// Published model complexity in millions, columns in `PUBLISHED_RATES` order.
const PUBLISHED: [(CellFamily, [f64; 8]); 3] = [
    (CellFamily::Rnn, [0.130, 0.136, 0.142, 0.167, 0.191, 0.215, 0.239, 0.251]),
    (CellFamily::Gru, [0.130, 0.161, 0.191, 0.311, 0.432, 0.553, 0.673, 0.733]),
    (CellFamily::Lstm, [0.130, 0.173, 0.215, 0.384, 0.553, 0.721, 0.890, 0.975]),
];

#[test]
fn parameter_count_reproduction() {
    verdict("parameter-count reproduction (3 x 200, +10,000 output bias, +/-0.001M)", (|| {
        let mut worst: f64 = 0.0;
        for (family, row) in PUBLISHED {
            let n = family.gates();
            for (&r, &published) in PUBLISHED_RATES.iter().zip(&row) {
                let config = ModelConfig {
                    family,
                    layers: 3,
                    hidden: 200,
                    emb: 200,
                    rates: Rates::Uniform(r),
                    tied: true,
                };
                let counts = config.count_parameters(10_000).map_err(|e| e.to_string())?;
                let millions = counts.recurrent_with_output_bias() as f64 / 1e6;
                let diff = (millions - published).abs();
                worst = worst.max(diff);
                ensure!(diff <= 0.001 + 1e-12, "{family} r={r}: {millions:.4}M vs {published}M");

                // Closed form per layer: P - (mn - 1)·s·(k + 1).
                let s = (r * 200.0_f64).round() as usize;
                let p = 2 * n * 200 * 201;
                let closed = p - (2 * n - 1) * s * 201;
                ensure!(
                    counts.recurrent.restricted == 3 * closed,
                    "{family} r={r}: enumerated {} vs closed form {}",
                    counts.recurrent.restricted,
                    3 * closed
                );
            }
        }
        Ok(format!("24 cells, worst deviation {worst:.4}M; closed forms exact"))
    })());
}

#[test]
fn compression_rate_formulas() {
    verdict("compression-rate formulas", (|| {
        let mut checked = 0;
        for d in [4usize, 10, 64, 200] {
            for &r in &PUBLISHED_RATES {
                let s = (r * d as f64).round() as usize;
                for family in CellFamily::ALL {
                    let n = family.gates();
                    let plan = RestrictionPlan::uniform(2, n, d, &[d, d], r).map_err(|e| e.to_string())?;
                    let c = plan.compression_rate();
                    // Weight-only form, and the form with biases folded in.
                    let weight_only = ((2 * n * d - (2 * n - 1) * s) as f64) / ((2 * n * d) as f64);
                    let counts = plan.count_parameters();
                    let with_bias = ((2 * n * d * (d + 1) - (2 * n - 1) * s * (d + 1)) as f64)
                        / ((2 * n * d * (d + 1)) as f64);
                    ensure!(c == counts.compression(), "{family} d={d} r={r}: rate disagrees with counts");
                    ensure!(c == with_bias, "{family} d={d} r={r}: C={c} vs {with_bias}");
                    ensure!(
                        (weight_only - with_bias).abs() < 1e-15,
                        "{family} d={d} r={r}: bias changes C ({weight_only} vs {with_bias})"
                    );
                    ensure!(
                        uniform_compression(2, n, d, s) == weight_only,
                        "{family} d={d} r={r}: helper disagrees"
                    );
                    if family == CellFamily::Rnn && s as f64 == r * d as f64 {
                        ensure!(c == (2.0 - r) / 2.0, "RNN d={d} r={r}: C={c} vs (2-r)/2");
                    }
                    checked += 1;
                }
                let rnn = RestrictionPlan::uniform(2, 1, d, &[d, d], 1.0).unwrap().compression_rate();
                let none = RestrictionPlan::uniform(2, 1, d, &[d, d], 0.0).unwrap().compression_rate();
                ensure!(rnn == 0.5 && none == 1.0, "RNN bounds at d={d}: {rnn}, {none}");
            }
        }
        Ok(format!("{checked} (family, d, r) cases; C(RNN, 1) = 0.5, C(r = 0) = 1"))
    })());
}

// ---------------------------------------------------------------------------
// Dense-assembly oracle: a classical cell on plain Vec<f64> arithmetic whose
// gate matrices are copied row by row out of the pool.

struct DenseCell {
    family: CellFamily,
    d: usize,
    /// `w[i][j]` is the `d × k_i` matrix of input `i`, gate `j`; `b[i][j]` its bias.
    w: Vec<Vec<Vec<Vec<f64>>>>,
    b: Vec<Vec<Vec<f64>>>,
}

fn copy_views(cell: &RecurrentCell) -> DenseCell {
    let plan = &cell.plan;
    let d = plan.hidden();
    let mut w = vec![vec![Vec::new(); plan.gates()]; 2];
    let mut b = vec![vec![Vec::new(); plan.gates()]; 2];
    for i in 0..2 {
        let k = plan.input_sizes()[i];
        for j in 0..plan.gates() {
            let s = plan.shared(i, j);
            let off = plan.offset(i, j);
            assert_eq!(s + plan.private(i, j), d);
            let rows: Vec<usize> = (0..s).chain(off..off + plan.private(i, j)).collect();
            w[i][j] = rows
                .iter()
                .map(|&r| (0..k).map(|c| cell.pool.weight.get(r, c)).collect())
                .collect();
            b[i][j] = rows.iter().map(|&r| cell.pool.bias.data()[r]).collect();
        }
    }
    DenseCell {
        family: cell.spec.family,
        d,
        w,
        b,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DenseCell {
    fn affine(&self, i: usize, j: usize, v: &[f64]) -> Vec<f64> {
        self.w[i][j]
            .iter()
            .zip(&self.b[i][j])
            .map(|(row, bias)| row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>() + bias)
            .collect()
    }

    /// One step for a single column.
    fn step(&self, x: &[f64], h: &[f64], c: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        let gate = |j: usize| -> Vec<f64> {
            let a = self.affine(0, j, x);
            let b = self.affine(1, j, h);
            a.iter().zip(&b).map(|(p, q)| p + q).collect()
        };
        match self.family {
            CellFamily::Rnn => (gate(0).into_iter().map(f64::tanh).collect(), None),
            CellFamily::Lstm => {
                let i: Vec<f64> = gate(0).into_iter().map(sigmoid).collect();
                let f: Vec<f64> = gate(1).into_iter().map(sigmoid).collect();
                let g: Vec<f64> = gate(2).into_iter().map(f64::tanh).collect();
                let o: Vec<f64> = gate(3).into_iter().map(sigmoid).collect();
                let c = c.expect("lstm state");
                let c2: Vec<f64> = (0..self.d).map(|u| f[u] * c[u] + i[u] * g[u]).collect();
                let h2 = (0..self.d).map(|u| o[u] * c2[u].tanh()).collect();
                (h2, Some(c2))
            }
            CellFamily::Gru => {
                let r: Vec<f64> = gate(0).into_iter().map(sigmoid).collect();
                let z: Vec<f64> = gate(1).into_iter().map(sigmoid).collect();
                let xn = self.affine(0, 2, x);
                let hn = self.affine(1, 2, h);
                let n: Vec<f64> = (0..self.d).map(|u| (xn[u] + r[u] * hn[u]).tanh()).collect();
                ((0..self.d).map(|u| (1.0 - z[u]) * n[u] + z[u] * h[u]).collect(), None)
            }
        }
    }
}

fn column(t: &Tensor, b: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.get(r, b)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn dense_assembly_oracle() {
    verdict("dense-assembly oracle equivalence (200 configs, < 1e-12)", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let rates = [0.0, 0.25, 0.5, 1.0];
        let mut worst: f64 = 0.0;
        for case in 0..200 {
            let family = CellFamily::ALL[case % 3];
            let d = rng.random_range(2..=8);
            let k = rng.random_range(2..=8);
            let r = rates[rng.random_range(0..rates.len())];
            let batch = rng.random_range(1..=3);
            let spec = CellSpec::uniform(family, k, d, r);
            let cell = RecurrentCell::new(spec.clone(), InitSpec::Uniform { bound: 1.0 }, &mut rng)
                .map_err(|e| e.to_string())?;
            let dense = copy_views(&cell);
            let mut state = CellState {
                h: random_tensor(&mut rng, d, batch),
                c: family.has_cell_state().then(|| random_tensor(&mut rng, d, batch)),
            };
            let mut dense_states: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..batch)
                .map(|b| (column(&state.h, b), state.c.as_ref().map(|c| column(c, b))))
                .collect();
            for _ in 0..3 {
                let x = random_tensor(&mut rng, k, batch);
                state = cell.step(&x, &state).map_err(|e| e.to_string())?;
                for (b, ds) in dense_states.iter_mut().enumerate() {
                    *ds = dense.step(&column(&x, b), &ds.0, ds.1.as_deref());
                    for u in 0..d {
                        worst = worst.max((state.h.get(u, b) - ds.0[u]).abs());
                        if let (Some(c), Some(dc)) = (&state.c, &ds.1) {
                            worst = worst.max((c.get(u, b) - dc[u]).abs());
                        }
                    }
                }
            }
            ensure!(worst < 1e-12, "case {case}: {family} d={d} k={k} r={r}: diff {worst:e}");
        }
        Ok(format!("max abs diff {worst:.2e} over 3 steps each"))
    })());
}

#[test]
fn gradient_correctness() {
    verdict("gradient correctness (3 families x r in {0, 0.5, 1}, < 1e-4)", (|| {
        let start = Instant::now();
        let mut worst: f64 = 0.0;
        let mut aliased = 0;
        for family in CellFamily::ALL {
            for r in [0.0, 0.5, 1.0] {
                let opts = GradcheckOptions {
                    seed: 5,
                    ..GradcheckOptions::new(family, 4, 4, r)
                };
                let rep = gradcheck(&opts).map_err(|e| e.to_string())?;
                ensure!(rep.pass, "{family} r={r}: {rep:?}");
                if r > 0.0 {
                    ensure!(rep.aliased_entries > 0, "{family} r={r}: no aliased entries exercised");
                }
                worst = worst.max(rep.max_rel_error).max(rep.alias_max_rel_error);
                aliased += rep.aliased_entries;
            }
        }
        let secs = start.elapsed().as_secs_f64();
        ensure!(secs < 60.0, "took {secs:.1}s");
        Ok(format!(
            "worst rel. error {worst:.2e}; {aliased} shared entries matched the sum of per-view paths; {secs:.2}s"
        ))
    })());
}

#[test]
fn aliasing_exhaustive() {
    verdict("aliasing (exhaustive at d = k = 4)", (|| {
        let mut shared_checked = 0;
        let mut private_checked = 0;
        for family in CellFamily::ALL {
            for r in [0.25, 0.5, 0.75, 1.0] {
                let spec = CellSpec::uniform(family, 4, 4, r);
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let base = RecurrentCell::new(spec.clone(), InitSpec::Uniform { bound: 1.0 }, &mut rng)
                    .map_err(|e| e.to_string())?;
                let plan = base.plan.clone();
                let views = |cell: &RecurrentCell| -> Vec<Vec<Tensor>> {
                    let mut tape = Tape::new();
                    let bound = cell.bind(&mut tape, false).unwrap();
                    (0..2)
                        .map(|i| {
                            let stacked = tape.value(bound.weights[i]);
                            (0..plan.gates())
                                .map(|j| {
                                    let rows: Vec<&[f64]> = (0..4).map(|u| stacked.row(j * 4 + u)).collect();
                                    Tensor::from_rows(&rows)
                                })
                                .collect()
                        })
                        .collect()
                };
                let before = views(&base);
                let cols = plan.pool_cols();
                for idx in 0..base.pool.weight.len() {
                    if !base.pool.weight_mask()[idx] {
                        continue;
                    }
                    let (row, col) = (idx / cols, idx % cols);
                    // Expected readers from the row layout alone.
                    let mut expected = Vec::new();
                    for i in 0..2 {
                        for j in 0..plan.gates() {
                            let s = plan.shared(i, j);
                            let off = plan.offset(i, j);
                            let local = if row < s {
                                Some(row)
                            } else if row >= off && row < off + plan.private(i, j) {
                                Some(s + row - off)
                            } else {
                                None
                            };
                            if let Some(u) = local {
                                if col < plan.input_sizes()[i] {
                                    expected.push((i, j, u));
                                }
                            }
                        }
                    }
                    let mut cell = base.clone();
                    let delta = 0.125;
                    cell.pool.weight.data_mut()[idx] += delta;
                    let after = views(&cell);
                    let mut changed = Vec::new();
                    for i in 0..2 {
                        for j in 0..plan.gates() {
                            let (a, b) = (&before[i][j], &after[i][j]);
                            for u in 0..a.rows() {
                                for c in 0..a.cols() {
                                    let diff = b.get(u, c) - a.get(u, c);
                                    if diff != 0.0 {
                                        ensure!(
                                            expected_local(&expected, i, j) == Some(u) && c == col,
                                            "{family} r={r}: pool ({row},{col}) moved view ({i},{j}) at ({u},{c})"
                                        );
                                        changed.push((i, j, u, diff));
                                    }
                                }
                            }
                        }
                    }
                    ensure!(
                        changed.len() == expected.len(),
                        "{family} r={r}: pool ({row},{col}) changed {} view entries, expected {}",
                        changed.len(),
                        expected.len()
                    );
                    ensure!(
                        changed.iter().all(|c| c.3 == changed[0].3),
                        "{family} r={r}: aliased views moved by different amounts"
                    );
                    if row < plan.shared_rows() && expected.len() > 1 {
                        shared_checked += 1;
                    } else {
                        ensure!(
                            expected.len() == 1,
                            "{family} r={r}: private pool ({row},{col}) read by {} views",
                            expected.len()
                        );
                        private_checked += 1;
                    }
                }
            }
        }
        Ok(format!("{shared_checked} shared and {private_checked} private entries perturbed"))
    })());
}

fn expected_local(expected: &[(usize, usize, usize)], i: usize, j: usize) -> Option<usize> {
    expected.iter().find(|e| e.0 == i && e.1 == j).map(|e| e.2)
}

// ---------------------------------------------------------------------------
// Training smoke on the bundled character corpus.

fn desk_corpus() -> Corpus {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/desk");
    Corpus::load(
        &dir.join("train.txt"),
        &dir.join("valid.txt"),
        &dir.join("test.txt"),
        TokenMode::Char,
        &UnkPolicy::default(),
    )
    .expect("bundled corpus")
}

fn smoke_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 32,
        bptt_len: 35,
        dropout_p: 0.2,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn smoke_model(family: CellFamily, rate: f64) -> ModelConfig {
    ModelConfig {
        family,
        layers: 1,
        hidden: 64,
        emb: 64,
        rates: Rates::Uniform(rate),
        tied: true,
    }
}

fn smoke_run(corpus: &Corpus, model: ModelConfig) -> Result<(Vec<EpochRecord>, usize), String> {
    let cfg = smoke_train_config();
    let train = batchify(&corpus.train, cfg.batch_size, cfg.bptt_len).map_err(|e| e.to_string())?;
    let valid = batchify(&corpus.valid, cfg.batch_size, cfg.bptt_len).map_err(|e| e.to_string())?;
    let lm = LanguageModel::new(model, corpus.vocab.len(), cfg.seed).map_err(|e| e.to_string())?;
    let recurrent = lm.param_counts().recurrent.restricted;
    let mut trainer = Trainer::new(lm, cfg).map_err(|e| e.to_string())?;
    let records = trainer.fit(&train, &valid).map_err(|e| e.to_string())?;
    Ok((records, recurrent))
}

#[test]
fn training_smoke() {
    verdict("training smoke (bundled char corpus, tied, dropout 0.2)", (|| {
        let start = Instant::now();
        let corpus = desk_corpus();
        let bytes = std::fs::metadata(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/desk/train.txt"))
            .map(|m| m.len())
            .unwrap_or(0);
        let mut summary = Vec::new();

        // (a) every family, 5 epochs, strictly decreasing train loss.
        let mut restricted_lstm = None;
        for family in CellFamily::ALL {
            let (records, recurrent) = smoke_run(&corpus, smoke_model(family, 0.5))?;
            let losses: Vec<f64> = records.iter().map(|r| r.train_loss).collect();
            ensure!(records.len() == 5, "{family}: {} epochs", records.len());
            ensure!(
                losses.windows(2).all(|w| w[1] < w[0]),
                "{family}: train loss not strictly decreasing: {losses:?}"
            );
            summary.push(format!("{family} loss {:.3}->{:.3}", losses[0], losses[4]));
            if family == CellFamily::Lstm {
                restricted_lstm = Some((records, recurrent));
            }
        }

        // (b) r = 0.5 against the unrestricted LSTM under the same seed and budget.
        let (restricted, p_restricted) = restricted_lstm.expect("lstm ran");
        let (full, p_full) = smoke_run(&corpus, smoke_model(CellFamily::Lstm, 0.0))?;
        let ppl_r = restricted.last().unwrap().valid_ppl;
        let ppl_f = full.last().unwrap().valid_ppl;
        let ratio = ppl_r / ppl_f;
        let share = p_restricted as f64 / p_full as f64;
        ensure!(ratio <= 1.3, "valid ppl {ppl_r:.3} vs {ppl_f:.3} (x{ratio:.3})");
        ensure!(share <= 0.62, "recurrent params {p_restricted} vs {p_full} ({share:.3})");
        summary.push(format!(
            "RLSTM ppl {ppl_r:.3} vs LSTM {ppl_f:.3} (x{ratio:.3}) with {:.1}% of recurrent params",
            100.0 * share
        ));

        // (c) replay.
        let (again, _) = smoke_run(&corpus, smoke_model(CellFamily::Lstm, 0.5))?;
        let strip = |rs: &[EpochRecord]| rs.iter().map(EpochRecord::without_timing).collect::<Vec<_>>();
        ensure!(strip(&again) == strip(&restricted), "replay with the same seed diverged");
        summary.push("replay identical".into());

        Ok(format!(
            "{} KB corpus; {}; {:.0}s",
            bytes / 1000,
            summary.join("; "),
            start.elapsed().as_secs_f64()
        ))
    })());
}

#[test]
fn schedule_and_clipping() {
    verdict("schedule, clipping and SGD", (|| {
        let lr = |e| cosine_lr(e, 100, 1.0).unwrap();
        ensure!(lr(0) == 1.0 && lr(100) == 0.0 && lr(50) == 0.5, "cosine endpoints {} {} {}", lr(0), lr(100), lr(50));
        let lr0 = 0.37;
        ensure!(cosine_lr(50, 100, lr0).unwrap() == lr0 / 2.0, "midpoint with lr0 = {lr0}");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut fired = 0;
        for trial in 0..2000 {
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let mut grads: Vec<Tensor> = (0..rng.random_range(1..5))
                .map(|_| {
                    let n = rng.random_range(1..40);
                    Tensor::vector((0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
                })
                .collect();
            let before = global_norm(&grads);
            let factor = clip_gradients(&mut grads, 0.25).map_err(|e| e.to_string())?;
            let after = global_norm(&grads);
            if factor < 1.0 {
                fired += 1;
                ensure!(after <= 0.25, "trial {trial}: post-clip norm {after} (from {before})");
            } else {
                ensure!(after == before, "trial {trial}: unclipped gradients changed");
            }
        }

        let mut p = Tensor::scalar(0.0);
        let mut opt = Sgd::new(&[&[]], 0.9, 0.0);
        let g = [Tensor::scalar(1.0)];
        opt.step(&mut [&mut p], &g, &[None], 1.0).map_err(|e| e.to_string())?;
        let first = p.item();
        opt.step(&mut [&mut p], &g, &[None], 1.0).map_err(|e| e.to_string())?;
        let second = p.item();
        ensure!(first == -1.0 && second == -2.9, "SGD steps {first}, {second}");
        Ok(format!(
            "lr(0)=1, lr(50)=0.5, lr(100)=0; clipping fired {fired}/2000 times, all <= 0.25; SGD params -1 then -2.9"
        ))
    })());
}

#[test]
fn tied_embedding_accounting() {
    verdict("tied-embedding accounting", (|| {
        let tied = LMHead::counts_for(10_000, 200, None, true);
        let untied = LMHead::counts_for(10_000, 200, Some(200), false);
        ensure!(tied.total() == 2_010_000, "tied head {}", tied.total());
        ensure!(untied.total() - tied.total() == 10_000 * 200, "untying added {}", untied.total() - tied.total());

        for family in CellFamily::ALL {
            let mut cfg = smoke_model(family, 0.5);
            cfg.hidden = 12;
            cfg.emb = 12;
            let a = LanguageModel::new(cfg.clone(), 57, 0).map_err(|e| e.to_string())?;
            cfg.tied = false;
            let b = LanguageModel::new(cfg, 57, 0).map_err(|e| e.to_string())?;
            let count = |m: &LanguageModel| -> usize {
                m.params()
                    .iter()
                    .zip(m.param_masks())
                    .map(|(t, mask)| mask.map_or(t.len(), |m| m.iter().filter(|&&x| x).count()))
                    .sum()
            };
            ensure!(
                count(&b) - count(&a) == 57 * 12,
                "{family}: built models differ by {}",
                count(&b) - count(&a)
            );
            ensure!(count(&a) == a.param_counts().total(), "{family}: built count disagrees with accounting");
        }
        Ok("2,010,000 head trainables at V = 10,000, E = 200; untying adds exactly V x E".into())
    })());
}
