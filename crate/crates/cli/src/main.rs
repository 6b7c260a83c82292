//! `rrnn`: train, evaluate and inspect restricted recurrent language models.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rrnn_core::data::{tokenize, Vocabulary};
use rrnn_core::training::{evaluate, EpochRecord, Trainer};
use rrnn_core::{
    batchify, gradcheck, CellFamily, Checkpoint, Corpus, GradcheckOptions, LanguageModel, ModelConfig, Rates,
};

use config::RunConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "rrnn", version, about = "Restricted RNN, GRU and LSTM language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a language model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write metrics and checkpoints here instead of the configured paths.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Report loss and perplexity of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config naming the data files.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Print parameter counts for a stacked model, one row per rate.
    CountParams {
        #[arg(long, default_value = "lstm")]
        family: CellFamily,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long, default_value_t = 200)]
        hidden: usize,
        /// Defaults to the hidden size.
        #[arg(long)]
        emb: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        vocab: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5,0.7,0.9,0.95,1")]
        rates: Vec<f64>,
        #[arg(long)]
        untied: bool,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Compare analytic pool gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "lstm")]
        family: CellFamily,
        #[arg(long, default_value_t = 4)]
        hidden: usize,
        /// Defaults to the hidden size.
        #[arg(long)]
        input: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

/// An error that maps to the numeric-failure exit code.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn is_numeric(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<NumericFailure>().is_some()
            || e.downcast_ref::<rrnn_core::Error>().is_some_and(rrnn_core::Error::is_numeric)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            epochs,
            seed,
            output_dir,
        } => cmd_train(&config, epochs, seed, output_dir),
        Command::Eval {
            checkpoint,
            config,
            split,
        } => cmd_eval(&checkpoint, &config, split),
        Command::CountParams {
            family,
            layers,
            hidden,
            emb,
            vocab,
            rates,
            untied,
            format,
        } => cmd_count_params(family, layers, hidden, emb.unwrap_or(hidden), vocab, &rates, !untied, format),
        Command::Gradcheck {
            family,
            hidden,
            input,
            rate,
            seed,
            steps,
            batch,
            format,
            corrupt_backward,
        } => {
            let opts = GradcheckOptions {
                family,
                hidden,
                input: input.unwrap_or(hidden),
                rate,
                seed,
                steps,
                batch,
                corrupt_backward,
            };
            cmd_gradcheck(&opts, format)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_numeric(&err) { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Ok(Corpus::load(
        &cfg.data.train,
        &cfg.data.valid,
        &cfg.data.test,
        cfg.data.mode,
        &cfg.data.unk_policy(),
    )?)
}

fn cmd_train(config: &Path, epochs: Option<usize>, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(dir) = output_dir {
        cfg.output.metrics = dir.join("metrics.jsonl");
        cfg.output.checkpoint_dir = dir;
    }
    cfg.validate()?;

    let corpus = load_corpus(&cfg)?;
    let (batch, bptt) = (cfg.train.batch_size, cfg.train.bptt_len);
    let train = batchify(&corpus.train, batch, bptt).context("train split")?;
    let valid = batchify(&corpus.valid, batch, bptt).context("valid split")?;
    let test = batchify(&corpus.test, batch, bptt).context("test split")?;

    let model = LanguageModel::new(cfg.model.clone(), corpus.vocab.len(), cfg.train.seed)?;
    let counts = model.param_counts();
    println!(
        "{} x{} hidden {} | vocab {} | recurrent {} of {} (C = {:.4}) | total {}",
        cfg.model.family,
        cfg.model.layers,
        cfg.model.hidden,
        corpus.vocab.len(),
        counts.recurrent.restricted,
        counts.recurrent.unrestricted,
        counts.recurrent.compression(),
        counts.total()
    );

    fs::create_dir_all(&cfg.output.checkpoint_dir)
        .with_context(|| format!("cannot create {}", cfg.output.checkpoint_dir.display()))?;
    if let Some(parent) = cfg.output.metrics.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut metrics = BufWriter::new(
        File::create(&cfg.output.metrics).with_context(|| format!("cannot create {}", cfg.output.metrics.display()))?,
    );
    let best_path = cfg.output.checkpoint_dir.join("best.ckpt");
    let final_path = cfg.output.checkpoint_dir.join("final.ckpt");

    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut best = f64::INFINITY;
    for epoch in 0..cfg.train.epochs {
        let record: EpochRecord = match trainer.run_epoch(epoch, &train, &valid) {
            Ok(r) => r,
            Err(failure) => {
                metrics.flush()?;
                let kept = if best.is_finite() {
                    format!("; last stable checkpoint kept at {}", best_path.display())
                } else {
                    String::new()
                };
                let msg = format!("epoch {} failed after {} windows{kept}", epoch + 1, failure.partial.windows);
                return Err(anyhow::Error::new(failure.source).context(msg));
            }
        };
        serde_json::to_writer(&mut metrics, &record)?;
        writeln!(metrics)?;
        metrics.flush()?;
        println!(
            "epoch {:>3} | lr {:.4} | train loss {:.4} ppl {:.3} | valid ppl {:.3} | clipped {:.0}% | {:.1}s",
            record.epoch,
            record.lr,
            record.train_loss,
            record.train_ppl,
            record.valid_ppl,
            100.0 * record.clip_rate,
            record.seconds
        );
        if record.valid_ppl < best {
            best = record.valid_ppl;
            checkpoint(&trainer, &corpus.vocab, record.epoch).save(&best_path)?;
        }
    }
    checkpoint(&trainer, &corpus.vocab, cfg.train.epochs).save(&final_path)?;

    let test_metrics = evaluate(&trainer.model, &test)?;
    let best_model = Checkpoint::load(&best_path)?.model;
    let best_test = evaluate(&best_model, &test)?;
    println!("best-validation test perplexity: {}", best_test.perplexity);
    println!("final test perplexity: {}", test_metrics.perplexity);
    Ok(())
}

fn checkpoint(trainer: &Trainer, vocab: &Vocabulary, epoch: usize) -> Checkpoint {
    Checkpoint {
        model: trainer.model.clone(),
        vocab: vocab.clone(),
        train: Some(trainer.cfg.clone()),
        epoch,
    }
}

fn cmd_eval(checkpoint: &Path, config: &Path, split: Split) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("cannot load {}", checkpoint.display()))?;

    let train_text = fs::read_to_string(&cfg.data.train)
        .with_context(|| format!("data.train: cannot read {}", cfg.data.train.display()))?;
    let rebuilt = Vocabulary::build(&tokenize(&train_text, cfg.data.mode), &cfg.data.unk_policy())?;
    if rebuilt != ck.vocab {
        bail!(
            "vocabulary mismatch: checkpoint has {} tokens, {} yields {}",
            ck.vocab.len(),
            cfg.data.train.display(),
            rebuilt.len()
        );
    }
    let path = match split {
        Split::Train => &cfg.data.train,
        Split::Valid => &cfg.data.valid,
        Split::Test => &cfg.data.test,
    };
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let ids = ck.vocab.encode(&tokenize(&text, cfg.data.mode))?;
    let train_cfg = ck.train.clone().unwrap_or_else(|| cfg.train.clone());
    let batches = batchify(&ids, train_cfg.batch_size, train_cfg.bptt_len)?;
    let m = evaluate(&ck.model, &batches)?;
    let split_name = format!("{split:?}").to_lowercase();
    println!(
        "{}",
        serde_json::json!({ "split": split_name, "loss": m.loss, "perplexity": m.perplexity })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_count_params(
    family: CellFamily,
    layers: usize,
    hidden: usize,
    emb: usize,
    vocab: usize,
    rates: &[f64],
    tied: bool,
    format: Format,
) -> Result<()> {
    if rates.is_empty() {
        bail!("--rates needs at least one value");
    }
    let mut rows = Vec::new();
    for &r in rates {
        let config = ModelConfig {
            family,
            layers,
            hidden,
            emb,
            rates: Rates::Uniform(r),
            tied,
        };
        let counts = config.count_parameters(vocab)?;
        rows.push((r, counts));
    }
    if format == Format::Json {
        let out: Vec<_> = rows
            .iter()
            .map(|(r, c)| {
                serde_json::json!({
                    "family": family.name(),
                    "rate": r,
                    "layers": c.layers.iter().map(|l| l.restricted).collect::<Vec<_>>(),
                    "unrestricted": c.recurrent.unrestricted,
                    "shared": c.recurrent.shared,
                    "restricted": c.recurrent.restricted,
                    "compression": c.recurrent.compression(),
                    "with_output_bias": c.recurrent_with_output_bias(),
                    "embedding": c.head.embedding,
                    "decoder_weight": c.head.decoder_weight,
                    "decoder_bias": c.head.decoder_bias,
                    "total": c.total(),
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!(
        "{family} | {layers} layers | hidden {hidden} | emb {emb} | vocab {vocab} | {}",
        if tied { "tied" } else { "untied" }
    );
    println!(
        "{:>5}  {:>28}  {:>10}  {:>10}  {:>10}  {:>7}  {:>9}  {:>10}  {:>10}",
        "r", "per layer P_r", "P", "S_r", "P_r", "C", "+bias (M)", "head", "total"
    );
    for (r, c) in &rows {
        let per_layer = c
            .layers
            .iter()
            .map(|l| l.restricted.to_string())
            .collect::<Vec<_>>()
            .join("/");
        println!(
            "{:>5}  {:>28}  {:>10}  {:>10}  {:>10}  {:>7.4}  {:>9.3}  {:>10}  {:>10}",
            r,
            per_layer,
            c.recurrent.unrestricted,
            c.recurrent.shared,
            c.recurrent.restricted,
            c.recurrent.compression(),
            c.recurrent_with_output_bias() as f64 / 1e6,
            c.head.total(),
            c.total()
        );
    }
    Ok(())
}

fn cmd_gradcheck(opts: &GradcheckOptions, format: Format) -> Result<()> {
    if opts.hidden > 8 || opts.input > 8 {
        bail!("gradcheck is meant for small cells (hidden and input at most 8)");
    }
    let report = gradcheck(opts)?;
    if format == Format::Json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "{} d={} k={} r={} | {} entries | max rel. error {:.3e} | {} aliased entries, max rel. error {:.3e} | {}",
            report.family,
            report.hidden,
            report.input,
            report.rate,
            report.entries_checked,
            report.max_rel_error,
            report.aliased_entries,
            report.alias_max_rel_error,
            if report.pass { "PASS" } else { "FAIL" }
        );
    }
    if !report.pass {
        let worst = report
            .worst
            .map(|w| format!("{}[{}, {}]", w.tensor, w.row, w.col))
            .unwrap_or_else(|| "none".into());
        return Err(NumericFailure(format!(
            "gradient check failed: max rel. error {:.3e} at pool {worst}",
            report.max_rel_error
        ))
        .into());
    }
    Ok(())
}
