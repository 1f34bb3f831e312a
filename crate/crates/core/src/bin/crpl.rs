use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crpl::bench::{evaluate_all, run_ablation, verify_lemma, LemmaSweep, GENERATOR_ATTEMPTS};
use crpl::checkpoint::{load_checkpoint, save_checkpoint};
use crpl::dataset::{read_benchmark, write_benchmark};
use crpl::embedding::compute_centroids;
use crpl::prompt::{text_embedding_table, Owner, TextEncoder};
use crpl::pseudo_label::{enhanced_pseudo_label, WeightScheme};
use crpl::synthetic::{generate_with_retry, SyntheticSpec};
use crpl::training::{AblationMode, TrainConfig, Trainer};

/// Prompt learning for domain adaptation on frozen embeddings.
#[derive(Parser)]
#[command(name = "crpl", version)]
struct Cli {
    /// Overrides the seed of the config or generator spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON training config; unset fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark into --out.
    GenData {
        /// JSON generator spec; unset fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train prompts and write a checkpoint to --out. Epoch metrics go to
    /// stdout as JSON lines.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are done (the schedule is unchanged).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Target accuracy of a checkpoint in every inference mode.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Enhanced soft pseudo-labels for every target sample, as JSON lines.
    PseudoLabels {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Compare exact transport with brute-force constrained clustering.
    VerifyLemma {
        /// Random instances per (B, K, d) cell.
        #[arg(long, default_value_t = 12)]
        per_cell: u64,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Train every ablation mode on the same generated data.
    Ablate {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Comma-separated subset of CPL_only, CPL_with_W, SPL_only, CRPL.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json_to(dir: Option<&Path>, name: &str, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn require_out(out: Option<&Path>) -> Result<&Path> {
    out.context("this command needs --out <dir>")
}

impl Cli {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => read_json_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    fn synthetic_spec(&self, path: Option<&Path>) -> Result<SyntheticSpec> {
        let mut spec = match path {
            Some(path) => read_json_file(path)?,
            None => SyntheticSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Serialize)]
struct GenSummary {
    seed: u64,
    sha256: String,
    fit_min_cosine: f64,
    fit_heldout_accuracy: f64,
}

#[derive(Serialize)]
struct PseudoLabelLine<'a> {
    index: usize,
    argmax: usize,
    confidence: f64,
    probs: &'a [f64],
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = cli.out.as_deref();
    match &cli.command {
        Command::GenData { spec } => {
            let spec = cli.synthetic_spec(spec.as_deref())?;
            let dir = require_out(out)?;
            let (bench, stats, seed) = generate_with_retry(&spec, GENERATOR_ATTEMPTS)?;
            write_benchmark(dir, &bench)?;
            print_json(&GenSummary {
                seed,
                sha256: bench.content_hash(),
                fit_min_cosine: stats.min_cosine,
                fit_heldout_accuracy: stats.heldout_accuracy,
            })?;
        }
        Command::Train {
            data,
            resume,
            stop_after,
        } => {
            let config = cli.train_config()?;
            let dir = require_out(out)?;
            let bench = read_benchmark(data)?;
            let task = bench.training_task()?;
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    ckpt.manifest.check_encoder(task.encoder.shape())?;
                    let opt = ckpt
                        .optimizer
                        .with_context(|| format!("{} has no optimizer state", path.display()))?;
                    Trainer::resume(&task, config, ckpt.bank, opt)?
                }
                None => Trainer::new(&task, config)?,
            };
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let metrics_path = dir.join("metrics.jsonl");
            let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
            let stdout = io::stdout();
            let mut emit = |line: String| -> Result<()> {
                writeln!(stdout.lock(), "{line}")?;
                writeln!(metrics, "{line}")?;
                Ok(())
            };
            emit(serde_json::to_string(&trainer.initial_record()?)?)?;
            let limit = stop_after.unwrap_or(usize::MAX);
            while !trainer.is_finished() && trainer.epochs_done() < limit {
                emit(serde_json::to_string(&trainer.run_epoch()?)?)?;
            }
            metrics.flush()?;
            save_checkpoint(dir, trainer.bank(), Some(trainer.optimizer()), task.encoder.shape())?;
        }
        Command::Eval { data, ckpt } => {
            let config = cli.train_config()?;
            let bench = read_benchmark(data)?;
            let ckpt = load_checkpoint(ckpt)?;
            ckpt.manifest.check_encoder(bench.encoder)?;
            let enc = TextEncoder::new(bench.encoder)?;
            let report = evaluate_all(&ckpt.bank, &enc, &bench.target, &bench.target_labels, config.gamma)?;
            write_json_to(out, "eval.json", &report)?;
            print_json(&report)?;
        }
        Command::PseudoLabels { data, ckpt } => {
            let config = cli.train_config()?;
            let bench = read_benchmark(data)?;
            let ckpt = load_checkpoint(ckpt)?;
            ckpt.manifest.check_encoder(bench.encoder)?;
            let enc = TextEncoder::new(bench.encoder)?;
            let bank = &ckpt.bank;
            let sources = if bank.num_sources() == bench.sources.len() {
                bench.sources.clone()
            } else if bank.num_sources() == 1 {
                vec![crpl::embedding::DomainDataset::merge("combined", &bench.sources, bench.num_classes)?]
            } else {
                bail!(
                    "checkpoint has {} source prompts but the data has {} sources",
                    bank.num_sources(),
                    bench.sources.len()
                );
            };
            let centroids = compute_centroids(&sources, bench.num_classes);
            let base = text_embedding_table(bank, &enc, Owner::Base)?;
            let tables = (0..bank.num_sources())
                .map(|i| text_embedding_table(bank, &enc, Owner::Source(i)))
                .collect::<crpl::Result<Vec<_>>>()?;
            let scheme = WeightScheme {
                metric: config.weight_metric,
                sign: config.weight_sign,
            };
            let mut sink: Box<dyn Write> = match out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    Box::new(BufWriter::new(File::create(dir.join("pseudo_labels.jsonl"))?))
                }
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            for (index, (z, raw)) in bench.target.unit().iter().zip(bench.target.raw()).enumerate() {
                let label = enhanced_pseudo_label(z, raw, &base, &tables, &centroids, config.gamma, scheme)?;
                let argmax = label.argmax();
                let line = PseudoLabelLine {
                    index,
                    argmax,
                    confidence: label.probs()[argmax],
                    probs: label.probs(),
                };
                writeln!(sink, "{}", serde_json::to_string(&line)?)?;
            }
            sink.flush()?;
        }
        Command::VerifyLemma { per_cell, tolerance } => {
            let sweep = LemmaSweep {
                seeds_per_cell: *per_cell,
                seed: cli.seed.unwrap_or(0),
                ..LemmaSweep::default()
            };
            let report = verify_lemma(&sweep, *tolerance)?;
            write_json_to(out, "lemma.json", &report)?;
            print_json(&report)?;
            if report.failures > 0 {
                bail!("{} of {} instances exceed the tolerance", report.failures, report.instances);
            }
        }
        Command::Ablate { spec, modes } => {
            let config = cli.train_config()?;
            let spec = cli.synthetic_spec(spec.as_deref())?;
            let modes = if modes.is_empty() {
                AblationMode::ALL.to_vec()
            } else {
                modes.iter().map(|m| m.parse()).collect::<crpl::Result<Vec<_>>>()?
            };
            let table = run_ablation(&spec, &config, &modes)?;
            write_json_to(out, "ablation.json", &table)?;
            print_json(&table)?;
        }
    }
    Ok(())
}
