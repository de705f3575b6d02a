//! `eianet`: dataset generation, source training, adaptation and
//! diagnostics from the command line.
//!
//! Every command prints one JSON object on standard output. Exit codes:
//! 0 success, 1 a validation check failed, 2 configuration or shape
//! problem, 3 unreadable, unwritable or malformed files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use eianet_core::checkpoint::Checkpoint;
use eianet_core::data::{self, DomainDataset, ShiftSpec};
use eianet_core::nc::measure_nc;
use eianet_core::pipeline::{adapt, evaluate, train_source, METRICS_SCHEMA_VERSION};
use eianet_core::{build_etf, validate_etf, Classifier, DivSign, Error, RunConfig};

const METRICS_FILE: &str = "metrics.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const THREADS_VAR: &str = "EIANET_THREADS";

#[derive(Parser)]
#[command(name = "eianet", version, about = "Source-free domain adaptation with a fixed ETF classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair into OUT/source and OUT/target.
    GenData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        /// `none`, `default`, `fine-grained`, or a JSON object.
        #[arg(long, default_value = "default")]
        shift: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train encoder and classifier on a labelled source dataset.
    TrainSource {
        /// Source dataset directory (or a gen-data output directory).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Adapt a source checkpoint to an unlabelled target dataset.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target dataset directory (or a gen-data output directory).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Classification accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Check that a classifier matrix is a simplex ETF.
    EtfCheck {
        /// Validate the classifier stored in this checkpoint.
        #[arg(long, conflicts_with_all = ["classes", "dim"])]
        checkpoint: Option<PathBuf>,
        /// Build a fresh ETF with this many classes instead.
        #[arg(long, requires = "dim")]
        classes: Option<usize>,
        #[arg(long, requires = "classes")]
        dim: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = eianet_core::etf::DEFAULT_ETF_TOLERANCE)]
        tolerance: f64,
    },
    /// Neural-collapse statistics of a checkpoint on a labelled dataset.
    NcReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DivSignArg {
    Literal,
    Negated,
}

/// Run configuration: a JSON file, then individual flags on top.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    use_attention: Option<bool>,
    #[arg(long)]
    use_etf: Option<bool>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    logit_scale: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    lr_source: Option<f64>,
    #[arg(long)]
    lr_adapt: Option<f64>,
    #[arg(long)]
    epochs_source: Option<usize>,
    #[arg(long)]
    epochs_adapt: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    div_sign: Option<DivSignArg>,
}

impl Overrides {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => base,
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$field = v; })*
            };
        }
        set!(
            classes, feature_dim, image_size, widths, use_attention, use_etf, neighbors, logit_scale,
            label_smoothing, lr_source, lr_adapt, epochs_source, epochs_adapt, momentum, weight_decay,
            batch_size, seed
        );
        if let Some(a) = self.alpha {
            c.alpha = Some(a);
        }
        if let Some(s) = self.div_sign {
            c.div_sign = match s {
                DivSignArg::Literal => DivSign::Literal,
                DivSignArg::Negated => DivSign::Negated,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

enum Failure {
    Check(Value),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Contract(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 3,
    }
}

fn threads() -> Result<usize, Error> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Accepts a dataset directory or a gen-data directory holding `domain/`.
fn load_dataset(dir: &Path, domain: &str) -> Result<DomainDataset, Error> {
    let nested = dir.join(domain);
    if !dir.join("manifest.json").exists() && nested.join("manifest.json").exists() {
        data::load(&nested)
    } else {
        data::load(dir)
    }
}

fn select(ds: &DomainDataset, split: Split) -> DomainDataset {
    let (train, test) = ds.holdout_split();
    match split {
        Split::All => ds.clone(),
        Split::Train => ds.subset(&train),
        Split::Test => ds.subset(&test),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    fn create(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(METRICS_FILE);
        let file = File::create(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    fn write<T: serde::Serialize>(&mut self, record: &T) -> Result<(), Error> {
        let line = serde_json::to_string(record).map_err(|e| Error::Contract(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }

    fn finish(mut self) -> Result<(), Error> {
        self.out.flush().map_err(|source| Error::Io {
            path: self.path,
            source,
        })
    }
}

fn run(command: Command) -> Result<Value, Failure> {
    match command {
        Command::GenData {
            classes,
            per_class,
            shift,
            seed,
            out,
        } => {
            let spec = ShiftSpec::parse(&shift)?;
            let (source, target) = data::generate(classes, per_class, &spec, seed)?;
            data::save(&source, &out.join("source"))?;
            data::save(&target, &out.join("target"))?;
            Ok(json!({
                "source": out.join("source"),
                "target": out.join("target"),
                "samples_per_domain": source.len(),
                "classes": classes,
            }))
        }

        Command::TrainSource { data, out, overrides } => {
            let cfg = overrides.resolve(RunConfig::default())?;
            let threads = threads()?;
            let ds = load_dataset(&data, "source")?;
            create_dir(&out)?;
            let mut metrics = MetricsWriter::create(&out)?;
            let mut last = None;
            let ckpt = train_source(&cfg, &ds, threads, |r| {
                last = Some(r.clone());
                metrics.write(r)
            })?;
            metrics.finish()?;
            let path = out.join(CHECKPOINT_FILE);
            ckpt.save(&path)?;
            Ok(json!({
                "checkpoint": path,
                "metrics": out.join(METRICS_FILE),
                "schema": METRICS_SCHEMA_VERSION,
                "final": last,
            }))
        }

        Command::Adapt {
            checkpoint,
            data,
            out,
            overrides,
        } => {
            let source = Checkpoint::load(&checkpoint)?;
            let cfg = overrides.resolve(source.config.clone())?;
            let threads = threads()?;
            let target = load_dataset(&data, "target")?;
            if target.classes() != source.config.classes {
                return Err(Error::Config(format!(
                    "checkpoint has {} classes, target data has {}",
                    source.config.classes,
                    target.classes()
                ))
                .into());
            }
            let images = target.images();
            // Labels are read only inside this evaluator.
            let before = evaluate(&source.encoder, &source.classifier, images, target.labels(), threads)?;
            create_dir(&out)?;
            let mut metrics = MetricsWriter::create(&out)?;
            let mut last = None;
            let adapted = adapt(
                &source,
                &cfg,
                images,
                threads,
                |enc, cls| Ok(evaluate(enc, cls, images, target.labels(), threads)?.accuracy),
                |r| {
                    last = Some(r.clone());
                    metrics.write(r)
                },
            )?;
            metrics.finish()?;
            let path = out.join(CHECKPOINT_FILE);
            adapted.save(&path)?;
            Ok(json!({
                "checkpoint": path,
                "metrics": out.join(METRICS_FILE),
                "schema": METRICS_SCHEMA_VERSION,
                "source_only_target_acc": before.accuracy,
                "final": last,
            }))
        }

        Command::Eval { checkpoint, data, split } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = select(&load_dataset(&data, "target")?, split);
            check_classes(&ckpt, &ds)?;
            let report = evaluate(&ckpt.encoder, &ckpt.classifier, ds.images(), ds.labels(), threads()?)?;
            Ok(json!({
                "split": split.name(),
                "samples": report.samples,
                "correct": report.correct,
                "accuracy": report.accuracy,
            }))
        }

        Command::EtfCheck {
            checkpoint,
            classes,
            dim,
            seed,
            tolerance,
        } => {
            let report = match (checkpoint, classes, dim) {
                (Some(path), _, _) => match Checkpoint::load(&path)?.classifier {
                    Classifier::Etf(etf) => validate_etf(&etf, tolerance),
                    Classifier::Linear(_) => {
                        return Err(Error::Config(
                            "checkpoint uses a trainable linear classifier, not an ETF".into(),
                        )
                        .into())
                    }
                },
                (None, Some(k), Some(d)) => validate_etf(&build_etf(k, d, seed)?, tolerance),
                _ => {
                    return Err(Error::Config("pass --checkpoint, or --classes with --dim".into()).into())
                }
            };
            let value = serde_json::to_value(report).map_err(|e| Error::Contract(e.to_string()))?;
            if report.passed {
                Ok(value)
            } else {
                Err(Failure::Check(value))
            }
        }

        Command::NcReport { checkpoint, data, split } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = select(&load_dataset(&data, "source")?, split);
            check_classes(&ckpt, &ds)?;
            let report = measure_nc(&ckpt.encoder, &ckpt.classifier, ds.images(), ds.labels(), threads()?)?;
            serde_json::to_value(report).map_err(|e| Error::Contract(e.to_string()).into())
        }
    }
}

fn check_classes(ckpt: &Checkpoint, ds: &DomainDataset) -> Result<(), Error> {
    if ds.classes() != ckpt.config.classes || ds.image_size() != ckpt.config.image_size {
        return Err(Error::Config(format!(
            "checkpoint expects {} classes at {} px, data has {} classes at {} px",
            ckpt.config.classes,
            ckpt.config.image_size,
            ds.classes(),
            ds.image_size()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    eianet_core::runtime::tune_allocator();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(Failure::Check(value)) => {
            println!("{value}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("eianet: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
