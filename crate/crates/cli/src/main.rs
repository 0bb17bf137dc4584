mod commands;
mod data;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use handstream::infer::Attribution;
use handstream::train::{HeadSet, OnOffPolicy};

use commands::{AblateRun, EvalRun, GenerateRun, InferRun, ProtocolName, Run, SplitRun, TrainRun};
use data::{DataFormat, DataSource};
use manifest::RunManifest;

/// Bad flags, missing config files or inconsistent options (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Input data that cannot be used as given (exit code 3).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct DataError(pub String);

#[derive(Parser)]
#[command(name = "handstream", version, about = "Hand gesture detection on 3D pose streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input format of the sequence files.
    #[arg(long, value_enum, default_value = "canonical")]
    format: DataFormat,
    /// Adapter config (TOML) for the external formats.
    #[arg(long)]
    adapter: Option<PathBuf>,
}

impl DataArgs {
    fn source(&self, dir: &std::path::Path) -> Result<DataSource> {
        DataSource::resolve(dir, self.format, self.adapter.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Generate {
        /// Synthesis config (TOML); the built-in six-class benchmark when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 80)]
        count: usize,
    },
    /// Split a corpus into train/ and test/ directories.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Keep every subject (source id) on one side.
        #[arg(long)]
        by_subject: bool,
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoints plus the epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        input: DataArgs,
        /// Training config (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// FG, FG+GS/GE, FG+SDN, FG+SDN+GC or full.
        #[arg(long)]
        head_set: Option<HeadSet>,
        /// exact, window_error[:p] or index_error.
        #[arg(long)]
        on_off_policy: Option<OnOffPolicy>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stream sequences through a checkpoint and write detections.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Expected window length; must match the checkpoint.
        #[arg(long = "w")]
        window: Option<usize>,
        /// center, window_start or emit_frame.
        #[arg(long, default_value = "center")]
        attribution: Attribution,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        input: DataArgs,
        /// Detection file, or a directory holding detections.txt.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, value_enum, default_value = "shrec22")]
        protocol: ProtocolName,
        #[arg(long, default_value_t = 0.5)]
        mor: f64,
        #[arg(long)]
        fps: Option<f64>,
        /// JI/DR/FP curve over `start:end:step` overlap ratios.
        #[arg(long)]
        ji_mor_sweep: Option<String>,
        #[arg(long)]
        per_class: bool,
        #[arg(long)]
        fp_by_category: bool,
        /// Also render SVG charts of the curve and per-class CSVs.
        #[arg(long)]
        plots: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every head set / policy / seed combination.
    Ablate {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[command(flatten)]
        input: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated head sets; all five when omitted.
        #[arg(long, value_delimiter = ',')]
        head_sets: Vec<HeadSet>,
        /// Comma-separated on/off policies.
        #[arg(long, value_delimiter = ',', default_value = "exact")]
        policies: Vec<OnOffPolicy>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.5)]
        mor: f64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a run from its manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Write to this directory instead of the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(command: Command) -> Result<Run> {
    Ok(match command {
        Command::Generate {
            config,
            out,
            seed,
            count,
        } => Run::Generate(GenerateRun {
            synth: commands::read_synth_config(config.as_deref(), seed)?,
            count,
            out,
        }),
        Command::Split {
            data,
            input,
            out,
            by_subject,
            train_fraction,
            seed,
        } => Run::Split(SplitRun {
            data: input.source(&data)?,
            by_subject,
            train_fraction,
            seed,
            out,
        }),
        Command::Train {
            data,
            input,
            config,
            out,
            head_set,
            on_off_policy,
            seed,
            epochs,
        } => {
            let mut train = commands::read_train_config(config.as_deref())?;
            train.head_set = head_set.unwrap_or(train.head_set);
            train.on_off_policy = on_off_policy.unwrap_or(train.on_off_policy);
            train.seed = seed.unwrap_or(train.seed);
            train.epochs = epochs.unwrap_or(train.epochs);
            train.validate()?;
            Run::Train(TrainRun {
                data: input.source(&data)?,
                train,
                out,
            })
        }
        Command::Infer {
            checkpoint,
            data,
            input,
            out,
            window,
            attribution,
        } => Run::Infer(InferRun {
            checkpoint,
            data: input.source(&data)?,
            attribution,
            window,
            out,
        }),
        Command::Eval {
            gt,
            input,
            detections,
            protocol,
            mor,
            fps,
            ji_mor_sweep,
            per_class,
            fp_by_category,
            plots,
            out,
        } => {
            if !(mor > 0.0 && mor <= 1.0) {
                return Err(handstream::Error::InvalidMor(mor).into());
            }
            let sweep = match ji_mor_sweep {
                Some(s) => handstream::metrics::parse_sweep(&s)?,
                None => Vec::new(),
            };
            Run::Eval(EvalRun {
                gt: input.source(&gt)?,
                detections,
                protocol,
                mor,
                fps,
                sweep,
                per_class,
                fp_by_category,
                plots,
                out,
            })
        }
        Command::Ablate {
            train_data,
            test_data,
            input,
            config,
            head_sets,
            policies,
            seeds,
            mor,
            epochs,
            out,
        } => {
            let mut train = commands::read_train_config(config.as_deref())?;
            train.epochs = epochs.unwrap_or(train.epochs);
            train.validate()?;
            Run::Ablate(AblateRun {
                train_data: input.source(&train_data)?,
                test_data: input.source(&test_data)?,
                train,
                head_sets: if head_sets.is_empty() {
                    HeadSet::ALL.to_vec()
                } else {
                    head_sets
                },
                policies,
                seeds,
                mor,
                out,
            })
        }
        Command::Replay { manifest, out } => {
            let mut run = RunManifest::read(&manifest)?.run;
            if let Some(out) = out {
                run.set_out(out);
            }
            run
        }
    })
}

fn execute(run: Run) -> Result<PathBuf> {
    let t0 = Instant::now();
    let outcome = run.execute()?;
    let mut timings = outcome.timings;
    timings.total_s = t0.elapsed().as_secs_f64();
    let dir = run.out().to_path_buf();
    let manifest = RunManifest {
        command: run.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        run,
        seeds: outcome.seeds,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        timings,
    };
    manifest.write(&dir)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use handstream::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<DataError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Spec(_) | E::InvalidMor(_) | E::InvalidFps(_) | E::FileNotFound(_) => 2,
                E::InvariantViolation(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match resolve(cli.command).and_then(execute) {
        Ok(manifest) => {
            eprintln!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
