//! `tloc` — crash-time temporal localization on synthetic surveillance
//! feature sequences: generate | train | predict | eval | bench.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tloc_cli::{
    cmd_bench, cmd_eval, cmd_generate, cmd_predict, cmd_train, exit_code_for, parse_phases,
    BenchArgs, EvalArgs, GenerateArgs, PredictArgs, RunConfig, TrainArgs, EXIT_VALIDATION,
};
use tloc_core::synthgen::Split;

#[derive(Parser)]
#[command(name = "tloc", version, about = "Crash-time temporal localization pipeline")]
struct Cli {
    /// JSON config file with flat dotted keys (e.g. {"sampler.alpha": 0.7}).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed for all random sub-streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with known crash timestamps.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_crash: usize,
        #[arg(long, default_value_t = 10)]
        n_clean: usize,
        /// Video length in seconds.
        #[arg(long, default_value_t = 120.0)]
        duration: f64,
        #[arg(long, default_value_t = 10.0)]
        fps: f64,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the multi-phase training procedure.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: contrastive,supervised,compression.
        #[arg(long, default_value = "contrastive,supervised,compression")]
        phases: String,
        /// Override the per-phase epoch counts.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Training-log CSV path (default: <out>/training_log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Produce one prediction JSON per video.
    Predict {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use sliding-window long-video inference.
        #[arg(long)]
        sliding_window: bool,
        /// Restrict to one split: train | test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Prediction directory; may contain "{seed}" with --seeds.
        #[arg(long)]
        predictions: PathBuf,
        /// truth.csv or a corpus directory containing one.
        #[arg(long)]
        truth: PathBuf,
        /// Stratify by: condition | duration.
        #[arg(long)]
        strata: Option<String>,
        /// Seed range "lo..hi" (inclusive) for mean ± std reporting.
        #[arg(long)]
        seeds: Option<String>,
        /// Write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write an error-histogram CSV here.
        #[arg(long)]
        hist: Option<PathBuf>,
    },
    /// Scan-scaling, frame-budget, and chunk-invariance tables.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "1024,2048,4096,8192")]
        t_values: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn run(cli: Cli) -> tloc_core::Result<String> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.load_file(path)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }

    match cli.cmd {
        Cmd::Generate { out, n_crash, n_clean, duration, fps, force } => cmd_generate(&GenerateArgs {
            out,
            n_crash,
            n_clean,
            seed: config.seed,
            duration_s: duration,
            fps,
            force,
        }),
        Cmd::Train { corpus, out, phases, epochs, lr, batch, log } => {
            if let Some(lr) = lr {
                config.lr = lr;
            }
            if let Some(batch) = batch {
                config.batch = batch;
            }
            cmd_train(&TrainArgs {
                corpus,
                out,
                phases: parse_phases(&phases)?,
                epochs,
                config,
                log,
            })
        }
        Cmd::Predict { corpus, checkpoint, out, sliding_window, split } => {
            let split = match split.as_deref() {
                None => None,
                Some("train") => Some(Split::Train),
                Some("test") => Some(Split::Test),
                Some(other) => {
                    return Err(tloc_core::CoreError::contract(format!(
                        "unknown split {other:?} (use train or test)"
                    )))
                }
            };
            cmd_predict(&PredictArgs { corpus, checkpoint, out, sliding_window, split, config })
        }
        Cmd::Eval { predictions, truth, strata, seeds, out, hist } => {
            let seeds = match seeds {
                None => None,
                Some(s) => {
                    let (lo, hi) = s.split_once("..").ok_or_else(|| {
                        tloc_core::CoreError::contract("--seeds expects lo..hi")
                    })?;
                    let lo: u64 = lo
                        .parse()
                        .map_err(|_| tloc_core::CoreError::contract("bad --seeds lower bound"))?;
                    let hi: u64 = hi
                        .parse()
                        .map_err(|_| tloc_core::CoreError::contract("bad --seeds upper bound"))?;
                    Some((lo, hi))
                }
            };
            cmd_eval(&EvalArgs { predictions, truth, strata, seeds, out, hist })
        }
        Cmd::Bench { out, t_values, n, d, reps } => {
            let t_values: Vec<usize> = t_values
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| tloc_core::CoreError::contract("bad --t-values entry"))
                })
                .collect::<tloc_core::Result<_>>()?;
            cmd_bench(&BenchArgs { out, t_values, n, d, reps })
        }
    }
}

fn main() -> ExitCode {
    tloc_core::par::init_thread_cap();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version; argument errors are validation.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
