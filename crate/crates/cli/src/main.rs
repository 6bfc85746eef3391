use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtcb::trainer::Schedule;
use mtcb::{Error, Result};
use mtcb_cli::commands;
use mtcb_cli::config::{Overrides, RunConfig};

/// Shared-encoder multitask training, evaluation and benchmarking.
///
/// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error (including
/// failed gradient checks), 5 io or checkpoint format error.
#[derive(Parser)]
#[command(name = "mtcb", version)]
struct Cli {
    /// Also write the command's structured output (TSV) to this file.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of task ids.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write every task's train/test data in its file format.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and save a checkpoint (vocabulary goes to <out>.vocab).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schedule: Option<Schedule>,
        #[arg(long)]
        outer_loops: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-set metrics of a checkpoint, one row per task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate this config's tasks instead of the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        /// Directory for per-task prediction dumps.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Shared versus per-head encoder inference timing.
    Bench {
        #[arg(long, required_unless_present = "config")]
        checkpoint: Option<PathBuf>,
        /// Benchmark a freshly initialized model of this config.
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        n_inputs: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference checks of every primitive and task loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated check names (default: config list or all).
        #[arg(long, value_delimiter = ',')]
        ops: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt this op's backward rule (tests the failure path).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

fn load(path: &Path, o: &Overrides) -> Result<RunConfig> {
    RunConfig::load(path)?.apply(o)
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        tasks: c.tasks.clone(),
        ..Overrides::default()
    }
}

fn write_log(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let log = cli.log.as_deref();
    match cli.cmd {
        Cmd::Synth { common, out } => {
            let mut cfg = load(&common.config, &overrides(&common))?;
            if let Some(seed) = common.seed {
                cfg.reseed_synthetic(seed);
            }
            let report = commands::cmd_synth(&cfg, &out)?;
            print!("{report}");
            write_log(log, &report)
        }
        Cmd::Train {
            common,
            schedule,
            outer_loops,
            out,
        } => {
            let o = Overrides {
                schedule,
                outer_loops,
                ..overrides(&common)
            };
            let cfg = load(&common.config, &o)?;
            let outcome = commands::cmd_train(&cfg, &out, log)?;
            print!("{}", outcome.report());
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            config,
            tasks,
            dump,
        } => {
            let o = Overrides {
                tasks: tasks.clone(),
                ..Overrides::default()
            };
            let cfg = config.as_deref().map(|p| load(p, &o)).transpose()?;
            let mut rows = commands::cmd_eval(&checkpoint, cfg.as_ref(), dump.as_deref())?;
            if cfg.is_none() {
                if let Some(ids) = &tasks {
                    rows.retain(|r| ids.contains(&r.task_id));
                }
            }
            let report = commands::eval_report(&rows);
            print!("{report}");
            write_log(log, &report)
        }
        Cmd::Bench {
            checkpoint,
            config,
            n_inputs,
            reps,
            seq_len,
            seed,
        } => {
            let cfg = config.as_deref().map(|p| load(p, &Overrides::default())).transpose()?;
            let mut b = cfg.as_ref().map(|c| c.bench.clone()).unwrap_or_default();
            b.n_inputs = n_inputs.unwrap_or(b.n_inputs);
            b.reps = reps.unwrap_or(b.reps);
            b.seq_len = seq_len.unwrap_or(b.seq_len);
            b.seed = seed.unwrap_or(b.seed);
            let report = commands::cmd_bench(checkpoint.as_deref(), cfg.as_ref(), &b)?;
            println!("{report}");
            write_log(log, &format!("{report}\n"))
        }
        Cmd::Gradcheck { config, ops, seed, fault } => {
            let cfg = config.as_deref().map(|p| load(p, &Overrides::default())).transpose()?;
            let ops = ops.or_else(|| cfg.as_ref().and_then(|c| c.gradcheck_ops.clone()));
            let seed = seed.or(cfg.as_ref().map(|c| c.trainer.seed)).unwrap_or(1);
            let outcomes = commands::cmd_gradcheck(ops.as_deref(), fault.as_deref(), seed)?;
            let report = commands::gradcheck_report(&outcomes);
            print!("{report}");
            write_log(log, &report)?;
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
