use std::path::PathBuf;
use std::process::ExitCode;

use aqetuner_cli::{cmd_correlate, cmd_report, cmd_tune, cmd_warmstart, CliError, Overrides};
use clap::{Args, Parser, Subcommand};

/// Query-level knob tuner for analytical query engines, run against the
/// bundled simulated engine.
///
/// Exit codes: 0 success, 1 internal error, 2 usage error, 3 configuration
/// error, 4 engine error, 5 I/O error, 6 data error.
#[derive(Parser)]
#[command(name = "aqetuner", version)]
struct Cli {
    /// Log progress (debug level); RUST_LOG overrides.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SessionArgs {
    /// Session config file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Seed for every random stream; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target query id; repeat for several. Defaults to the config's list.
    #[arg(long = "query")]
    queries: Vec<String>,
    /// Bayesian-optimization evaluation budget; overrides the config.
    #[arg(long)]
    budget_evals: Option<usize>,
}

impl SessionArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            queries: self.queries.clone(),
            budget_evals: self.budget_evals,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full tuning loop. Writes history.jsonl, predictions.jsonl, best.json,
    /// correlation.json, model.json, report.json, report.csv and qerror.csv.
    Tune(SessionArgs),
    /// PSO warm start only. Writes warmstart.jsonl.
    Warmstart(SessionArgs),
    /// Warm start plus knob/operator correlation discovery. Writes
    /// correlation.json and prints precision/recall against the scenario's
    /// ground truth.
    Correlate(SessionArgs),
    /// Metrics for a history file. Reads predictions.jsonl from the same
    /// directory when present. Writes report.json, report.csv and qerror.csv.
    Report {
        /// History file (JSON lines).
        history: PathBuf,
        /// Output directory; defaults to the history's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fmt_latency(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}s"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Tune(a) => {
            let s = cmd_tune(&a.config, &a.overrides())?;
            println!(
                "tuned {} queries with {} evaluations ({} failed): avg {}, p95 {}",
                s.report.queries.len(),
                s.engine_calls,
                s.report.failures,
                fmt_latency(s.report.avg),
                fmt_latency(s.report.p95)
            );
            println!("artifacts in {}", s.out.display());
        }
        Command::Warmstart(a) => {
            let (path, h) = cmd_warmstart(&a.config, &a.overrides())?;
            println!("{} samples ({} failed) -> {}", h.len(), h.failures(), path.display());
        }
        Command::Correlate(a) => {
            let s = cmd_correlate(&a.config, &a.overrides())?;
            for (t, row) in s.matrix.node_types.iter().zip(&s.matrix.matrix) {
                let knobs: Vec<&str> = row
                    .iter()
                    .zip(&s.matrix.knobs)
                    .filter(|(v, _)| **v == 1)
                    .map(|(_, k)| k.as_str())
                    .collect();
                println!("{t}: {}", knobs.join(", "));
            }
            if let Some((p, r)) = s.precision_recall {
                println!("precision {p:.3} recall {r:.3} vs scenario ground truth");
            }
            println!("-> {}", s.path.display());
        }
        Command::Report { history, out } => {
            let r = cmd_report(&history, out.as_deref())?;
            println!(
                "{} queries, {} evaluations, {} failed, {} skipped lines: avg {}, p95 {}, median q-error {}",
                r.queries.len(),
                r.evaluations,
                r.failures,
                r.skipped,
                fmt_latency(r.avg),
                fmt_latency(r.p95),
                r.q_error.median.map_or_else(|| "n/a".to_string(), |q| format!("{q:.3}"))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
