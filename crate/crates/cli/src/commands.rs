//! The `tune`, `warmstart`, `correlate` and `report` commands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use aqetuner_core::encoder::CorrelationMatrix;
use aqetuner_core::engine::{Engine, SimulatedEngine};
use aqetuner_core::knobs::{Configuration, RawValue};
use aqetuner_core::tuner::{self, BestConfig, Session, TuningHistory};
use serde::Serialize;

use crate::config::SessionConfig;
use crate::error::{CliError, ExitKind};
use crate::report::{self, Report};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const BEST_FILE: &str = "best.json";
pub const CORRELATION_FILE: &str = "correlation.json";
pub const MODEL_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const QERROR_CSV_FILE: &str = "qerror.csv";
pub const WARMSTART_FILE: &str = "warmstart.jsonl";

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub queries: Vec<String>,
    pub budget_evals: Option<usize>,
}

/// Writes through a temporary file in the target directory, then renames it
/// into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::new(ExitKind::Io, anyhow::Error::new(e).context(format!("writing {}", path.display())));
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w).map_err(|e| CliError::new(ExitKind::Io, e.context(format!("writing {}", path.display()))))?;
        w.flush().map_err(io)?;
    }
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// Config, engine, target queries and output directory for one command.
struct Prepared {
    cfg: SessionConfig,
    engine: SimulatedEngine,
    queries: Vec<String>,
    out: PathBuf,
}

fn prepare(config: &Path, ov: &Overrides) -> Result<Prepared, CliError> {
    let mut cfg = SessionConfig::load(config).map_err(|e| CliError::new(ExitKind::Config, e.into()))?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(n) = ov.budget_evals {
        cfg.tuner.budget.max_evaluations = Some(n);
    }
    let scenario = cfg.load_scenario()?;
    let engine = SimulatedEngine::new(scenario, cfg.seed)?;
    let queries = if !ov.queries.is_empty() {
        ov.queries.clone()
    } else {
        cfg.queries.clone().unwrap_or_else(|| engine.query_ids())
    };
    let known = engine.query_ids();
    if let Some(q) = queries.iter().find(|q| !known.contains(q)) {
        return Err(CliError::new(ExitKind::Config, anyhow::anyhow!("unknown query `{q}`")));
    }
    let out = ov.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(|e| CliError::new(ExitKind::Io, e))?;
    Ok(Prepared {
        cfg,
        engine,
        queries,
        out,
    })
}

fn write_history(path: &Path, history: &TuningHistory) -> Result<(), CliError> {
    write_atomic(path, |w| Ok(history.write_jsonl(w)?))
}

/// A best configuration with its raw knob values.
#[derive(Debug, Serialize)]
pub struct BestEntry {
    #[serde(flatten)]
    pub best: BestConfig,
    pub knobs: Option<BTreeMap<String, RawValue>>,
}

fn best_entries(engine: &SimulatedEngine, best: Vec<BestConfig>) -> Result<Vec<BestEntry>, CliError> {
    let space = engine.knob_space();
    best.into_iter()
        .map(|b| {
            let knobs = match &b.theta {
                Some(t) => {
                    let raw = space.denormalize(&Configuration::new(t.clone())?)?;
                    Some(space.names().into_iter().zip(raw).collect())
                }
                None => None,
            };
            Ok(BestEntry { best: b, knobs })
        })
        .collect()
}

/// Artifacts of a tuning run.
#[derive(Debug)]
pub struct TuneSummary {
    pub out: PathBuf,
    pub report: Report,
    pub engine_calls: usize,
}

/// Full tuning session: history, best configurations, correlation matrix,
/// model checkpoint, predictions and report.
pub fn cmd_tune(config: &Path, ov: &Overrides) -> Result<TuneSummary, CliError> {
    let p = prepare(config, ov)?;
    log::info!(
        "tuning {} queries on {} (seed {})",
        p.queries.len(),
        p.cfg.scenario,
        p.cfg.seed
    );
    let outcome = tuner::run(&p.engine, &p.queries, p.cfg.tuner, p.cfg.seed)?;
    write_history(&p.out.join(HISTORY_FILE), &outcome.history)?;
    write_atomic(&p.out.join(PREDICTIONS_FILE), |w| Ok(report::write_predictions(&outcome.predictions, w)?))?;
    write_json(&p.out.join(BEST_FILE), &best_entries(&p.engine, outcome.best)?)?;
    write_json(&p.out.join(CORRELATION_FILE), &outcome.correlation)?;
    write_json(&p.out.join(MODEL_FILE), &outcome.model.checkpoint())?;
    let report = Report::build(&outcome.history, &outcome.predictions, 0, 0);
    write_report(&p.out, &report)?;
    Ok(TuneSummary {
        out: p.out,
        report,
        engine_calls: outcome.history.len(),
    })
}

/// PSO warm start only; writes the samples as history lines.
pub fn cmd_warmstart(config: &Path, ov: &Overrides) -> Result<(PathBuf, TuningHistory), CliError> {
    let p = prepare(config, ov)?;
    let mut session = Session::new(&p.engine, &p.queries, p.cfg.tuner, p.cfg.seed)?;
    session.warm_start()?;
    let path = p.out.join(WARMSTART_FILE);
    let history = session.history().clone();
    write_history(&path, &history)?;
    Ok((path, history))
}

#[derive(Debug)]
pub struct CorrelateSummary {
    pub path: PathBuf,
    pub matrix: CorrelationMatrix,
    /// Precision and recall against the scenario's ground truth.
    pub precision_recall: Option<(f64, f64)>,
}

/// Warm-start timing collection plus correlation discovery.
pub fn cmd_correlate(config: &Path, ov: &Overrides) -> Result<CorrelateSummary, CliError> {
    let p = prepare(config, ov)?;
    let mut session = Session::new(&p.engine, &p.queries, p.cfg.tuner, p.cfg.seed)?;
    session.warm_start()?;
    let matrix = session.discover_correlation()?;
    let path = p.out.join(CORRELATION_FILE);
    write_json(&path, &matrix)?;
    let truth = p.engine.scenario().ground_truth_matrix();
    let precision_recall = restrict(&truth, &matrix).and_then(|t| matrix.precision_recall(&t).ok());
    Ok(CorrelateSummary {
        path,
        matrix,
        precision_recall,
    })
}

/// `truth` reduced to the node types present in `matrix`.
fn restrict(truth: &CorrelationMatrix, matrix: &CorrelationMatrix) -> Option<CorrelationMatrix> {
    let rows = matrix
        .node_types
        .iter()
        .map(|t| truth.node_types.iter().position(|x| x == t).map(|i| truth.matrix[i].clone()))
        .collect::<Option<Vec<_>>>()?;
    Some(CorrelationMatrix {
        node_types: matrix.node_types.clone(),
        knobs: truth.knobs.clone(),
        matrix: rows,
    })
}

fn write_report(out: &Path, report: &Report) -> Result<(), CliError> {
    write_json(&out.join(REPORT_FILE), report)?;
    write_atomic(&out.join(REPORT_CSV_FILE), |w| Ok(report.write_csv(w)?))?;
    write_atomic(&out.join(QERROR_CSV_FILE), |w| Ok(report.write_q_error_csv(w)?))
}

/// Metrics for an existing history. Predictions are read from
/// `predictions.jsonl` next to the history when present. Unparsable lines
/// are skipped and counted.
pub fn cmd_report(history: &Path, out: Option<&Path>) -> Result<Report, CliError> {
    let open = |p: &Path| {
        File::open(p)
            .with_context(|| format!("opening {}", p.display()))
            .map_err(|e| CliError::new(ExitKind::Io, e))
    };
    let (h, skipped) = TuningHistory::read_jsonl_lenient(BufReader::new(open(history)?))?;
    let dir = history.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let pred_path = dir.join(PREDICTIONS_FILE);
    let (preds, skipped_preds) = if pred_path.is_file() {
        report::read_predictions_lenient(BufReader::new(open(&pred_path)?))
            .with_context(|| format!("reading {}", pred_path.display()))
            .map_err(|e| CliError::new(ExitKind::Io, e))?
    } else {
        (Vec::new(), 0)
    };
    if skipped > 0 {
        log::warn!("skipped {skipped} unparsable history lines");
    }
    let report = Report::build(&h, &preds, skipped, skipped_preds);
    let out = out.unwrap_or(dir);
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(|e| CliError::new(ExitKind::Io, e))?;
    write_report(out, &report)?;
    Ok(report)
}
