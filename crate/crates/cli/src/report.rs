//! Workload metrics over a tuning history.

use std::io::{BufRead, Write};

use aqetuner_core::tuner::{PredictionRecord, TuningHistory};
use serde::{Deserialize, Serialize};

/// Nearest-rank percentile: the smallest value with at least `p` of the
/// sample at or below it. `None` for an empty sample.
pub fn nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// `max(actual / predicted, predicted / actual)`.
pub fn q_error(predicted: f64, actual: f64) -> f64 {
    (actual / predicted).max(predicted / actual)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: String,
    /// Best successful latency; `None` when every run failed.
    pub best_latency_s: Option<f64>,
    pub evaluations: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QErrorRow {
    pub query_id: String,
    pub iteration: usize,
    pub predicted_latency_s: f64,
    pub actual_latency_s: f64,
    pub q_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QErrorSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub p95: Option<f64>,
    pub max: Option<f64>,
}

impl QErrorSummary {
    pub fn of(values: &[f64]) -> Self {
        Self {
            count: values.len(),
            mean: (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64),
            median: nearest_rank(values, 0.5),
            p95: nearest_rank(values, 0.95),
            max: values.iter().copied().reduce(f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub queries: Vec<QueryReport>,
    /// Mean of the per-query best latencies over queries with a success.
    pub avg: Option<f64>,
    /// Nearest-rank P95 of the same latencies.
    pub p95: Option<f64>,
    pub failures: usize,
    pub evaluations: usize,
    /// History lines that could not be parsed.
    pub skipped: usize,
    /// Prediction lines that could not be parsed.
    pub skipped_predictions: usize,
    pub q_error: QErrorSummary,
    pub q_errors: Vec<QErrorRow>,
}

impl Report {
    pub fn build(history: &TuningHistory, predictions: &[PredictionRecord], skipped: usize, skipped_predictions: usize) -> Self {
        let mut ids: Vec<&str> = Vec::new();
        for id in history.query_ids() {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let queries: Vec<QueryReport> = ids
            .iter()
            .map(|&q| QueryReport {
                query_id: q.to_string(),
                best_latency_s: history.best(q).map(|o| o.latency_s),
                evaluations: history.count(q),
                failures: history.for_query(q).filter(|o| !o.is_success()).count(),
            })
            .collect();
        let bests: Vec<f64> = queries.iter().filter_map(|q| q.best_latency_s).collect();
        let q_errors: Vec<QErrorRow> = predictions
            .iter()
            .filter(|p| !p.status.is_failure() && p.actual_latency_s > 0.0 && p.predicted_latency_s > 0.0)
            .map(|p| QErrorRow {
                query_id: p.query_id.clone(),
                iteration: p.iteration,
                predicted_latency_s: p.predicted_latency_s,
                actual_latency_s: p.actual_latency_s,
                q_error: q_error(p.predicted_latency_s, p.actual_latency_s),
            })
            .collect();
        let qe: Vec<f64> = q_errors.iter().map(|r| r.q_error).collect();
        Self {
            avg: (!bests.is_empty()).then(|| bests.iter().sum::<f64>() / bests.len() as f64),
            p95: nearest_rank(&bests, 0.95),
            failures: history.failures(),
            evaluations: history.len(),
            skipped,
            skipped_predictions,
            q_error: QErrorSummary::of(&qe),
            q_errors,
            queries,
        }
    }

    /// Per-query rows: `query_id,best_latency_s,evaluations,failures`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for q in &self.queries {
            out.serialize(q)?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per logged prediction with a successful outcome.
    pub fn write_q_error_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.q_errors {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads prediction records, skipping lines that do not parse.
pub fn read_predictions_lenient<R: BufRead>(r: R) -> std::io::Result<(Vec<PredictionRecord>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PredictionRecord>(&line) {
            Ok(p) => out.push(p),
            Err(e) => {
                log::warn!("skipping prediction line: {e}");
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
