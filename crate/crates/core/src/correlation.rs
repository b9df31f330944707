//! Knob/node-type correlation discovery from per-node timings.
//!
//! For each node type a ridge regression maps configurations to node time;
//! permutation-sampled Shapley values of that regression measure how much
//! each knob moves the prediction. Knobs whose mean absolute contribution
//! exceeds `epsilon` are marked correlated with the node type.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::CorrelationMatrix;
use crate::engine::{Engine, NodeTime};
use crate::error::{Error, Result};
use crate::knobs::Configuration;
use crate::rng;

/// Floor applied before taking logs of node times.
const MIN_SECONDS: f64 = 1e-12;

/// One `(node type, configuration, node time)` triplet, tagged with the node
/// it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTiming {
    pub node_type: String,
    pub query_id: String,
    pub node_id: usize,
    pub theta: Vec<f64>,
    pub seconds: f64,
}

pub fn timings_from_node_times(query: &str, theta: &Configuration, times: &[NodeTime]) -> Vec<NodeTiming> {
    times
        .iter()
        .map(|t| NodeTiming {
            node_type: t.op.clone(),
            query_id: query.to_string(),
            node_id: t.node_id,
            theta: theta.values().to_vec(),
            seconds: t.seconds.max(0.0),
        })
        .collect()
}

/// Timings gathered before an engine error stopped collection.
#[derive(Debug)]
pub struct PartialTimings {
    pub timings: Vec<NodeTiming>,
    pub error: Error,
}

impl std::fmt::Display for PartialTimings {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "timing collection stopped after {} triplets: {}", self.timings.len(), self.error)
    }
}

impl std::error::Error for PartialTimings {}

/// Runs every sample on every query with per-node timing. Samples are
/// snapped to the knob domains first; failed runs yield no triplets. Call ids start at `first_call` and advance by one per run.
pub fn collect_timings<E: Engine + ?Sized>(
    engine: &E,
    queries: &[String],
    samples: &[Configuration],
    first_call: u64,
) -> std::result::Result<Vec<NodeTiming>, PartialTimings> {
    let space = engine.knob_space();
    let mut out = Vec::new();
    let mut call = first_call;
    for q in queries {
        for s in samples {
            let res = space.snap(s).and_then(|theta| {
                let r = engine.execute_analyze(q, &space.denormalize(&theta)?, call)?;
                Ok((theta, r))
            });
            call += 1;
            match res {
                Ok((theta, r)) => out.extend(timings_from_node_times(q, &theta, &r.node_times)),
                Err(error) => return Err(PartialTimings { timings: out, error }),
            }
        }
    }
    Ok(out)
}

pub fn group_by_type(timings: &[NodeTiming]) -> BTreeMap<&str, Vec<&NodeTiming>> {
    let mut groups: BTreeMap<&str, Vec<&NodeTiming>> = BTreeMap::new();
    for t in timings {
        groups.entry(t.node_type.as_str()).or_default().push(t);
    }
    groups
}

/// Per-knob polynomial features `theta_j, theta_j^2, ..., theta_j^degree`
/// (no cross terms, so fitted models stay additive over knobs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Basis {
    pub degree: usize,
}

impl Basis {
    pub const LINEAR: Basis = Basis { degree: 1 };

    fn expand(self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width(x.len()));
        for d in 1..=self.degree {
            out.extend(x.iter().map(|v| v.powi(d as i32)));
        }
        out
    }

    fn width(self, n: usize) -> usize {
        n * self.degree
    }
}

/// Regression target derived from node times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Seconds,
    /// `ln(seconds)` with a separate offset per plan node, so nodes of one
    /// type but different base cost share a scale.
    CenteredLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationConfig {
    pub lambda: f64,
    pub basis: Basis,
    pub target: Target,
    pub shapley_budget: usize,
    pub background: usize,
    pub eval_points: usize,
    /// Importance threshold, in target units. With the centered-log target
    /// 0.01 is roughly a 1% change in node time.
    pub epsilon: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            basis: Basis { degree: 2 },
            target: Target::CenteredLog,
            shapley_budget: 2000,
            background: 32,
            eval_points: 16,
            epsilon: 0.01,
        }
    }
}

/// Ridge regressor over a fixed basis; the intercept is not penalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeModel {
    pub basis: Basis,
    pub knobs: usize,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl NodeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .basis
                .expand(x)
                .iter()
                .zip(&self.weights)
                .map(|(a, w)| a * w)
                .sum::<f64>()
    }
}

/// Fits `ys ~ basis(xs)` with ridge penalty `lambda`. Needs at least `2n`
/// rows.
pub fn fit_ridge(xs: &[Vec<f64>], ys: &[f64], basis: Basis, lambda: f64) -> Result<NodeModel> {
    fit_ridge_grouped(xs, ys, &vec![0; xs.len()], basis, lambda)
}

/// Like [`fit_ridge`], with a free offset per group: features and targets
/// are centered within each group before solving.
pub fn fit_ridge_grouped(xs: &[Vec<f64>], ys: &[f64], groups: &[usize], basis: Basis, lambda: f64) -> Result<NodeModel> {
    let n = xs.first().map_or(0, Vec::len);
    if xs.len() != ys.len() || xs.len() != groups.len() {
        return Err(Error::dim(
            "fit_ridge",
            format!("{} rows vs {} targets vs {} groups", xs.len(), ys.len(), groups.len()),
        ));
    }
    if n == 0 || xs.len() < 2 * n {
        return Err(Error::InsufficientData(format!("{} samples for {n} knobs, need {}", xs.len(), 2 * n)));
    }
    let p = basis.width(n);
    let rows: Vec<Vec<f64>> = xs.iter().map(|x| basis.expand(x)).collect();
    let mut sums: BTreeMap<usize, (Vec<f64>, f64, usize)> = BTreeMap::new();
    for ((r, y), g) in rows.iter().zip(ys).zip(groups) {
        let e = sums.entry(*g).or_insert_with(|| (vec![0.0; p], 0.0, 0));
        e.0.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        e.1 += y;
        e.2 += 1;
    }
    let means: BTreeMap<usize, (Vec<f64>, f64)> = sums
        .into_iter()
        .map(|(g, (sx, sy, c))| (g, (sx.iter().map(|v| v / c as f64).collect(), sy / c as f64)))
        .collect();
    let a = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j] - means[&groups[i]].0[j]);
    let b = DVector::from_iterator(ys.len(), ys.iter().zip(groups).map(|(y, g)| y - means[g].1));
    let mut gram = a.transpose() * &a;
    for j in 0..p {
        gram[(j, j)] += lambda;
    }
    let rhs = a.transpose() * b;
    let w = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Numeric(format!("ridge solve: {e}")))?,
    };
    let weights: Vec<f64> = w.iter().copied().collect();
    let m = rows.len() as f64;
    let mean_y = ys.iter().sum::<f64>() / m;
    let intercept = mean_y
        - (0..p)
            .map(|j| weights[j] * rows.iter().map(|r| r[j]).sum::<f64>() / m)
            .sum::<f64>();
    Ok(NodeModel {
        basis,
        knobs: n,
        weights,
        intercept,
    })
}

/// Triplets of one node type sorted into a canonical order, with regression
/// targets.
fn prepare(triplets: &[&NodeTiming], target: Target) -> (Vec<Vec<f64>>, Vec<f64>, Vec<usize>) {
    let mut sorted: Vec<&NodeTiming> = triplets.to_vec();
    sorted.sort_by(|a, b| {
        (a.query_id.as_str(), a.node_id)
            .cmp(&(b.query_id.as_str(), b.node_id))
            .then_with(|| a.theta.partial_cmp(&b.theta).unwrap_or(std::cmp::Ordering::Equal))
            .then_with(|| a.seconds.total_cmp(&b.seconds))
    });
    let ys = match target {
        Target::Seconds => sorted.iter().map(|t| t.seconds).collect(),
        Target::CenteredLog => {
            let logs: Vec<f64> = sorted.iter().map(|t| t.seconds.max(MIN_SECONDS).ln()).collect();
            let mut sums: BTreeMap<(&str, usize), (f64, usize)> = BTreeMap::new();
            for (t, l) in sorted.iter().zip(&logs) {
                let e = sums.entry((t.query_id.as_str(), t.node_id)).or_default();
                e.0 += l;
                e.1 += 1;
            }
            sorted
                .iter()
                .zip(&logs)
                .map(|(t, l)| {
                    let (s, c) = sums[&(t.query_id.as_str(), t.node_id)];
                    l - s / c as f64
                })
                .collect()
        }
    };
    let groups = match target {
        Target::Seconds => vec![0; sorted.len()],
        Target::CenteredLog => {
            let mut ids: BTreeMap<(&str, usize), usize> = BTreeMap::new();
            sorted
                .iter()
                .map(|t| {
                    let next = ids.len();
                    *ids.entry((t.query_id.as_str(), t.node_id)).or_insert(next)
                })
                .collect()
        }
    };
    (sorted.iter().map(|t| t.theta.clone()).collect(), ys, groups)
}

/// Regression of node time on configuration for the triplets of one node
/// type.
pub fn fit_node_model(triplets: &[&NodeTiming], cfg: &CorrelationConfig) -> Result<NodeModel> {
    let (xs, ys, groups) = prepare(triplets, cfg.target);
    fit_ridge_grouped(&xs, &ys, &groups, cfg.basis, cfg.lambda)
}

/// Interventional value of coalition `mask`: the model averaged over the
/// background with coordinates in `mask` taken from `point`.
fn coalition_value<F: Fn(&[f64]) -> f64>(model: &F, point: &[f64], background: &[Vec<f64>], mask: &[bool], scratch: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for b in background {
        for j in 0..point.len() {
            scratch[j] = if mask[j] { point[j] } else { b[j] };
        }
        total += model(scratch);
    }
    total / background.len() as f64
}

/// Shapley values of `point` estimated from `budget` random feature orders.
/// Missing features are marginalized against `background`.
pub fn shapley_values<F, R>(model: &F, point: &[f64], background: &[Vec<f64>], budget: usize, rng: &mut R) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let n = point.len();
    if budget == 0 {
        return Err(Error::Usage("shapley budget must be at least one permutation".into()));
    }
    if background.is_empty() {
        return Err(Error::Usage("shapley needs a nonempty background".into()));
    }
    let mut phi = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut mask = vec![false; n];
    let mut scratch = vec![0.0; n];
    for _ in 0..budget {
        order.shuffle(rng);
        mask.iter_mut().for_each(|m| *m = false);
        let mut prev = coalition_value(model, point, background, &mask, &mut scratch);
        for &j in &order {
            mask[j] = true;
            let cur = coalition_value(model, point, background, &mask, &mut scratch);
            phi[j] += cur - prev;
            prev = cur;
        }
    }
    phi.iter_mut().for_each(|p| *p /= budget as f64);
    Ok(phi)
}

/// Mean absolute Shapley value per feature over `points`.
pub fn shapley_importance<F, R>(model: &F, background: &[Vec<f64>], points: &[Vec<f64>], budget: usize, rng: &mut R) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let n = points.first().map_or(0, Vec::len);
    let mut imp = vec![0.0; n];
    for p in points {
        for (acc, v) in imp.iter_mut().zip(shapley_values(model, p, background, budget, rng)?) {
            *acc += v.abs();
        }
    }
    if !points.is_empty() {
        imp.iter_mut().for_each(|v| *v /= points.len() as f64);
    }
    Ok(imp)
}

/// Per node type and knob mean |Shapley value|. Types flagged
/// `insufficient` had too little data for a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub node_types: Vec<String>,
    pub knobs: Vec<String>,
    pub importance: Vec<Vec<f64>>,
    pub insufficient: Vec<bool>,
}

/// Correlation matrix with `M[t][j] = 1` iff importance exceeds `epsilon`.
/// Node types without enough data are treated as correlated with every knob.
pub fn build_matrix(report: &ImportanceReport, epsilon: f64) -> CorrelationMatrix {
    let matrix = report
        .importance
        .iter()
        .zip(&report.insufficient)
        .map(|(row, &short)| row.iter().map(|&v| u8::from(short || v > epsilon)).collect())
        .collect();
    CorrelationMatrix {
        node_types: report.node_types.clone(),
        knobs: report.knobs.clone(),
        matrix,
    }
}

fn distinct_points(xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pts = xs.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    pts
}

/// Fits one model per node type and scores every knob. Results do not
/// depend on the order of `timings`.
pub fn identify(timings: &[NodeTiming], node_types: &[String], knobs: &[String], cfg: &CorrelationConfig, seed: u64) -> Result<ImportanceReport> {
    let groups = group_by_type(timings);
    let mut importance = Vec::with_capacity(node_types.len());
    let mut insufficient = Vec::with_capacity(node_types.len());
    for (ti, nt) in node_types.iter().enumerate() {
        let trip = groups.get(nt.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let model = match fit_node_model(trip, cfg) {
            Ok(m) => m,
            Err(Error::InsufficientData(msg)) => {
                log::warn!("node type {nt}: {msg}; marking all knobs correlated");
                importance.push(vec![0.0; knobs.len()]);
                insufficient.push(true);
                continue;
            }
            Err(e) => return Err(e),
        };
        if model.knobs != knobs.len() {
            return Err(Error::dim("identify", format!("timings have {} knobs, expected {}", model.knobs, knobs.len())));
        }
        let pts = distinct_points(&trip.iter().map(|t| t.theta.clone()).collect::<Vec<_>>());
        let mut pick = rng::stream(seed, "shapley", ti as u64);
        let background: Vec<Vec<f64>> = pts.choose_multiple(&mut pick, cfg.background.min(pts.len())).cloned().collect();
        let evals: Vec<Vec<f64>> = pts.choose_multiple(&mut pick, cfg.eval_points.min(pts.len())).cloned().collect();
        let f = |x: &[f64]| model.predict(x);
        importance.push(shapley_importance(&f, &background, &evals, cfg.shapley_budget, &mut pick)?);
        insufficient.push(false);
    }
    Ok(ImportanceReport {
        node_types: node_types.to_vec(),
        knobs: knobs.to_vec(),
        importance,
        insufficient,
    })
}
