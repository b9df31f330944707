//! Tuning loop: warm start, correlation discovery, surrogate fitting and
//! EIC-driven candidate selection, plus the persistent tuning history.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{self, CorrelationConfig, NodeTiming};
use crate::diffcore::Matrix;
use crate::encoder::CorrelationMatrix;
use crate::engine::{Engine, Status};
use crate::error::{Error, Result};
use crate::knobs::{perturb, Configuration, KnobSpace};
use crate::predictor::{ContextSet, FitReport, Prediction, Surrogate, SurrogateConfig};
use crate::rng;
use crate::warmstart::{self, PsoConfig, Swarm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Warmstart,
    Bo,
    /// Uniform-random baseline runs from the test harness.
    Random,
}

/// One evaluated configuration. `iteration` is the observation's position
/// among the observations of its query; `timestamp` is cumulative engine
/// seconds within the session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub query_id: String,
    pub theta: Vec<f64>,
    pub latency_s: f64,
    pub status: Status,
    pub iteration: usize,
    pub source: Source,
    pub timestamp: f64,
}

impl Observation {
    pub fn configuration(&self) -> Result<Configuration> {
        Configuration::new(self.theta.clone())
    }

    pub fn is_success(&self) -> bool {
        !self.status.is_failure()
    }

    /// `ln(latency)` for successful runs.
    pub fn log_latency(&self) -> Option<f64> {
        self.is_success().then(|| self.latency_s.ln())
    }
}

/// Best successful configuration of one query. `theta` and `latency_s` are
/// null when no evaluation of the query succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestConfig {
    pub query_id: String,
    pub theta: Option<Vec<f64>>,
    pub latency_s: Option<f64>,
    pub evaluations_used: usize,
}

/// Append-only observation log with a per-query index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TuningHistory {
    observations: Vec<Observation>,
    by_query: BTreeMap<String, Vec<usize>>,
}

impl TuningHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_observations(obs: impl IntoIterator<Item = Observation>) -> Self {
        let mut h = Self::new();
        for o in obs {
            h.push(o);
        }
        h
    }

    pub fn push(&mut self, obs: Observation) {
        self.by_query
            .entry(obs.query_id.clone())
            .or_default()
            .push(self.observations.len());
        self.observations.push(obs);
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    pub fn for_query<'a>(&'a self, query: &str) -> impl Iterator<Item = &'a Observation> + 'a {
        self.by_query
            .get(query)
            .into_iter()
            .flatten()
            .map(|&i| &self.observations[i])
    }

    pub fn count(&self, query: &str) -> usize {
        self.by_query.get(query).map_or(0, Vec::len)
    }

    pub fn failures(&self) -> usize {
        self.observations.iter().filter(|o| !o.is_success()).count()
    }

    /// Lowest-latency successful observation of `query`; ties keep the
    /// earliest.
    pub fn best(&self, query: &str) -> Option<&Observation> {
        self.for_query(query)
            .filter(|o| o.is_success())
            .fold(None, |best: Option<&Observation>, o| match best {
                Some(b) if b.latency_s <= o.latency_s => Some(b),
                _ => Some(o),
            })
    }

    pub fn best_config(&self, query: &str) -> BestConfig {
        let best = self.best(query);
        BestConfig {
            query_id: query.to_string(),
            theta: best.map(|o| o.theta.clone()),
            latency_s: best.map(|o| o.latency_s),
            evaluations_used: self.count(query),
        }
    }

    pub fn best_per_query(&self, queries: &[String]) -> Vec<BestConfig> {
        queries.iter().map(|q| self.best_config(q)).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for o in &self.observations {
            serde_json::to_writer(&mut w, o)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Strict reader: any malformed line is an error.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut h = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let o: Observation = serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("history line {}: {e}", i + 1)))?;
            h.push(o);
        }
        Ok(h)
    }

    /// Lenient reader: malformed lines are skipped and counted.
    pub fn read_jsonl_lenient<R: BufRead>(r: R) -> Result<(Self, usize)> {
        let mut h = Self::new();
        let mut skipped = 0;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Observation>(&line) {
                Ok(o) if o.theta.iter().all(|t| (0.0..=1.0).contains(t)) && o.latency_s > 0.0 => h.push(o),
                _ => skipped += 1,
            }
        }
        Ok((h, skipped))
    }
}

/// Stopping rule for the BO phase plus the per-iteration candidate count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningBudget {
    /// BO evaluations, not counting warm start.
    pub max_evaluations: Option<usize>,
    pub max_duration: Option<Duration>,
    pub candidates: usize,
}

impl Default for TuningBudget {
    fn default() -> Self {
        Self {
            max_evaluations: Some(200),
            max_duration: None,
            candidates: 256,
        }
    }
}

impl TuningBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_evaluations.is_none() && self.max_duration.is_none() {
            return Err(Error::Validation("budget needs max_evaluations or max_duration".into()));
        }
        if self.candidates == 0 {
            return Err(Error::Validation("budget needs at least one candidate per iteration".into()));
        }
        Ok(())
    }
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gaussian expected improvement below `f_star` for a minimization target.
pub fn expected_improvement(f_star: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !mu.is_finite() || !f_star.is_finite() {
        return Err(Error::Usage(format!(
            "expected improvement needs finite inputs and sigma > 0 (mu={mu}, sigma={sigma}, f*={f_star})"
        )));
    }
    let g = (f_star - mu) / sigma;
    Ok(sigma * (g * normal_cdf(g) + normal_pdf(g)))
}

/// EIC for a prediction in log-latency units. `f_star` is the best observed
/// log-latency; without one the EI term becomes `exp(-mu)`.
pub fn eic(pred: &Prediction, f_star: Option<f64>) -> Result<f64> {
    let ok = 1.0 - pred.fail_prob;
    let ei = match f_star {
        Some(f) => expected_improvement(f, pred.perf_mean, pred.perf_std)?,
        None => (-pred.perf_mean).exp(),
    };
    Ok(ei * ok)
}

/// Index of the best-scoring candidate: highest score, then lowest failure
/// probability, then lexicographically smallest configuration.
pub fn select_candidate(scores: &[f64], preds: &[Prediction], thetas: &[Configuration]) -> Option<usize> {
    (0..scores.len()).reduce(|best, i| {
        let by_score = scores[i].total_cmp(&scores[best]);
        let by_fail = preds[best].fail_prob.total_cmp(&preds[i].fail_prob);
        let by_theta = thetas[best].partial_cmp(&thetas[i]).unwrap_or(std::cmp::Ordering::Equal);
        if by_score.then(by_fail).then(by_theta).is_gt() {
            i
        } else {
            best
        }
    })
}

/// Candidate pool: uniform draws plus perturbations of the incumbent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSampler {
    pub perturbed_fraction: f64,
    pub radius: f64,
}

impl Default for CandidateSampler {
    fn default() -> Self {
        Self {
            perturbed_fraction: 0.25,
            radius: 0.1,
        }
    }
}

impl CandidateSampler {
    pub fn sample<R: Rng + ?Sized>(&self, space: &KnobSpace, count: usize, incumbent: Option<&Configuration>, rng: &mut R) -> Result<Vec<Configuration>> {
        let local = incumbent.map_or(0, |_| ((count as f64) * self.perturbed_fraction).round() as usize).min(count);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count - local {
            let theta = Configuration::clamped((0..space.len()).map(|_| rng.random::<f64>()).collect());
            out.push(space.snap(&theta)?);
        }
        if let Some(inc) = incumbent {
            for _ in 0..local {
                out.push(space.snap(&perturb(inc, self.radius, rng))?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    pub warm_start_samples: usize,
    pub pso: PsoConfig,
    pub correlation: CorrelationConfig,
    pub surrogate: SurrogateConfig,
    pub initial_epochs: usize,
    pub refit_steps: usize,
    pub sampler: CandidateSampler,
    pub budget: TuningBudget,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            warm_start_samples: 20,
            pso: PsoConfig::default(),
            correlation: CorrelationConfig::default(),
            surrogate: SurrogateConfig::default(),
            initial_epochs: 100,
            refit_steps: 50,
            sampler: CandidateSampler::default(),
            budget: TuningBudget::default(),
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warm_start_samples == 0 {
            return Err(Error::Validation("warm_start_samples must be at least 1".into()));
        }
        self.pso.validate()?;
        self.budget.validate()
    }
}

/// Prediction made for a configuration before it was evaluated, paired with
/// the outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub iteration: usize,
    pub predicted_latency_s: f64,
    pub predicted_log_std: f64,
    pub fail_prob: f64,
    pub actual_latency_s: f64,
    pub status: Status,
}

#[derive(Clone, Debug)]
pub struct TuningOutcome {
    pub best: Vec<BestConfig>,
    pub history: TuningHistory,
    pub predictions: Vec<PredictionRecord>,
    pub correlation: CorrelationMatrix,
    pub model: Surrogate,
    pub initial_fit: FitReport,
}

/// One tuning session over a fixed engine and query set.
pub struct Session<'e, E: Engine + ?Sized> {
    engine: &'e E,
    cfg: TunerConfig,
    seed: u64,
    queries: Vec<String>,
    history: TuningHistory,
    predictions: Vec<PredictionRecord>,
    timings: Vec<NodeTiming>,
    next_call: u64,
    clock: f64,
    bo_evaluations: usize,
    context: Option<(Vec<Vec<f64>>, Vec<Option<f64>>)>,
}

impl<'e, E: Engine + ?Sized> Session<'e, E> {
    pub fn new(engine: &'e E, queries: &[String], cfg: TunerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if queries.is_empty() {
            return Err(Error::Validation("no target queries".into()));
        }
        let known = engine.query_ids();
        if let Some(q) = queries.iter().find(|q| !known.contains(q)) {
            return Err(Error::UnknownQuery(q.clone()));
        }
        Ok(Self {
            engine,
            cfg,
            seed,
            queries: queries.to_vec(),
            history: TuningHistory::new(),
            predictions: Vec::new(),
            timings: Vec::new(),
            next_call: 0,
            clock: 0.0,
            bo_evaluations: 0,
            context: None,
        })
    }

    pub fn history(&self) -> &TuningHistory {
        &self.history
    }

    pub fn engine_calls(&self) -> u64 {
        self.next_call
    }

    fn record(&mut self, query: &str, theta: Configuration, latency: f64, status: Status, source: Source) -> Observation {
        self.clock += latency;
        let obs = Observation {
            query_id: query.to_string(),
            theta: theta.into_inner(),
            latency_s: latency,
            status,
            iteration: self.history.count(query),
            source,
            timestamp: self.clock,
        };
        self.history.push(obs.clone());
        obs
    }

    /// PSO warm start on every target query; keeps per-node timings of the
    /// successful runs for correlation discovery.
    pub fn warm_start(&mut self) -> Result<()> {
        let n = self.engine.knob_space().len();
        for (qi, q) in self.queries.clone().iter().enumerate() {
            let mut swarm = Swarm::new(self.cfg.pso, n, rng::stream(self.seed, "warmstart", qi as u64));
            let samples = warmstart::run(self.engine, q, self.cfg.warm_start_samples, &mut swarm, self.next_call)
                .map_err(|p| p.error)?;
            self.next_call += samples.len() as u64;
            for s in samples {
                self.timings
                    .extend(correlation::timings_from_node_times(q, &s.theta, &s.node_times));
                self.record(q, s.theta, s.latency, s.status, Source::Warmstart);
            }
        }
        Ok(())
    }

    pub fn discover_correlation(&self) -> Result<CorrelationMatrix> {
        let space = self.engine.knob_space();
        let mut types: Vec<String> = Vec::new();
        for q in &self.queries {
            for node in self.engine.plan(q)?.nodes {
                if !types.contains(&node.op) {
                    types.push(node.op);
                }
            }
        }
        types.sort();
        let report = correlation::identify(&self.timings, &types, &space.names(), &self.cfg.correlation, self.seed)?;
        Ok(correlation::build_matrix(&report, self.cfg.correlation.epsilon))
    }

    fn refresh_context(&mut self, model: &Surrogate) -> Result<()> {
        let ctx = model.context(self.history.observations())?;
        self.context = Some((ctx.x.to_rows(), ctx.log_latency));
        Ok(())
    }

    fn context_set(&self) -> Result<ContextSet> {
        let (rows, ys) = self.context.as_ref().ok_or_else(|| Error::Usage("model context not initialized".into()))?;
        ContextSet::new(Matrix::from_rows(rows)?, ys.clone())
    }

    /// One BO step on `query`: score a fresh candidate pool with EIC,
    /// evaluate the winner and append it to the history.
    pub fn bo_iteration(&mut self, query: &str, model: &Surrogate) -> Result<Observation> {
        let space = self.engine.knob_space();
        let step = self.bo_evaluations as u64;
        let mut draw = rng::stream(self.seed, "candidates", step);
        let best = self.history.best(query).cloned();
        let incumbent = best.as_ref().map(Observation::configuration).transpose()?;
        let thetas = self
            .cfg
            .sampler
            .sample(space, self.cfg.budget.candidates, incumbent.as_ref(), &mut draw)?;
        let x = model.encode(query, &thetas)?;
        let noise = model.draw_noise(self.seed, "predict", step);
        let preds = model.predict(&self.context_set()?, &x, &noise)?;
        let f_star = best.as_ref().map(|o| o.latency_s.ln());
        let scores = preds.iter().map(|p| eic(p, f_star)).collect::<Result<Vec<_>>>()?;
        let pick = select_candidate(&scores, &preds, &thetas).ok_or_else(|| Error::Usage("empty candidate pool".into()))?;
        let theta = thetas[pick].clone();
        let result = self.engine.execute(query, &space.denormalize(&theta)?, self.next_call)?;
        self.next_call += 1;
        self.bo_evaluations += 1;
        let obs = self.record(query, theta, result.latency, result.status, Source::Bo);
        self.predictions.push(PredictionRecord {
            query_id: query.to_string(),
            iteration: obs.iteration,
            predicted_latency_s: preds[pick].perf_mean.exp(),
            predicted_log_std: preds[pick].perf_std,
            fail_prob: preds[pick].fail_prob,
            actual_latency_s: result.latency,
            status: result.status,
        });
        if let Some((rows, ys)) = self.context.as_mut() {
            rows.push(x.row(pick).to_vec());
            ys.push(obs.log_latency());
        }
        Ok(obs)
    }

    fn exhausted(&self, started: Instant) -> bool {
        let b = &self.cfg.budget;
        b.max_evaluations.is_some_and(|m| self.bo_evaluations >= m) || b.max_duration.is_some_and(|d| started.elapsed() >= d)
    }

    /// Full loop: warm start, correlation, initial fit, then round-robin BO
    /// passes with a short refit after each pass.
    pub fn run(mut self) -> Result<TuningOutcome> {
        let started = Instant::now();
        self.warm_start()?;
        let corr = self.discover_correlation()?;
        let plans = self
            .queries
            .iter()
            .map(|q| self.engine.plan(q))
            .collect::<Result<Vec<_>>>()?;
        let n = self.engine.knob_space().len();
        let mut model = Surrogate::new(self.cfg.surrogate, &plans, corr.clone(), n, rng::derive_seed(self.seed, "model", 0))?;
        let initial_fit = model.fit(self.history.observations(), self.cfg.initial_epochs, rng::derive_seed(self.seed, "fit", 0))?;
        log::info!(
            "initial fit on {} observations: loss {:?} -> {:?}",
            self.history.len(),
            initial_fit.losses.first(),
            initial_fit.losses.last()
        );
        self.refresh_context(&model)?;
        let mut pass = 0u64;
        'outer: while !self.exhausted(started) {
            for q in self.queries.clone() {
                if self.exhausted(started) {
                    break 'outer;
                }
                let obs = self.bo_iteration(&q, &model)?;
                log::debug!("{q} #{}: {:.4}s status {}", obs.iteration, obs.latency_s, u8::from(obs.status));
            }
            pass += 1;
            model.train_steps(self.history.observations(), self.cfg.refit_steps, rng::derive_seed(self.seed, "refit", pass))?;
            self.refresh_context(&model)?;
        }
        Ok(TuningOutcome {
            best: self.history.best_per_query(&self.queries),
            history: self.history,
            predictions: self.predictions,
            correlation: corr,
            model,
            initial_fit,
        })
    }
}

/// Runs a full session; see [`Session::run`].
pub fn run<E: Engine + ?Sized>(engine: &E, queries: &[String], cfg: TunerConfig, seed: u64) -> Result<TuningOutcome> {
    Session::new(engine, queries, cfg, seed)?.run()
}
