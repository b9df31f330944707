use std::collections::HashMap;

use rand_distr::{Distribution, StandardNormal};

use super::{AnalyzeResult, Engine, ExecutionResult, FailureReason, FailureRule, NodeTime, Scenario, Status};
use crate::error::{Error, Result};
use crate::knobs::{Configuration, KnobSpace, RawValue};
use crate::plan::QueryPlan;
use crate::rng;

struct QueryModel {
    /// Per node: node-type index and knob indices with a ground-truth effect.
    nodes: Vec<(usize, Vec<usize>)>,
    cost_level: f64,
}

/// Simulator driven by a [`Scenario`].
///
/// Node time is `base_cost * prod_j (1 + a_j (theta_j - b_j)^2) * exp(sigma * e)`
/// over the knobs `j` the ground truth assigns to the node's type, with
/// `e ~ N(0, 1)` drawn from a stream keyed by `(seed, query, call_id)`.
pub struct SimulatedEngine {
    scenario: Scenario,
    space: KnobSpace,
    seed: u64,
    index: HashMap<String, usize>,
    models: Vec<QueryModel>,
    /// `(a, b)` per knob; `None` for knobs without an effect curve.
    effects: Vec<Option<(f64, f64)>>,
}

impl SimulatedEngine {
    pub fn new(scenario: Scenario, seed: u64) -> Result<Self> {
        scenario.validate()?;
        let space = scenario.knob_space()?;
        let effects = scenario
            .knobs
            .iter()
            .map(|k| scenario.effects.iter().find(|e| e.knob == k.name).map(|e| (e.a, e.b)))
            .collect();
        let log_cost: Vec<f64> = scenario
            .queries
            .iter()
            .map(|q| q.base_costs.iter().sum::<f64>().ln())
            .collect();
        let (lo, hi) = log_cost
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let models = scenario
            .queries
            .iter()
            .zip(&log_cost)
            .map(|(q, &lc)| QueryModel {
                nodes: q
                    .plan
                    .nodes
                    .iter()
                    .map(|n| {
                        let t = scenario.type_index(&n.op).expect("validated");
                        let knobs = (0..space.len()).filter(|&j| scenario.ground_truth[t][j] == 1).collect();
                        (t, knobs)
                    })
                    .collect(),
                cost_level: if hi > lo { (lc - lo) / (hi - lo) } else { 0.0 },
            })
            .collect();
        let index = scenario
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.query_id.clone(), i))
            .collect();
        Ok(Self {
            scenario,
            space,
            seed,
            index,
            models,
            effects,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn query_index(&self, query: &str) -> Result<usize> {
        self.index
            .get(query)
            .copied()
            .ok_or_else(|| Error::UnknownQuery(query.to_string()))
    }

    /// The first violated failure rule, if any.
    pub fn failure(&self, query: &str, theta: &Configuration) -> Result<Option<FailureReason>> {
        let qi = self.query_index(query)?;
        let th = theta.values();
        let at = |name: &str| th[self.scenario.knob_index(name).expect("validated")];
        for rule in &self.scenario.failure_rules {
            let failed = match rule {
                FailureRule::Memory { knob, base, span } => {
                    at(knob) < base + span * self.models[qi].cost_level
                }
                FailureRule::Parallelism {
                    knob,
                    mem_knob,
                    intercept,
                    slope,
                } => at(knob) > intercept + slope * at(mem_knob),
                FailureRule::HalfSpace { weights, threshold } => {
                    weights.iter().zip(th).map(|(w, x)| w * x).sum::<f64>() > *threshold
                }
            };
            if failed {
                return Ok(Some(match rule {
                    FailureRule::Memory { .. } => FailureReason::Memory,
                    FailureRule::Parallelism { .. } => FailureReason::Parallelism,
                    FailureRule::HalfSpace { .. } => FailureReason::Resource,
                }));
            }
        }
        Ok(None)
    }

    /// Per-node effect multiplier at `theta`, without noise.
    fn multiplier(&self, knobs: &[usize], th: &[f64]) -> f64 {
        knobs
            .iter()
            .map(|&j| match self.effects[j] {
                Some((a, b)) => 1.0 + a * (th[j] - b).powi(2),
                None => 1.0,
            })
            .product()
    }

    /// Noise-free latency of `query` at `theta`, ignoring failure rules.
    pub fn expected_latency(&self, query: &str, theta: &Configuration) -> Result<f64> {
        let qi = self.query_index(query)?;
        let base = &self.scenario.queries[qi].base_costs;
        Ok(self.models[qi]
            .nodes
            .iter()
            .zip(base)
            .map(|((_, knobs), c)| c * self.multiplier(knobs, theta.values()))
            .sum())
    }

    fn run(&self, query: &str, raw: &[RawValue], call_id: u64) -> Result<AnalyzeResult> {
        let qi = self.query_index(query)?;
        let theta = self.space.normalize(raw)?;
        if let Some(reason) = self.failure(query, &theta)? {
            return Ok(AnalyzeResult {
                result: ExecutionResult::failed(reason),
                node_times: Vec::new(),
            });
        }
        let mut noise = rng::stream(self.seed, query, call_id);
        let q = &self.scenario.queries[qi];
        let node_times: Vec<NodeTime> = self.models[qi]
            .nodes
            .iter()
            .zip(&q.base_costs)
            .zip(&q.plan.nodes)
            .map(|(((_, knobs), c), node)| {
                let e: f64 = StandardNormal.sample(&mut noise);
                NodeTime {
                    node_id: node.id,
                    op: node.op.clone(),
                    seconds: c * self.multiplier(knobs, theta.values()) * (self.scenario.noise_sigma * e).exp(),
                }
            })
            .collect();
        Ok(AnalyzeResult {
            result: ExecutionResult {
                latency: node_times.iter().map(|n| n.seconds).sum(),
                status: Status::Success,
                failure_reason: None,
            },
            node_times,
        })
    }
}

impl Engine for SimulatedEngine {
    fn knob_space(&self) -> &KnobSpace {
        &self.space
    }

    fn query_ids(&self) -> Vec<String> {
        self.scenario.queries.iter().map(|q| q.query_id.clone()).collect()
    }

    fn plan(&self, query: &str) -> Result<QueryPlan> {
        Ok(self.scenario.queries[self.query_index(query)?].plan.clone())
    }

    fn execute(&self, query: &str, raw: &[RawValue], call_id: u64) -> Result<ExecutionResult> {
        self.run(query, raw, call_id).map(|r| r.result)
    }

    fn execute_analyze(&self, query: &str, raw: &[RawValue], call_id: u64) -> Result<AnalyzeResult> {
        self.run(query, raw, call_id)
    }
}
