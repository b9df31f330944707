use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::CorrelationMatrix;
use crate::error::{Error, Result};
use crate::knobs::{KnobSpace, KnobSpec};
use crate::plan::QueryPlan;

/// Scenarios shipped with the crate, by name.
pub const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    ("synth-small", include_str!("../../scenarios/synth-small.json")),
    ("synth-wide", include_str!("../../scenarios/synth-wide.json")),
];

/// Multiplicative effect `1 + a (theta - b)^2` on normalized knob values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnobEffect {
    pub knob: String,
    pub a: f64,
    pub b: f64,
}

/// Failure rules over normalized knob values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureRule {
    /// Fails when `theta[knob] < base + span * cost_level(query)`, where the
    /// cost level is the query's log total base cost min-max scaled over the
    /// scenario.
    Memory { knob: String, base: f64, span: f64 },
    /// Fails when `theta[knob] > intercept + slope * theta[mem_knob]`.
    Parallelism {
        knob: String,
        mem_knob: String,
        intercept: f64,
        slope: f64,
    },
    /// Fails when `weights . theta > threshold`.
    HalfSpace { weights: Vec<f64>, threshold: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioQuery {
    pub query_id: String,
    pub plan: QueryPlan,
    /// Noise-free node time at the effect optima, aligned with `plan.nodes`.
    pub base_costs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub noise_sigma: f64,
    pub node_types: Vec<String>,
    pub knobs: Vec<KnobSpec>,
    pub effects: Vec<KnobEffect>,
    /// `ground_truth[t][j] == 1` iff knob `j` affects node type `t`.
    pub ground_truth: Vec<Vec<u8>>,
    pub failure_rules: Vec<FailureRule>,
    pub queries: Vec<ScenarioQuery>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED_SCENARIOS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::config("scenario", format!("no bundled scenario `{name}`")))?;
        Self::from_json(text)
    }

    pub fn knob_space(&self) -> Result<KnobSpace> {
        KnobSpace::new(self.knobs.clone())
    }

    pub fn knob_index(&self, name: &str) -> Option<usize> {
        self.knobs.iter().position(|k| k.name == name)
    }

    pub fn type_index(&self, op: &str) -> Option<usize> {
        self.node_types.iter().position(|t| t == op)
    }

    /// The ground truth as a correlation matrix (for tests and reports).
    pub fn ground_truth_matrix(&self) -> CorrelationMatrix {
        CorrelationMatrix {
            node_types: self.node_types.clone(),
            knobs: self.knobs.iter().map(|k| k.name.clone()).collect(),
            matrix: self.ground_truth.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let space = self.knob_space()?;
        let n = space.len();
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be finite and nonnegative"));
        }
        if self.node_types.is_empty() {
            return Err(Error::config("node_types", "empty"));
        }
        if self.ground_truth.len() != self.node_types.len() {
            return Err(Error::config("ground_truth", "one row per node type required"));
        }
        for (t, row) in self.ground_truth.iter().enumerate() {
            if row.len() != n || row.iter().any(|&g| g > 1) {
                return Err(Error::config(
                    format!("ground_truth[{t}]"),
                    format!("expected {n} entries in {{0,1}}"),
                ));
            }
        }
        let knob = |path: String, name: &str| {
            self.knob_index(name)
                .ok_or_else(|| Error::config(path, format!("unknown knob `{name}`")))
        };
        let mut seen = HashSet::new();
        for (i, e) in self.effects.iter().enumerate() {
            knob(format!("effects[{i}].knob"), &e.knob)?;
            if !seen.insert(&e.knob) {
                return Err(Error::config(format!("effects[{i}].knob"), "duplicate effect"));
            }
            if !(e.a > 0.0 && e.a.is_finite()) {
                return Err(Error::config(format!("effects[{i}].a"), "must be positive"));
            }
            if !(0.0..=1.0).contains(&e.b) {
                return Err(Error::config(format!("effects[{i}].b"), "must lie in [0, 1]"));
            }
        }
        for (t, row) in self.ground_truth.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                if g == 1 && !self.effects.iter().any(|e| e.knob == self.knobs[j].name) {
                    return Err(Error::config(
                        format!("ground_truth[{t}][{j}]"),
                        format!("knob `{}` has no effect curve", self.knobs[j].name),
                    ));
                }
            }
        }
        for (i, r) in self.failure_rules.iter().enumerate() {
            match r {
                FailureRule::Memory { knob: k, .. } => {
                    knob(format!("failure_rules[{i}].knob"), k)?;
                }
                FailureRule::Parallelism { knob: k, mem_knob, .. } => {
                    knob(format!("failure_rules[{i}].knob"), k)?;
                    knob(format!("failure_rules[{i}].mem_knob"), mem_knob)?;
                }
                FailureRule::HalfSpace { weights, .. } => {
                    if weights.len() != n {
                        return Err(Error::config(
                            format!("failure_rules[{i}].weights"),
                            format!("expected {n} weights"),
                        ));
                    }
                }
            }
        }
        if self.queries.is_empty() {
            return Err(Error::config("queries", "empty"));
        }
        let mut ids = HashSet::new();
        for (qi, q) in self.queries.iter().enumerate() {
            if !ids.insert(&q.query_id) {
                return Err(Error::config(format!("queries[{qi}].query_id"), "duplicate query id"));
            }
            q.plan
                .validate()
                .map_err(|e| Error::config(format!("queries[{qi}].plan"), e.to_string()))?;
            if q.plan.query_id != q.query_id {
                return Err(Error::config(format!("queries[{qi}].plan.query_id"), "does not match query_id"));
            }
            if q.base_costs.len() != q.plan.len() {
                return Err(Error::config(
                    format!("queries[{qi}].base_costs"),
                    format!("expected {} entries", q.plan.len()),
                ));
            }
            if let Some(k) = q.base_costs.iter().position(|&c| !(c > 0.0 && c.is_finite())) {
                return Err(Error::config(
                    format!("queries[{qi}].base_costs[{k}]"),
                    "base costs must be positive",
                ));
            }
            for (k, node) in q.plan.nodes.iter().enumerate() {
                if self.type_index(&node.op).is_none() {
                    return Err(Error::config(
                        format!("queries[{qi}].plan.nodes[{k}].op"),
                        format!("`{}` is not a declared node type", node.op),
                    ));
                }
            }
        }
        Ok(())
    }
}
