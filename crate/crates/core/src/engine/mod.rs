//! Engine interface and a deterministic simulated analytical engine.

mod scenario;
mod simulated;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::knobs::{KnobSpace, RawValue};
use crate::plan::QueryPlan;

pub use scenario::{FailureRule, KnobEffect, Scenario, ScenarioQuery, BUNDLED_SCENARIOS};
pub use simulated::SimulatedEngine;

/// Latency reported for failed executions, in seconds.
pub const FAILURE_LATENCY: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Status {
    Success,
    Failure,
}

impl Status {
    pub fn is_failure(self) -> bool {
        self == Status::Failure
    }
}

impl From<Status> for u8 {
    fn from(s: Status) -> u8 {
        match s {
            Status::Success => 0,
            Status::Failure => 1,
        }
    }
}

impl TryFrom<u8> for Status {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Status::Success),
            1 => Ok(Status::Failure),
            other => Err(format!("status must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Memory,
    Parallelism,
    Resource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub latency: f64,
    pub status: Status,
    pub failure_reason: Option<FailureReason>,
}

impl ExecutionResult {
    pub fn failed(reason: FailureReason) -> Self {
        Self {
            latency: FAILURE_LATENCY,
            status: Status::Failure,
            failure_reason: Some(reason),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTime {
    pub node_id: usize,
    pub op: String,
    pub seconds: f64,
}

/// Execution with per-node timings. Failed runs carry no timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResult {
    pub result: ExecutionResult,
    pub node_times: Vec<NodeTime>,
}

/// An execution environment. `call_id` selects the noise stream so that
/// concurrent or replayed calls stay reproducible.
pub trait Engine: Sync {
    fn knob_space(&self) -> &KnobSpace;

    fn query_ids(&self) -> Vec<String>;

    /// The optimizer's plan for `query`; never executes it.
    fn plan(&self, query: &str) -> Result<QueryPlan>;

    fn execute(&self, query: &str, raw: &[RawValue], call_id: u64) -> Result<ExecutionResult>;

    fn execute_analyze(&self, query: &str, raw: &[RawValue], call_id: u64) -> Result<AnalyzeResult>;
}
