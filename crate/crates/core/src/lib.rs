//! Query-level knob tuning for analytical query engines.
//!
//! The pipeline: a PSO warm start collects observations per query
//! ([`warmstart`]), node-level timings from those runs identify which knobs
//! influence which plan operators ([`correlation`]), a knob/plan attention
//! encoder ([`encoder`]) feeds a dual-task neural process ([`predictor`]) that
//! predicts latency and failure probability, and [`tuner`] drives Bayesian
//! optimization with a failure-aware expected improvement. [`engine`] holds
//! the engine interface and a deterministic simulator.

pub mod correlation;
pub mod diffcore;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod harness;
pub mod knobs;
pub mod nn;
pub mod plan;
pub mod predictor;
pub mod rng;
pub mod tuner;
pub mod warmstart;

pub use error::{Error, Result};
