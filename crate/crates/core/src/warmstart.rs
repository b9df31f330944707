//! Particle-swarm warm start.
//!
//! The swarm advances in synchronous rounds: every particle is evaluated,
//! then bests and velocities are updated together. A particle whose
//! evaluation fails is redrawn uniformly with a fresh velocity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, NodeTime, Status};
use crate::error::{Error, Result};
use crate::knobs::Configuration;

/// Half-width of the initial velocity range.
pub const INITIAL_VELOCITY: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub particles: usize,
    /// Inertia.
    pub mu: f64,
    /// Attraction to the particle's own best.
    pub c1: f64,
    /// Attraction to the swarm's best.
    pub c2: f64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            particles: 3,
            mu: 0.5,
            c1: 2.0,
            c2: 2.0,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Validation("pso needs at least one particle".into()));
        }
        if ![self.mu, self.c1, self.c2].iter().all(|c| c.is_finite()) {
            return Err(Error::Validation("pso coefficients must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub position: Vec<f64>,
    pub latency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub local_best: Option<Best>,
}

/// One evaluated particle position.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub latency: f64,
    pub status: Status,
}

#[derive(Clone, Debug)]
pub struct Swarm {
    pub particles: Vec<Particle>,
    pub global_best: Option<Best>,
    pub cfg: PsoConfig,
    rng: ChaCha8Rng,
}

fn uniform<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

fn fresh_particle<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Particle {
    let position = uniform(n, 0.0, 1.0, rng);
    let velocity = uniform(n, -INITIAL_VELOCITY, INITIAL_VELOCITY, rng);
    Particle {
        position,
        velocity,
        local_best: None,
    }
}

/// `mu*v + c1*r1*(lb - s) + c2*r2*(gb - s)` for one coordinate; an unset
/// best contributes nothing.
pub fn velocity_component(cfg: &PsoConfig, v: f64, s: f64, lb: Option<f64>, gb: Option<f64>, r1: f64, r2: f64) -> f64 {
    let own = lb.map_or(0.0, |b| cfg.c1 * r1 * (b - s));
    let social = gb.map_or(0.0, |b| cfg.c2 * r2 * (b - s));
    cfg.mu * v + own + social
}

/// [`velocity_component`] over all coordinates with shared `r1, r2`.
/// [`Swarm::step`] instead draws `r1, r2` afresh for every coordinate.
pub fn velocity_update(cfg: &PsoConfig, v: &[f64], s: &[f64], lb: Option<&[f64]>, gb: Option<&[f64]>, r1: f64, r2: f64) -> Vec<f64> {
    (0..v.len())
        .map(|j| velocity_component(cfg, v[j], s[j], lb.map(|b| b[j]), gb.map(|b| b[j]), r1, r2))
        .collect()
}

impl Swarm {
    /// `cfg.particles` particles with uniform positions in `[0,1]^n` and
    /// velocities in `[-0.1, 0.1]^n`.
    pub fn new(cfg: PsoConfig, n: usize, mut rng: ChaCha8Rng) -> Self {
        let particles = (0..cfg.particles.max(1)).map(|_| fresh_particle(n, &mut rng)).collect();
        Self {
            particles,
            global_best: None,
            cfg,
            rng,
        }
    }

    pub fn positions(&self) -> Vec<Configuration> {
        self.particles
            .iter()
            .map(|p| Configuration::clamped(p.position.clone()))
            .collect()
    }

    /// Applies one round of evaluations (one per particle, in order) and
    /// moves the swarm.
    pub fn step(&mut self, evals: &[Evaluation]) -> Result<()> {
        if evals.len() != self.particles.len() {
            return Err(Error::Usage(format!(
                "swarm step needs {} evaluations, got {}",
                self.particles.len(),
                evals.len()
            )));
        }
        for (p, e) in self.particles.iter_mut().zip(evals) {
            if e.status.is_failure() {
                continue;
            }
            if p.local_best.as_ref().is_none_or(|b| e.latency < b.latency) {
                p.local_best = Some(Best {
                    position: p.position.clone(),
                    latency: e.latency,
                });
            }
            if self.global_best.as_ref().is_none_or(|b| e.latency < b.latency) {
                self.global_best = Some(Best {
                    position: p.position.clone(),
                    latency: e.latency,
                });
            }
        }
        let n = self.particles.first().map_or(0, |p| p.position.len());
        let gb = self.global_best.as_ref().map(|b| b.position.clone());
        for (p, e) in self.particles.iter_mut().zip(evals) {
            if e.status.is_failure() {
                let local_best = p.local_best.take();
                *p = fresh_particle(n, &mut self.rng);
                p.local_best = local_best;
                continue;
            }
            let lb = p.local_best.as_ref().map(|b| b.position.as_slice());
            p.velocity = (0..n)
                .map(|j| {
                    let r1: f64 = self.rng.random();
                    let r2: f64 = self.rng.random();
                    velocity_component(
                        &self.cfg,
                        p.velocity[j],
                        p.position[j],
                        lb.map(|b| b[j]),
                        gb.as_deref().map(|b| b[j]),
                        r1,
                        r2,
                    )
                })
                .collect();
            for (s, v) in p.position.iter_mut().zip(&p.velocity) {
                *s = (*s + v).clamp(0.0, 1.0);
            }
        }
        Ok(())
    }
}

/// One warm-start evaluation. `theta` is the configuration actually
/// executed (the particle position snapped to the knob domains).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub theta: Configuration,
    pub latency: f64,
    pub status: Status,
    pub node_times: Vec<NodeTime>,
}

/// Samples gathered before an engine error stopped the run.
#[derive(Debug)]
pub struct PartialRun {
    pub samples: Vec<Sample>,
    pub error: Error,
}

impl std::fmt::Display for PartialRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "warm start stopped after {} samples: {}", self.samples.len(), self.error)
    }
}

impl std::error::Error for PartialRun {}

/// Runs the swarm on `query` until `m` evaluations are recorded. The last
/// round evaluates only as many particles as are still needed, so exactly
/// `m` samples come back. Engine call ids start at `first_call`.
pub fn run<E: Engine + ?Sized>(engine: &E, query: &str, m: usize, swarm: &mut Swarm, first_call: u64) -> std::result::Result<Vec<Sample>, PartialRun> {
    let mut samples: Vec<Sample> = Vec::with_capacity(m);
    let space = engine.knob_space();
    while samples.len() < m {
        let positions = swarm.positions();
        let take = positions.len().min(m - samples.len());
        let mut evals = Vec::with_capacity(take);
        for pos in positions.iter().take(take) {
            let call = first_call + samples.len() as u64;
            let outcome = space
                .snap(pos)
                .and_then(|theta| Ok((space.denormalize(&theta)?, theta)))
                .and_then(|(raw, theta)| Ok((engine.execute_analyze(query, &raw, call)?, theta)));
            let (res, theta) = match outcome {
                Ok(v) => v,
                Err(error) => return Err(PartialRun { samples, error }),
            };
            evals.push(Evaluation {
                latency: res.result.latency,
                status: res.result.status,
            });
            samples.push(Sample {
                theta,
                latency: res.result.latency,
                status: res.result.status,
                node_times: res.node_times,
            });
        }
        if take == positions.len() {
            swarm.step(&evals).map_err(|error| PartialRun {
                samples: samples.clone(),
                error,
            })?;
        }
    }
    Ok(samples)
}
