//! Reference oracles and baselines used by the test suites: finite-difference
//! gradient checks, a standard-normal CDF and quantile, an exact Shapley
//! enumerator, stratified Monte Carlo expected improvement, and random /
//! Latin-hypercube samplers.
//!
//! None of this is used by the production pipeline, and nothing here calls
//! into the production implementations it is meant to check.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, ParamId, ParamStore};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::knobs::Configuration;
use crate::rng;
use crate::tuner::{Observation, Source};

/// One oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleResult {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value.is_finite() && value <= tolerance,
        }
    }
}

/// Denominator floor for relative errors, so that two vanishing gradients
/// compare as equal.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)` over whole vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(REL_ERR_FLOOR);
    diff / scale
}

/// Central-difference check of `f` with respect to each input matrix.
pub fn grad_check_inputs<F>(mut f: F, inputs: &[Matrix], analytic: &[Matrix], step: f64, tol: f64) -> Vec<OracleResult>
where
    F: FnMut(&[Matrix]) -> f64,
{
    let mut xs = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.data().len());
        for k in 0..xs[i].data().len() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + step;
            let hi = f(&xs);
            xs[i].data_mut()[k] = orig - step;
            let lo = f(&xs);
            xs[i].data_mut()[k] = orig;
            numeric.push((hi - lo) / (2.0 * step));
        }
        out.push(OracleResult::new(format!("input {i}"), relative_error(a.data(), &numeric), tol));
    }
    out
}

/// Central-difference check of `f` with respect to parameters in `store`.
///
/// `analytic` pairs each checked parameter with its reverse-mode gradient.
/// At most `max_entries` coordinates per parameter are perturbed, chosen
/// with a generator seeded by `seed`. `store` is restored on return.
pub fn grad_check<F>(
    mut f: F,
    store: &mut ParamStore,
    analytic: &[(ParamId, Matrix)],
    step: f64,
    tol: f64,
    max_entries: usize,
    seed: u64,
) -> Vec<OracleResult>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut pick = rng::stream(seed, "grad_check", 0);
    analytic
        .iter()
        .map(|(id, grad)| {
            let len = grad.data().len();
            let mut idx: Vec<usize> = (0..len).collect();
            if len > max_entries {
                idx.shuffle(&mut pick);
                idx.truncate(max_entries);
            }
            let mut a = Vec::with_capacity(idx.len());
            let mut n = Vec::with_capacity(idx.len());
            for &k in &idx {
                let orig = store.value(*id).data()[k];
                store.value_mut(*id).data_mut()[k] = orig + step;
                let hi = f(store);
                store.value_mut(*id).data_mut()[k] = orig - step;
                let lo = f(store);
                store.value_mut(*id).data_mut()[k] = orig;
                a.push(grad.data()[k]);
                n.push((hi - lo) / (2.0 * step));
            }
            OracleResult::new(store.name(*id).to_string(), relative_error(&a, &n), tol)
        })
        .collect()
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard-normal CDF by the Abramowitz-Stegun polynomial 26.2.17
/// (absolute error below 7.5e-8).
pub fn normal_cdf(x: f64) -> f64 {
    const P: f64 = 0.231_641_9;
    const B: [f64; 5] = [0.319_381_530, -0.356_563_782, 1.781_477_937, -1.821_255_978, 1.330_274_429];
    let z = x.abs();
    let t = 1.0 / (1.0 + P * z);
    let poly = t * (B[0] + t * (B[1] + t * (B[2] + t * (B[3] + t * B[4]))));
    let upper = normal_pdf(z) * poly;
    if x >= 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

/// Standard-normal quantile by Acklam's rational approximation (relative
/// error below 1.2e-9 on (0, 1)).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.024_25;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Monte Carlo estimate of `E[max(0, f_star - Y)]` for `Y ~ N(mu, sigma^2)`
/// using `samples` equal-probability strata with one uniform draw each.
pub fn expected_improvement_mc<R: Rng + ?Sized>(f_star: f64, mu: f64, sigma: f64, samples: usize, rng: &mut R) -> f64 {
    let n = samples as f64;
    let total: f64 = (0..samples)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / n;
            let y = mu + sigma * normal_quantile(u);
            (f_star - y).max(0.0)
        })
        .sum();
    total / n
}

/// Largest feature count accepted by [`exact_shapley`].
pub const EXACT_SHAPLEY_MAX: usize = 12;

/// Exact interventional Shapley values of `model` at `point` by enumerating
/// all `2^n` coalitions; absent features take their values from each
/// background row and the results are averaged over the background.
pub fn exact_shapley<F>(model: F, point: &[f64], background: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let n = point.len();
    if n > EXACT_SHAPLEY_MAX {
        return Err(Error::Usage(format!("exact Shapley limited to {EXACT_SHAPLEY_MAX} features, got {n}")));
    }
    if background.is_empty() {
        return Err(Error::Usage("empty background set".into()));
    }
    let mut value = vec![0.0; 1 << n];
    let mut z = vec![0.0; n];
    for (mask, v) in value.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in background {
            for j in 0..n {
                z[j] = if mask >> j & 1 == 1 { point[j] } else { b[j] };
            }
            acc += model(&z);
        }
        *v = acc / background.len() as f64;
    }
    // weight[s] = s! (n - s - 1)! / n!
    let fact = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    let weight: Vec<f64> = (0..n).map(|s| fact(s) * fact(n - s - 1) / fact(n)).collect();
    let mut phi = vec![0.0; n];
    for mask in 0..(1usize << n) {
        let size = mask.count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if mask >> j & 1 == 0 {
                *p += weight[size] * (value[mask | 1 << j] - value[mask]);
            }
        }
    }
    Ok(phi)
}

/// `count` points of a Latin hypercube in `[0, 1]^n`.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; n]; count];
    for j in 0..n {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        for (p, s) in points.iter_mut().zip(strata) {
            p[j] = (s as f64 + rng.random::<f64>()) / count as f64;
        }
    }
    points
}

/// Uniform random search: `budget` i.i.d. configurations evaluated on
/// `query`, recorded with the tuner's observation schema. Engine call ids
/// are `first_call..first_call + budget`.
pub fn random_baseline<E: Engine + ?Sized>(engine: &E, query: &str, budget: usize, seed: u64, first_call: u64) -> Result<Vec<Observation>> {
    let space = engine.knob_space();
    let mut draw = rng::stream(seed, "random_baseline", 0);
    let mut clock = 0.0;
    (0..budget)
        .map(|i| {
            let theta = Configuration::clamped((0..space.len()).map(|_| draw.random::<f64>()).collect());
            let theta = space.snap(&theta)?;
            let raw = space.denormalize(&theta)?;
            let r = engine.execute(query, &raw, first_call + i as u64)?;
            clock += r.latency;
            Ok(Observation {
                query_id: query.to_string(),
                theta: theta.into_inner(),
                latency_s: r.latency,
                status: r.status,
                iteration: i,
                source: Source::Random,
                timestamp: clock,
            })
        })
        .collect()
}
