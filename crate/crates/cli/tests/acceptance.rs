//! Acceptance suite. Prints one PASS/FAIL line per criterion. With
//! `ACCEPTANCE_STRICT=1` the run exits nonzero if any criterion fails.
//!
//! Run a subset by passing substrings of criterion names, e.g.
//! `cargo test --test acceptance -- c6 c9`.

use std::time::{Duration, Instant};

use aqetuner_core::correlation::{self, CorrelationConfig};
use aqetuner_core::diffcore::{Matrix, ParamStore, Tape, Unary, Var};
use aqetuner_core::encoder::{CorrelationMatrix, Encoder, EncoderConfig, PlanInput};
use aqetuner_core::engine::{Engine, FailureRule, Scenario, SimulatedEngine};
use aqetuner_core::harness::{self, grad_check, grad_check_inputs, OracleResult};
use aqetuner_core::knobs::Configuration;
use aqetuner_core::plan::{laplacian, spectral_encoding, FeatureVocab, PlanNode, QueryPlan};
use aqetuner_core::predictor::{LatentNoise, NeuralProcess, PredictorConfig, Surrogate, SurrogateConfig, TapeSet};
use aqetuner_core::rng;
use aqetuner_core::tuner::{self, Observation, TunerConfig, TuningHistory};
use aqetuner_core::warmstart::{self, PsoConfig, Swarm};
use aqetuner_core::Error;
use aqetuner_core::Result;
use aqetuner_core::{engine::Status, predictor::Prediction};
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, &'static str, Duration, fn() -> Result<Outcome>);

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 10] = [
        ("c1", "gradient correctness", Duration::from_secs(60), c1_gradients),
        ("c2", "spectral encoding oracle", Duration::from_secs(10), c2_spectral),
        ("c3", "masked attention", Duration::from_secs(60), c3_masked_attention),
        ("c4", "EIC closed form", Duration::from_secs(60), c4_eic),
        ("c5", "Shapley oracle equivalence", Duration::from_secs(120), c5_shapley),
        ("c6", "correlation recovery", Duration::from_secs(300), c6_correlation),
        ("c7", "predictor quality", Duration::from_secs(600), c7_predictor),
        ("c8", "warm-start efficiency", Duration::from_secs(300), c8_warm_start),
        ("c9", "end-to-end tuning", Duration::from_secs(1800), c9_end_to_end),
        ("c10", "determinism and persistence", Duration::from_secs(600), c10_cli),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, limit, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| id == p || name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let res = f();
        let elapsed = start.elapsed();
        let (pass, detail) = match res {
            Ok(o) => (o.pass && elapsed <= limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let timing = if elapsed > limit {
            format!("{:.1}s OVER LIMIT {}s", elapsed.as_secs_f64(), limit.as_secs())
        } else {
            format!("{:.1}s", elapsed.as_secs_f64())
        };
        println!(
            "{} {:>3} {}: {} [{}]",
            if pass { "PASS" } else { "FAIL" },
            id,
            name,
            detail,
            timing
        );
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", ran - failed, ran);
    // failures are reported above; ACCEPTANCE_STRICT=1 also turns them into a
    // nonzero exit status
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn small_scenario() -> Scenario {
    Scenario::bundled("synth-small").expect("bundled scenario")
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- c1

/// Reverse-mode gradient of `sum(W .* f(inputs))` against central
/// differences, with a fixed random projection `W`.
fn check_op(name: &str, inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) -> Vec<OracleResult> {
    let run = |xs: &[Matrix]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let (r, c) = tape.shape(out);
        let w = random_matrix(&mut ChaCha8Rng::seed_from_u64(77), r, c, -2.0, 2.0);
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).unwrap();
        let s = tape.sum(prod).unwrap();
        (tape, vars, s)
    };
    let (tape, vars, s) = run(&inputs);
    let grads = tape.backward(s, &mut ParamStore::new()).unwrap();
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, m)| grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    let mut res = grad_check_inputs(|xs| { let (t, _, s) = run(xs); t.value(s).get(0, 0) }, &inputs, &analytic, 1e-5, 1e-4);
    for r in &mut res {
        r.name = format!("{name} {}", r.name);
    }
    res
}

fn c1_gradients() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut results = Vec::new();
    let a = random_matrix(&mut rng, 3, 4, -2.0, 2.0);
    let b = random_matrix(&mut rng, 4, 2, -2.0, 2.0);
    let c = random_matrix(&mut rng, 3, 4, -2.0, 2.0);
    let row = random_matrix(&mut rng, 1, 4, -2.0, 2.0);
    let pos = random_matrix(&mut rng, 3, 4, 0.5, 2.0);
    let away_from_kink = Matrix::from_rows(&[vec![-1.5, 0.3, 0.8, -0.4], vec![0.9, -0.2, 1.1, -1.3]])?;
    results.extend(check_op("matmul", vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap()));
    results.extend(check_op("matmul_nt", vec![a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1]).unwrap()));
    results.extend(check_op("transpose", vec![a.clone()], |t, v| t.transpose(v[0]).unwrap()));
    results.extend(check_op("add", vec![a.clone(), c.clone()], |t, v| t.add(v[0], v[1]).unwrap()));
    results.extend(check_op("sub", vec![a.clone(), c.clone()], |t, v| t.sub(v[0], v[1]).unwrap()));
    results.extend(check_op("mul", vec![a.clone(), c.clone()], |t, v| t.mul(v[0], v[1]).unwrap()));
    results.extend(check_op("div", vec![a.clone(), pos.clone()], |t, v| t.div(v[0], v[1]).unwrap()));
    results.extend(check_op("add_row", vec![a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]).unwrap()));
    results.extend(check_op("scale", vec![a.clone()], |t, v| t.scale(v[0], 0.7).unwrap()));
    for (name, op) in [
        ("tanh", Unary::Tanh),
        ("sigmoid", Unary::Sigmoid),
        ("softplus", Unary::Softplus),
        ("exp", Unary::Exp),
    ] {
        results.extend(check_op(name, vec![a.clone()], move |t, v| t.unary(op, v[0]).unwrap()));
    }
    results.extend(check_op("relu", vec![away_from_kink], |t, v| t.relu(v[0]).unwrap()));
    results.extend(check_op("log", vec![pos.clone()], |t, v| t.log(v[0]).unwrap()));
    results.extend(check_op("softmax_rows", vec![a.clone()], |t, v| t.softmax_rows(v[0]).unwrap()));
    results.extend(check_op("sum", vec![a.clone()], |t, v| t.sum(v[0]).unwrap()));
    results.extend(check_op("mean_rows", vec![a.clone()], |t, v| t.mean_rows(v[0]).unwrap()));
    results.extend(check_op("concat_cols", vec![a.clone(), c.clone()], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()));
    results.extend(check_op("slice_cols", vec![a.clone()], |t, v| t.slice_cols(v[0], 1, 3).unwrap()));
    results.extend(check_op("concat_rows", vec![a.clone(), c], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()));
    results.extend(check_op("gather_rows", vec![a.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2]).unwrap()));
    results.extend(check_op("repeat_rows", vec![row], |t, v| t.repeat_rows(v[0], 3).unwrap()));
    let q = random_matrix(&mut rng, 6, 4, -2.0, 2.0);
    let k = random_matrix(&mut rng, 6, 4, -2.0, 2.0);
    let p = random_matrix(&mut rng, 6, 3, -2.0, 2.0);
    let vv = random_matrix(&mut rng, 6, 5, -2.0, 2.0);
    results.extend(check_op("block_scores", vec![q.clone(), k], |t, v| t.block_scores(v[0], v[1], 3).unwrap()));
    results.extend(check_op("block_apply", vec![p, vv], |t, v| t.block_apply(v[0], v[1], 3).unwrap()));
    results.extend(check_op("block_mean", vec![q], |t, v| t.block_mean(v[0], 2).unwrap()));
    let ops_worst = results.iter().map(|r| r.value).fold(0.0, f64::max);
    let ops_pass = results.iter().all(|r| r.pass);

    // Full ELBO on a 4-context / 4-target set with frozen noise.
    const D: usize = 4;
    let mut store = ParamStore::new();
    let cfg = PredictorConfig {
        hidden: 6,
        latent: 5,
        ..PredictorConfig::default()
    };
    let np = NeuralProcess::new(&mut store, cfg, D, &mut ChaCha8Rng::seed_from_u64(5))?;
    let xc = random_matrix(&mut rng, 4, D, -1.0, 1.0);
    let xd = random_matrix(&mut rng, 4, D, -1.0, 1.0);
    let yc = [Some(0.5), Some(-0.3), None, Some(1.2)];
    let yd = [Some(0.1), None, Some(-0.8), Some(0.4)];
    let noise = LatentNoise::draw(cfg.samples, cfg.latent, &mut rng);
    let elbo = |s: &ParamStore| {
        let mut tape = Tape::new();
        let c = TapeSet {
            x: tape.constant(xc.clone()),
            y: yc.to_vec(),
        };
        let d = TapeSet {
            x: tape.constant(xd.clone()),
            y: yd.to_vec(),
        };
        let l = np.elbo_loss(&mut tape, s, &c, &d, &noise).unwrap();
        (tape, l)
    };
    let (tape, l) = elbo(&store);
    tape.backward(l, &mut store)?;
    let analytic: Vec<_> = store.ids().map(|id| (id, store.grad(id))).collect();
    let elbo_res = grad_check(|s| { let (t, l) = elbo(s); t.value(l).get(0, 0) }, &mut store, &analytic, 1e-5, 1e-3, usize::MAX, 1);
    let elbo_worst = elbo_res.iter().map(|r| r.value).fold(0.0, f64::max);
    let elbo_pass = elbo_res.iter().all(|r| r.pass);
    Ok(outcome(
        ops_pass && elbo_pass,
        format!(
            "{} op checks, max rel err {ops_worst:.2e} (tol 1e-4); ELBO over {} params, max rel err {elbo_worst:.2e} (tol 1e-3)",
            results.len(),
            elbo_res.len()
        ),
    ))
}

// ---------------------------------------------------------------- c2

fn node(id: usize, op: &str, children: Vec<usize>) -> PlanNode {
    PlanNode {
        id,
        op: op.into(),
        tables: vec![],
        columns: vec![],
        predicates: vec![],
        join: None,
        aggs: vec![],
        card_est: 100.0,
        cost_est: 10.0,
        children,
    }
}

fn c2_spectral() -> Result<Outcome> {
    let path = QueryPlan {
        query_id: "path3".into(),
        nodes: vec![node(0, "sort", vec![1]), node(1, "filter", vec![2]), node(2, "scan", vec![])],
        root: 0,
    };
    let lap = laplacian(&path);
    let eig = SymmetricEigen::new(lap);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    let val_err = vals.iter().zip([0.0, 1.0, 3.0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let enc = spectral_encoding(&path, 2)?;
    let cols: Vec<Vec<f64>> = (0..2).map(|j| enc.iter().map(|r| r[j]).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let ortho_err = (dot(&cols[0], &cols[0]) - 1.0)
        .abs()
        .max((dot(&cols[1], &cols[1]) - 1.0).abs())
        .max(dot(&cols[0], &cols[1]).abs());
    // Selected vectors must be orthogonal to the constant kernel vector.
    let ones = [1.0 / 3f64.sqrt(); 3];
    let kernel_leak = dot(&cols[0], &ones).abs().max(dot(&cols[1], &ones).abs());
    let zero = (0..3).min_by(|&a, &b| eig.eigenvalues[a].abs().total_cmp(&eig.eigenvalues[b].abs())).unwrap();
    let kv = eig.eigenvectors.column(zero);
    let kernel_spread = kv.iter().map(|x| (x - kv[0]).abs()).fold(0.0, f64::max);
    Ok(outcome(
        val_err < 1e-9 && ortho_err < 1e-8 && kernel_spread < 1e-8 && kernel_leak < 1e-8,
        format!(
            "eigenvalue err {val_err:.1e} (tol 1e-9); orthonormality err {ortho_err:.1e} (tol 1e-8); kernel vector spread {kernel_spread:.1e}"
        ),
    ))
}

// ---------------------------------------------------------------- c3

const OPS: [&str; 6] = ["scan", "filter", "hash_join", "aggregate", "sort", "exchange"];

fn random_plan(rng: &mut ChaCha8Rng, n: usize, id: usize) -> QueryPlan {
    let mut children = vec![Vec::new(); n];
    for i in 1..n {
        children[rng.random_range(0..i)].push(i);
    }
    QueryPlan {
        query_id: format!("rand{id}"),
        nodes: (0..n)
            .map(|i| node(i, OPS[rng.random_range(0..OPS.len())], children[i].clone()))
            .collect(),
        root: 0,
    }
}

fn c3_masked_attention() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let knobs = 6;
    let cfg = EncoderConfig {
        eigenvectors: 4,
        ..EncoderConfig::default()
    };
    let mut masked_pairs = 0usize;
    let mut max_masked = 0.0f64;
    let mut max_ones_diff = 0.0f64;
    for trial in 0..50 {
        let plan = random_plan(&mut rng, 5, trial);
        let vocab = FeatureVocab::from_plans(std::slice::from_ref(&plan));
        let input = PlanInput::new(&plan, &vocab, cfg.eigenvectors)?;
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, input.features.cols(), knobs, &mut rng)?;
        let types: Vec<String> = OPS.iter().map(|s| s.to_string()).collect();
        let names: Vec<String> = (0..knobs).map(|j| format!("k{j}")).collect();
        // Every knob keeps at least one visible node, so no row falls back
        // to uniform attention.
        let corr = loop {
            let m = CorrelationMatrix {
                node_types: types.clone(),
                knobs: names.clone(),
                matrix: (0..types.len()).map(|_| (0..knobs).map(|_| u8::from(rng.random_bool(0.5))).collect()).collect(),
            };
            if (0..knobs).all(|j| input.node_types.iter().any(|t| m.is_correlated(t, j))) {
                break m;
            }
        };
        let thetas: Vec<Configuration> = (0..3)
            .map(|_| Configuration::clamped((0..knobs).map(|_| rng.random()).collect()))
            .collect();

        let mut tape = Tape::new();
        let nodes = enc.encode_plan(&mut tape, &store, &input)?;
        let ks = enc.encode_knobs(&mut tape, &store, &thetas)?;
        let mask = enc.cross_mask(&input, &corr)?;
        let tr = enc.cross_encode(&mut tape, &store, ks, nodes, Some(&mask), thetas.len())?;
        let w = tape.value(tr.attention.weights);
        for b in 0..thetas.len() {
            for j in 0..knobs {
                for (ni, t) in input.node_types.iter().enumerate() {
                    if !corr.is_correlated(t, j) {
                        masked_pairs += 1;
                        max_masked = max_masked.max(w.get(b * knobs + j, ni).abs());
                    }
                }
            }
        }

        let ones = CorrelationMatrix::filled(types.clone(), names.clone(), 1);
        let with_ones = enc.encode(&mut tape, &store, &input, &ones, &thetas)?;
        let nodes = enc.encode_plan(&mut tape, &store, &input)?;
        let ks = enc.encode_knobs(&mut tape, &store, &thetas)?;
        let plain = enc.cross_encode(&mut tape, &store, ks, nodes, None, thetas.len())?;
        max_ones_diff = max_ones_diff.max(tape.value(with_ones).max_abs_diff(tape.value(plain.x)));
    }
    Ok(outcome(
        max_masked == 0.0 && max_ones_diff <= 1e-12 && masked_pairs > 0,
        format!("{masked_pairs} masked pairs, max weight {max_masked:e}; all-ones vs unmasked max diff {max_ones_diff:.1e} (tol 1e-12)"),
    ))
}

// ---------------------------------------------------------------- c4

fn c4_eic() -> Result<Outcome> {
    let ei = tuner::expected_improvement(1.0, 0.0, 1.0)?;
    let mc = harness::expected_improvement_mc(1.0, 0.0, 1.0, 1_000_000, &mut rng::stream(4, "ei_mc", 0));
    let pred = |m: f64, s: f64, p: f64| Prediction {
        perf_mean: m,
        perf_std: s,
        fail_prob: p,
    };
    let zero_warm = tuner::eic(&pred(0.0, 1.0, 1.0), Some(1.0))?;
    let zero_cold = tuner::eic(&pred(0.0, 1.0, 1.0), None)?;

    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let pools = 500;
    for _ in 0..pools {
        let n = r.random_range(1..64);
        let preds: Vec<Prediction> = (0..n)
            .map(|_| pred(r.random_range(-2.0..2.0), r.random_range(0.05..2.0), r.random_range(0.0..1.0)))
            .collect();
        let thetas: Vec<Configuration> = (0..n)
            .map(|_| Configuration::clamped((0..4).map(|_| r.random()).collect()))
            .collect();
        let f_star = r.random_range(-2.0..2.0);
        let base: Vec<f64> = preds.iter().map(|p| tuner::eic(p, Some(f_star)).unwrap()).collect();
        let k = r.random_range(1e-3..1e3);
        let scaled: Vec<f64> = preds
            .iter()
            .map(|p| k * tuner::expected_improvement(f_star, p.perf_mean, p.perf_std).unwrap() * (1.0 - p.fail_prob))
            .collect();
        if tuner::select_candidate(&base, &preds, &thetas) != tuner::select_candidate(&scaled, &preds, &thetas) {
            mismatches += 1;
        }
    }
    let pass = (ei - mc).abs() < 1e-4 && (ei - 1.08332).abs() < 1e-5 && zero_warm == 0.0 && zero_cold == 0.0 && mismatches == 0;
    Ok(outcome(
        pass,
        format!(
            "closed form {ei:.6}, 1e6-sample MC {mc:.6}, |diff| {:.1e} (tol 1e-4); EIC at fail_prob=1: {zero_warm}; argmax changed under scaling in {mismatches}/{pools} pools",
            (ei - mc).abs()
        ),
    ))
}

// ---------------------------------------------------------------- c5

fn uniform_points(space_len: usize, count: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..space_len).map(|_| r.random()).collect()).collect()
}

fn c5_shapley() -> Result<Outcome> {
    let e = SimulatedEngine::new(small_scenario(), 5)?;
    let n = e.knob_space().len();
    let mut r = rng::stream(5, "c5", 0);
    let samples: Vec<Configuration> = uniform_points(n, 60, &mut r).into_iter().map(Configuration::clamped).collect();
    let timings = match correlation::collect_timings(&e, &e.query_ids(), &samples, 0) {
        Ok(t) => t,
        Err(p) => return Err(p.error),
    };
    let cfg = CorrelationConfig::default();
    let groups = correlation::group_by_type(&timings);

    let mut models: Vec<(String, Box<dyn Fn(&[f64]) -> f64>)> = Vec::new();
    for (nt, trip) in &groups {
        let m = correlation::fit_node_model(trip, &cfg)?;
        models.push((format!("node model {nt}"), Box::new(move |x: &[f64]| m.predict(x))));
    }
    // Noise-free log latency is not additive in the knobs, so sampling error
    // is actually exercised.
    for q in ["q01", "q07", "q13"] {
        let e = SimulatedEngine::new(small_scenario(), 5)?;
        models.push((
            format!("log latency {q}"),
            Box::new(move |x: &[f64]| e.expected_latency(q, &Configuration::clamped(x.to_vec())).unwrap().ln()),
        ));
    }

    let background = uniform_points(n, 32, &mut r);
    let points = uniform_points(n, 3, &mut r);
    let mut worst_gap = 0.0f64;
    let mut worst_eff = 0.0f64;
    for (i, (_, f)) in models.iter().enumerate() {
        let base = background.iter().map(|b| f(b)).sum::<f64>() / background.len() as f64;
        for (k, p) in points.iter().enumerate() {
            let exact = harness::exact_shapley(|x: &[f64]| f(x), p, &background)?;
            worst_eff = worst_eff.max((exact.iter().sum::<f64>() - (f(p) - base)).abs());
            let mut pr = rng::stream(5, "c5_perm", (i * 10 + k) as u64);
            let sampled = correlation::shapley_values(f, p, &background, 2000, &mut pr)?;
            for (a, b) in exact.iter().zip(&sampled) {
                worst_gap = worst_gap.max((a - b).abs());
            }
        }
    }
    Ok(outcome(
        worst_gap < 0.05 && worst_eff < 1e-9,
        format!(
            "{} models x {} points on {n} knobs: max |sampled - exact| {worst_gap:.4} (tol 0.05); exact efficiency err {worst_eff:.1e} (tol 1e-9)",
            models.len(),
            points.len()
        ),
    ))
}

// ---------------------------------------------------------------- c6

fn c6_correlation() -> Result<Outcome> {
    let cfg = CorrelationConfig::default();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..5u64 {
        let e = SimulatedEngine::new(small_scenario(), seed)?;
        let mut timings = Vec::new();
        let mut call = 0;
        let mut runs = 0;
        for (qi, q) in e.query_ids().iter().enumerate() {
            let mut swarm = Swarm::new(PsoConfig::default(), e.knob_space().len(), rng::stream(seed, "c6_swarm", qi as u64));
            let samples = warmstart::run(&e, q, 25, &mut swarm, call).map_err(|p| p.error)?;
            call += samples.len() as u64;
            runs += samples.len();
            for s in &samples {
                timings.extend(correlation::timings_from_node_times(q, &s.theta, &s.node_times));
            }
        }
        let truth = e.scenario().ground_truth_matrix();
        let report = correlation::identify(&timings, &truth.node_types, &truth.knobs, &cfg, seed)?;
        let m = correlation::build_matrix(&report, cfg.epsilon);
        let (p, r) = m.precision_recall(&truth)?;
        pass &= p >= 0.9 && r >= 0.9;
        lines.push(format!("seed {seed}: {runs} runs, P={p:.3} R={r:.3}"));
    }
    Ok(outcome(pass, format!("{} (need P,R >= 0.9 each seed)", lines.join("; "))))
}

// ---------------------------------------------------------------- c7

/// synth-small with the failure rules replaced by one half-space in theta.
fn half_space_scenario() -> Scenario {
    let mut s = small_scenario();
    let mut w = vec![0.0; s.knobs.len()];
    w[1] = 0.8;
    w[4] = 1.0;
    w[7] = 0.6;
    s.failure_rules = vec![FailureRule::HalfSpace {
        weights: w,
        threshold: 1.4,
    }];
    s
}

fn c7_predictor() -> Result<Outcome> {
    let queries: Vec<String> = (1..=10).map(|i| format!("q{i:02}")).collect();
    let mut beats = 0;
    let mut acc_ok = 0;
    let mut loss_ok = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let e = SimulatedEngine::new(half_space_scenario(), seed)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            let obs = harness::random_baseline(&e, q, 40, rng::derive_seed(seed, "c7", qi as u64), 1000 * qi as u64)?;
            train.extend_from_slice(&obs[..30]);
            test.extend_from_slice(&obs[30..]);
        }
        let plans = queries.iter().map(|q| e.plan(q)).collect::<Result<Vec<_>>>()?;
        let corr = CorrelationMatrix::filled(e.scenario().node_types.clone(), e.knob_space().names(), 1);
        let mut model = Surrogate::new(SurrogateConfig::default(), &plans, corr, e.knob_space().len(), seed)?;
        let fit = model.fit(&train, 200, seed)?;
        let ctx = model.context(&train)?;
        let noise = model.draw_noise(seed, "c7_predict", 0);
        let mut se = 0.0;
        let mut se_mean = 0.0;
        let mut n_succ = 0;
        let mut correct = 0;
        let succ: Vec<f64> = train.iter().filter_map(Observation::log_latency).collect();
        let ctx_mean = succ.iter().sum::<f64>() / succ.len() as f64;
        for q in &queries {
            let rows: Vec<&Observation> = test.iter().filter(|o| &o.query_id == q).collect();
            let thetas = rows.iter().map(|o| o.configuration()).collect::<Result<Vec<_>>>()?;
            let x = model.encode(q, &thetas)?;
            let preds = model.predict(&ctx, &x, &noise)?;
            for (o, p) in rows.iter().zip(&preds) {
                if (p.fail_prob > 0.5) == o.status.is_failure() {
                    correct += 1;
                }
                if let Some(y) = o.log_latency() {
                    se += (p.perf_mean - y).powi(2);
                    se_mean += (ctx_mean - y).powi(2);
                    n_succ += 1;
                }
            }
        }
        let rmse = (se / n_succ as f64).sqrt();
        let rmse_mean = (se_mean / n_succ as f64).sqrt();
        let acc = correct as f64 / test.len() as f64;
        let (first, last) = (fit.losses[0], *fit.losses.last().unwrap());
        beats += usize::from(rmse < rmse_mean);
        acc_ok += usize::from(acc > 0.9);
        loss_ok += usize::from(last < first);
        lines.push(format!("s{seed}: rmse {rmse:.3}/{rmse_mean:.3} acc {acc:.2} loss {first:.2}->{last:.2}"));
    }
    Ok(outcome(
        beats >= 9 && acc_ok == 10 && loss_ok == 10,
        format!(
            "RMSE below context mean in {beats}/10 (need 9); reliability acc > 0.9 in {acc_ok}/10; loss decreased in {loss_ok}/10 | {}",
            lines.join("; ")
        ),
    ))
}

// ---------------------------------------------------------------- c8

fn best_latency(obs: impl Iterator<Item = (f64, Status)>) -> f64 {
    obs.filter(|(_, s)| !s.is_failure())
        .map(|(l, _)| l)
        .fold(aqetuner_core::engine::FAILURE_LATENCY, f64::min)
}

fn c8_warm_start() -> Result<Outcome> {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let e = SimulatedEngine::new(small_scenario(), seed)?;
        let n = e.knob_space().len();
        let (mut pso_sum, mut rnd_sum) = (0.0, 0.0);
        let queries = e.query_ids();
        for (qi, q) in queries.iter().enumerate() {
            let mut swarm = Swarm::new(PsoConfig::default(), n, rng::stream(seed, "c8_swarm", qi as u64));
            let s = warmstart::run(&e, q, 60, &mut swarm, 0).map_err(|p| p.error)?;
            pso_sum += best_latency(s.iter().map(|x| (x.latency, x.status)));
            let r = harness::random_baseline(&e, q, 60, rng::derive_seed(seed, "c8_random", qi as u64), 10_000)?;
            rnd_sum += best_latency(r.iter().map(|o| (o.latency_s, o.status)));
        }
        let (p, r) = (pso_sum / queries.len() as f64, rnd_sum / queries.len() as f64);
        wins += usize::from(p < r);
        lines.push(format!("s{seed}: {p:.4} vs {r:.4}"));
    }
    Ok(outcome(
        wins >= 8,
        format!("PSO mean best latency below random in {wins}/10 seeds (need 8) | {}", lines.join("; ")),
    ))
}

// ---------------------------------------------------------------- c9

/// 300 engine evaluations in total for ten queries: 12 warm-start samples
/// per query plus 180 BO steps.
fn c9_config() -> TunerConfig {
    let mut cfg = TunerConfig {
        warm_start_samples: 12,
        ..TunerConfig::default()
    };
    cfg.budget.max_evaluations = Some(300 - 12 * 10);
    cfg
}

fn c9_end_to_end() -> Result<Outcome> {
    let queries: Vec<String> = (1..=10).map(|i| format!("q{i:02}")).collect();
    let mut lat_wins = 0;
    let mut fail_wins = 0;
    let mut monotone = true;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let e = SimulatedEngine::new(small_scenario(), seed)?;
        let out = tuner::run(&e, &queries, c9_config(), seed)?;
        if out.history.len() != 300 {
            return Err(Error::Validation(format!("tuner used {} evaluations", out.history.len())));
        }
        for q in &queries {
            let mut best = f64::INFINITY;
            for o in out.history.for_query(q) {
                let next = if o.is_success() { best.min(o.latency_s) } else { best };
                monotone &= next <= best;
                best = next;
            }
        }
        let tuned = out.best.iter().map(|b| b.latency_s.unwrap_or(aqetuner_core::engine::FAILURE_LATENCY)).sum::<f64>() / queries.len() as f64;
        let mut random = TuningHistory::new();
        for (qi, q) in queries.iter().enumerate() {
            for o in harness::random_baseline(&e, q, 30, rng::derive_seed(seed, "c9_random", qi as u64), 100_000)? {
                random.push(o);
            }
        }
        let rnd = queries
            .iter()
            .map(|q| random.best(q).map_or(aqetuner_core::engine::FAILURE_LATENCY, |o| o.latency_s))
            .sum::<f64>()
            / queries.len() as f64;
        let (tf, rf) = (out.history.failures(), random.failures());
        lat_wins += usize::from(tuned < rnd);
        fail_wins += usize::from(tf < rf);
        lines.push(format!("s{seed}: {tuned:.4}/{rnd:.4} fails {tf}/{rf}"));
    }
    Ok(outcome(
        lat_wins >= 8 && fail_wins >= 8 && monotone,
        format!(
            "lower mean best latency in {lat_wins}/10, fewer failures in {fail_wins}/10 (need 8 each); incumbents monotone: {monotone} | {}",
            lines.join("; ")
        ),
    ))
}

// ---------------------------------------------------------------- c10

const C10_CONFIG: &str = "scenario = builtin:synth-small
seed = 7
queries = q01, q02, q03, q04, q05
budget.max_evaluations = 50
";

fn c10_cli() -> Result<Outcome> {
    use aqetuner_cli::commands::HISTORY_FILE;
    use aqetuner_cli::{cmd_report, cmd_tune, Overrides};

    let dir = tempfile::TempDir::new()?;
    let cfg = dir.path().join("session.conf");
    std::fs::write(&cfg, C10_CONFIG)?;
    let run = |name: &str| {
        cmd_tune(
            &cfg,
            &Overrides {
                out: Some(dir.path().join(name)),
                ..Overrides::default()
            },
        )
    };
    let (a, b) = match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Ok(outcome(false, format!("tune failed: {e}"))),
    };
    let ha = std::fs::read(a.out.join(HISTORY_FILE))?;
    let hb = std::fs::read(b.out.join(HISTORY_FILE))?;
    let identical = ha == hb;
    let report = match cmd_report(&a.out.join(HISTORY_FILE), Some(&dir.path().join("report"))) {
        Ok(r) => r,
        Err(e) => return Ok(outcome(false, format!("report failed: {e}"))),
    };
    let lines = ha.iter().filter(|&&c| c == b'\n').count();
    Ok(outcome(
        identical && report.skipped == 0 && report.evaluations == lines,
        format!(
            "history {} bytes, {lines} lines, byte-identical: {identical}; report read {} observations, skipped {}",
            ha.len(),
            report.evaluations,
            report.skipped
        ),
    ))
}
