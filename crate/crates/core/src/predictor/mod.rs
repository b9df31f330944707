//! Dual-task neural process over joint encodings.
//!
//! Two tasks share one context: performance regression on successful runs
//! (standardized log latency) and failure classification on all runs. Each
//! task has an abstractor producing deterministic `r_i` and latent `u_i`
//! vectors per context pair; targets attend over the task's context to get
//! `r`. The pooled `u_i` of both tasks give the shared latent `z`, and each
//! task's pooled `u_i` together with a sample of `z` give its latent `h`.
//! Gates then let each task borrow from the other before decoding.

mod surrogate;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};

pub use surrogate::{FitReport, ModelCheckpoint, Surrogate, SurrogateConfig, CHECKPOINT_FORMAT};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub latent: usize,
    /// Monte Carlo latent samples for training and prediction.
    pub samples: usize,
    /// Lower bound on the decoder's standard deviation (standardized units).
    pub sigma_floor: f64,
    /// Lower bound on latent standard deviations.
    pub latent_floor: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            latent: 32,
            samples: 4,
            sigma_floor: 0.01,
            latent_floor: 1e-3,
        }
    }
}

/// Context observations as joint encodings with their outcomes. A `None`
/// latency marks a failed run: it enters the reliability task only.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSet {
    pub x: Matrix,
    pub log_latency: Vec<Option<f64>>,
}

impl ContextSet {
    pub fn new(x: Matrix, log_latency: Vec<Option<f64>>) -> Result<Self> {
        if x.rows() != log_latency.len() {
            return Err(Error::dim("context", format!("{} encodings, {} outcomes", x.rows(), log_latency.len())));
        }
        Ok(Self { x, log_latency })
    }

    /// Size of the performance context (successful runs).
    pub fn perf_len(&self) -> usize {
        self.log_latency.iter().filter(|y| y.is_some()).count()
    }

    /// Size of the reliability context (all runs).
    pub fn rel_len(&self) -> usize {
        self.log_latency.len()
    }
}

/// Per-target prediction in log-latency units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub perf_mean: f64,
    pub perf_std: f64,
    pub fail_prob: f64,
}

/// Affine map between log latency and the model's standardized target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetScaler {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl TargetScaler {
    /// Mean and population standard deviation; the scale falls back to 1
    /// when fewer than two values or no spread are available.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if values.len() < 2 || var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() };
        Self { mean, std }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Diagonal Gaussian on the tape, both as `1 x dim` rows.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    pub sigma: Var,
}

impl LatentGaussian {
    /// `mu + sigma * eps` with fixed noise `eps`.
    pub fn sample(&self, tape: &mut Tape, eps: &[f64]) -> Result<Var> {
        let e = tape.constant(Matrix::row_vector(eps));
        let se = tape.mul(self.sigma, e)?;
        tape.add(self.mu, se)
    }
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` summed over dimensions.
pub fn kl_diag_gaussian(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(sigma_q)
        .zip(mu_p.iter().zip(sigma_p))
        .map(|((mq, sq), (mp, sp))| (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5)
        .sum()
}

/// Tape version of [`kl_diag_gaussian`].
pub fn kl_on_tape(tape: &mut Tape, q: &LatentGaussian, p: &LatentGaussian) -> Result<Var> {
    let log_sp = tape.log(p.sigma)?;
    let log_sq = tape.log(q.sigma)?;
    let log_ratio = tape.sub(log_sp, log_sq)?;
    let sq2 = tape.mul(q.sigma, q.sigma)?;
    let dm = tape.sub(q.mu, p.mu)?;
    let dm2 = tape.mul(dm, dm)?;
    let num = tape.add(sq2, dm2)?;
    let sp2 = tape.mul(p.sigma, p.sigma)?;
    let den = tape.scale(sp2, 2.0)?;
    let frac = tape.div(num, den)?;
    let per_dim = tape.add(log_ratio, frac)?;
    let total = tape.sum(per_dim)?;
    let half = tape.constant(Matrix::scalar(-0.5 * tape.shape(q.mu).1 as f64));
    tape.add(total, half)
}

/// Bernoulli log-likelihood of `y` under `sigmoid(logit)`, computed stably.
pub fn bernoulli_log_likelihood(y: bool, logit: f64) -> f64 {
    let softplus = if logit > 0.0 { logit + (-logit).exp().ln_1p() } else { logit.exp().ln_1p() };
    if y {
        logit - softplus
    } else {
        -softplus
    }
}

/// Frozen reparameterization noise: one row per Monte Carlo sample for `z`,
/// `h_f` and `h_g`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub z: Vec<Vec<f64>>,
    pub h_f: Vec<Vec<f64>>,
    pub h_g: Vec<Vec<f64>>,
}

impl LatentNoise {
    pub fn draw<R: Rng + ?Sized>(samples: usize, dim: usize, rng: &mut R) -> Self {
        let mut rows = || -> Vec<Vec<f64>> {
            (0..samples)
                .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
                .collect()
        };
        let z = rows();
        let h_f = rows();
        let h_g = rows();
        Self { z, h_f, h_g }
    }

    /// All-zero noise: every latent sits at its mean.
    pub fn zeros(samples: usize, dim: usize) -> Self {
        let rows = vec![vec![0.0; dim]; samples];
        Self {
            z: rows.clone(),
            h_f: rows.clone(),
            h_g: rows,
        }
    }

    pub fn samples(&self) -> usize {
        self.z.len()
    }
}

/// `p_o + tanh(W1 p_c + b1) * sigmoid(W2 p_c + b2)`.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub w1: Linear,
    pub w2: Linear,
}

impl Gate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, from: usize, to: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, &format!("{name}.w1"), from, to, rng)?,
            w2: Linear::new(store, &format!("{name}.w2"), from, to, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, p_o: Var, p_c: Var) -> Result<Var> {
        let a = self.w1.forward(tape, store, p_c)?;
        let a = tape.tanh(a)?;
        let b = self.w2.forward(tape, store, p_c)?;
        let b = tape.sigmoid(b)?;
        let g = tape.mul(a, b)?;
        tape.add(p_o, g)
    }
}

/// A set of observations recorded on a tape: encodings plus outcomes in
/// standardized units (`None` for failures).
#[derive(Clone, Debug)]
pub struct TapeSet {
    pub x: Var,
    pub y: Vec<Option<f64>>,
}

impl TapeSet {
    fn successes(&self) -> Vec<usize> {
        self.y.iter().enumerate().filter_map(|(i, y)| y.map(|_| i)).collect()
    }
}

/// Output of [`NeuralProcess::abstract_context`].
#[derive(Clone, Debug)]
pub struct Abstraction {
    /// Encodings, `r_i` and `u_i` of successful pairs; `None` when there are none.
    pub perf: Option<(Var, Var, Var)>,
    /// Encodings, `r_i` and `u_i` of all pairs.
    pub rel: (Var, Var, Var),
}

/// Decoder outputs for a batch of targets (standardized units).
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub mu: Var,
    pub sigma: Var,
    pub logit: Var,
}

#[derive(Clone, Copy, Debug)]
struct TaskAttention {
    q: Linear,
    k: Linear,
}

#[derive(Clone, Debug)]
pub struct NeuralProcess {
    pub cfg: PredictorConfig,
    pub x_dim: usize,
    abs_f: Mlp,
    abs_g: Mlp,
    attn_f: TaskAttention,
    attn_g: TaskAttention,
    empty_r_f: ParamId,
    empty_u_f: ParamId,
    z_net: Mlp,
    hf_net: Mlp,
    hg_net: Mlp,
    gate_rf: Gate,
    gate_rg: Gate,
    gate_hf: Gate,
    gate_hg: Gate,
    dec_f: Mlp,
    dec_g: Mlp,
}

/// Which side of the latent path a distribution is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Perf,
    Rel,
}

impl NeuralProcess {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: PredictorConfig, x_dim: usize, rng: &mut R) -> Result<Self> {
        let (d, h, l) = (x_dim, cfg.hidden, cfg.latent);
        let attn = |store: &mut ParamStore, name: &str, rng: &mut R| -> Result<TaskAttention> {
            Ok(TaskAttention {
                q: Linear::new(store, &format!("{name}.q"), d, h, rng)?,
                k: Linear::new(store, &format!("{name}.k"), d, h, rng)?,
            })
        };
        Ok(Self {
            cfg,
            x_dim,
            abs_f: Mlp::new(store, "np.abs_f", &[d + 1, h, 2 * h], rng)?,
            abs_g: Mlp::new(store, "np.abs_g", &[d + 1, h, 2 * h], rng)?,
            attn_f: attn(store, "np.attn_f", rng)?,
            attn_g: attn(store, "np.attn_g", rng)?,
            empty_r_f: store.add("np.empty_r_f", Matrix::zeros(1, h))?,
            empty_u_f: store.add("np.empty_u_f", Matrix::zeros(1, h))?,
            z_net: Mlp::new(store, "np.z", &[h, h, 2 * l], rng)?,
            hf_net: Mlp::new(store, "np.h_f", &[h + l, h, 2 * l], rng)?,
            hg_net: Mlp::new(store, "np.h_g", &[h + l, h, 2 * l], rng)?,
            gate_rf: Gate::new(store, "np.gate_rf", h, h, rng)?,
            gate_rg: Gate::new(store, "np.gate_rg", h, h, rng)?,
            gate_hf: Gate::new(store, "np.gate_hf", l, l, rng)?,
            gate_hg: Gate::new(store, "np.gate_hg", l, l, rng)?,
            dec_f: Mlp::new(store, "np.dec_f", &[d + h + l, h, 2], rng)?,
            dec_g: Mlp::new(store, "np.dec_g", &[d + h + l, h, 1], rng)?,
        })
    }

    /// Per-pair `(r_i, u_i)` for each task.
    pub fn abstract_context(&self, tape: &mut Tape, store: &ParamStore, set: &TapeSet) -> Result<Abstraction> {
        let h = self.cfg.hidden;
        let split = |tape: &mut Tape, out: Var| -> Result<(Var, Var)> {
            Ok((tape.slice_cols(out, 0, h)?, tape.slice_cols(out, h, 2 * h)?))
        };
        let succ = set.successes();
        let perf = if succ.is_empty() {
            None
        } else {
            let xs = tape.gather_rows(set.x, &succ)?;
            let ys: Vec<f64> = succ.iter().map(|&i| set.y[i].expect("success")).collect();
            let ycol = tape.constant(Matrix::from_vec(ys.len(), 1, ys)?);
            let inp = tape.concat_cols(&[xs, ycol])?;
            let out = self.abs_f.forward(tape, store, inp)?;
            let (r, u) = split(tape, out)?;
            Some((xs, r, u))
        };
        let flags: Vec<f64> = set.y.iter().map(|y| if y.is_none() { 1.0 } else { 0.0 }).collect();
        let fcol = tape.constant(Matrix::from_vec(flags.len(), 1, flags)?);
        let inp = tape.concat_cols(&[set.x, fcol])?;
        let out = self.abs_g.forward(tape, store, inp)?;
        let (r, u) = split(tape, out)?;
        Ok(Abstraction {
            perf,
            rel: (set.x, r, u),
        })
    }

    /// Attention weights of targets over context encodings for one task.
    pub fn attention_weights(&self, tape: &mut Tape, store: &ParamStore, task: Task, targets: Var, context_x: Var) -> Result<Var> {
        let a = match task {
            Task::Perf => self.attn_f,
            Task::Rel => self.attn_g,
        };
        let q = a.q.forward(tape, store, targets)?;
        let k = a.k.forward(tape, store, context_x)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, 1.0 / (self.cfg.hidden as f64).sqrt())?;
        tape.softmax_rows(s)
    }

    /// Deterministic representation per target: attention over the task's
    /// context with targets as queries and context `r_i` as values.
    pub fn aggregate_deterministic(&self, tape: &mut Tape, store: &ParamStore, task: Task, targets: Var, abs: &Abstraction) -> Result<Var> {
        let ctx = match task {
            Task::Perf => abs.perf.map(|(x, r, _)| (x, r)),
            Task::Rel => Some((abs.rel.0, abs.rel.1)),
        };
        match ctx {
            Some((x, r)) => {
                let w = self.attention_weights(tape, store, task, targets, x)?;
                tape.matmul(w, r)
            }
            None => {
                let e = tape.param(store, self.empty_r_f);
                tape.repeat_rows(e, tape.shape(targets).0)
            }
        }
    }

    fn gaussian_head(&self, tape: &mut Tape, out: Var) -> Result<LatentGaussian> {
        let l = self.cfg.latent;
        let mu = tape.slice_cols(out, 0, l)?;
        let raw = tape.slice_cols(out, l, 2 * l)?;
        let sp = tape.softplus(raw)?;
        let floor = tape.constant(Matrix::filled(1, l, self.cfg.latent_floor));
        let sigma = tape.add_row(sp, floor)?;
        Ok(LatentGaussian { mu, sigma })
    }

    fn pooled_u(&self, tape: &mut Tape, store: &ParamStore, task: Task, abs: &Abstraction) -> Result<Var> {
        match task {
            Task::Perf => match abs.perf {
                Some((_, _, u)) => tape.mean_rows(u),
                None => Ok(tape.param(store, self.empty_u_f)),
            },
            Task::Rel => tape.mean_rows(abs.rel.2),
        }
    }

    /// Shared latent from the mean of all `u_i` of both tasks.
    pub fn infer_z(&self, tape: &mut Tape, store: &ParamStore, abs: &Abstraction) -> Result<LatentGaussian> {
        let all = match abs.perf {
            Some((_, _, u)) => tape.concat_rows(&[u, abs.rel.2])?,
            None => abs.rel.2,
        };
        let pooled = tape.mean_rows(all)?;
        let out = self.z_net.forward(tape, store, pooled)?;
        self.gaussian_head(tape, out)
    }

    /// Task latent from the task's mean `u_i` and a sample of `z`.
    pub fn infer_h(&self, tape: &mut Tape, store: &ParamStore, task: Task, abs: &Abstraction, z: Var) -> Result<LatentGaussian> {
        let pooled = self.pooled_u(tape, store, task, abs)?;
        let inp = tape.concat_cols(&[pooled, z])?;
        let net = match task {
            Task::Perf => &self.hf_net,
            Task::Rel => &self.hg_net,
        };
        let out = net.forward(tape, store, inp)?;
        self.gaussian_head(tape, out)
    }

    pub fn gates(&self) -> [&Gate; 4] {
        [&self.gate_rf, &self.gate_rg, &self.gate_hf, &self.gate_hg]
    }

    /// Complements the profiles and decodes both tasks for every target.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        targets: Var,
        r_f: Var,
        r_g: Var,
        h_f: Var,
        h_g: Var,
        z: Var,
    ) -> Result<Decoded> {
        let n = tape.shape(targets).0;
        let rf2 = self.gate_rf.apply(tape, store, r_f, r_g)?;
        let rg2 = self.gate_rg.apply(tape, store, r_g, r_f)?;
        let hf2 = self.gate_hf.apply(tape, store, h_f, z)?;
        let hg2 = self.gate_hg.apply(tape, store, h_g, z)?;
        let hf_rows = tape.repeat_rows(hf2, n)?;
        let hg_rows = tape.repeat_rows(hg2, n)?;
        let inp_f = tape.concat_cols(&[targets, rf2, hf_rows])?;
        let out_f = self.dec_f.forward(tape, store, inp_f)?;
        let mu = tape.slice_cols(out_f, 0, 1)?;
        let raw = tape.slice_cols(out_f, 1, 2)?;
        let sp = tape.softplus(raw)?;
        let floor = tape.constant(Matrix::scalar(self.cfg.sigma_floor));
        let sigma = tape.add_row(sp, floor)?;
        let inp_g = tape.concat_cols(&[targets, rg2, hg_rows])?;
        let logit = self.dec_g.forward(tape, store, inp_g)?;
        Ok(Decoded { mu, sigma, logit })
    }

    /// Negative evidence lower bound per target.
    ///
    /// Latents for the likelihood are drawn from the target-conditioned
    /// posterior; each KL term compares it with the context-conditioned
    /// prior. Task latents of both sides share the same `z` sample.
    pub fn elbo_loss(&self, tape: &mut Tape, store: &ParamStore, context: &TapeSet, target: &TapeSet, noise: &LatentNoise) -> Result<Var> {
        let n_d = target.y.len();
        if n_d == 0 {
            return Err(Error::Usage("elbo_loss needs a nonempty target set".into()));
        }
        if noise.samples() == 0 {
            return Err(Error::Usage("elbo_loss needs at least one latent sample".into()));
        }
        let c_abs = self.abstract_context(tape, store, context)?;
        let d_abs = self.abstract_context(tape, store, target)?;
        let r_f = self.aggregate_deterministic(tape, store, Task::Perf, target.x, &c_abs)?;
        let r_g = self.aggregate_deterministic(tape, store, Task::Rel, target.x, &c_abs)?;
        let z_post = self.infer_z(tape, store, &d_abs)?;
        let z_prior = self.infer_z(tape, store, &c_abs)?;
        let kl_z = kl_on_tape(tape, &z_post, &z_prior)?;

        let succ = target.successes();
        let y_succ = if succ.is_empty() {
            None
        } else {
            let ys: Vec<f64> = succ.iter().map(|&i| target.y[i].expect("success")).collect();
            Some(tape.constant(Matrix::from_vec(ys.len(), 1, ys)?))
        };
        let fail_flags: Vec<f64> = target.y.iter().map(|y| if y.is_none() { 1.0 } else { 0.0 }).collect();
        let y_fail = tape.constant(Matrix::from_vec(n_d, 1, fail_flags)?);
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();

        let mut per_sample = Vec::with_capacity(noise.samples());
        for s in 0..noise.samples() {
            let z = z_post.sample(tape, &noise.z[s])?;
            let hf_post = self.infer_h(tape, store, Task::Perf, &d_abs, z)?;
            let hf_prior = self.infer_h(tape, store, Task::Perf, &c_abs, z)?;
            let hg_post = self.infer_h(tape, store, Task::Rel, &d_abs, z)?;
            let hg_prior = self.infer_h(tape, store, Task::Rel, &c_abs, z)?;
            let h_f = hf_post.sample(tape, &noise.h_f[s])?;
            let h_g = hg_post.sample(tape, &noise.h_g[s])?;
            let dec = self.decode(tape, store, target.x, r_f, r_g, h_f, h_g, z)?;

            // Bernoulli: y * l - softplus(l), summed over all targets.
            let yl = tape.mul(y_fail, dec.logit)?;
            let spl = tape.softplus(dec.logit)?;
            let bern = tape.sub(yl, spl)?;
            let mut ll = tape.sum(bern)?;

            if let Some(y) = y_succ {
                let mu = tape.gather_rows(dec.mu, &succ)?;
                let sigma = tape.gather_rows(dec.sigma, &succ)?;
                let diff = tape.sub(y, mu)?;
                let sq = tape.mul(diff, diff)?;
                let var2 = tape.mul(sigma, sigma)?;
                let var2 = tape.scale(var2, 2.0)?;
                let quad = tape.div(sq, var2)?;
                let log_sigma = tape.log(sigma)?;
                let nll = tape.add(quad, log_sigma)?;
                let nll = tape.sum(nll)?;
                let c = tape.constant(Matrix::scalar(half_log_2pi * succ.len() as f64));
                let nll = tape.add(nll, c)?;
                ll = tape.sub(ll, nll)?;
            }
            let kl_f = kl_on_tape(tape, &hf_post, &hf_prior)?;
            let kl_g = kl_on_tape(tape, &hg_post, &hg_prior)?;
            let ll = tape.sub(ll, kl_f)?;
            per_sample.push(tape.sub(ll, kl_g)?);
        }
        let stacked = tape.concat_rows(&per_sample)?;
        let mean_ll = tape.mean_rows(stacked)?;
        let elbo = tape.sub(mean_ll, kl_z)?;
        tape.scale(elbo, -1.0 / n_d as f64)
    }

    /// Predictive distribution for each target row in `targets`, conditioned
    /// on `context`. Latents come from the context-conditioned distributions
    /// with the given noise; results are in standardized units.
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, context: &TapeSet, targets: Var, noise: &LatentNoise) -> Result<Vec<Prediction>> {
        if context.y.is_empty() {
            return Err(Error::Usage("prediction needs a nonempty context".into()));
        }
        let n = tape.shape(targets).0;
        let abs = self.abstract_context(tape, store, context)?;
        let r_f = self.aggregate_deterministic(tape, store, Task::Perf, targets, &abs)?;
        let r_g = self.aggregate_deterministic(tape, store, Task::Rel, targets, &abs)?;
        let zd = self.infer_z(tape, store, &abs)?;
        let s_count = noise.samples().max(1);
        let mut mean = vec![0.0; n];
        let mut second = vec![0.0; n];
        let mut fail = vec![0.0; n];
        for s in 0..s_count {
            let z = zd.sample(tape, &noise.z[s])?;
            let hf = self.infer_h(tape, store, Task::Perf, &abs, z)?;
            let hg = self.infer_h(tape, store, Task::Rel, &abs, z)?;
            let h_f = hf.sample(tape, &noise.h_f[s])?;
            let h_g = hg.sample(tape, &noise.h_g[s])?;
            let dec = self.decode(tape, store, targets, r_f, r_g, h_f, h_g, z)?;
            let (mu, sigma, logit) = (tape.value(dec.mu), tape.value(dec.sigma), tape.value(dec.logit));
            for i in 0..n {
                let (m, sd) = (mu.get(i, 0), sigma.get(i, 0));
                mean[i] += m;
                second[i] += sd * sd + m * m;
                fail[i] += crate::diffcore::Unary::Sigmoid.apply(logit.get(i, 0));
            }
        }
        let k = s_count as f64;
        Ok((0..n)
            .map(|i| {
                let m = mean[i] / k;
                let var = (second[i] / k - m * m).max(0.0);
                Prediction {
                    perf_mean: m,
                    perf_std: var.sqrt().max(self.cfg.sigma_floor),
                    fail_prob: (fail[i] / k).clamp(0.0, 1.0),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 4;

    fn small() -> (ParamStore, NeuralProcess) {
        let mut store = ParamStore::new();
        let cfg = PredictorConfig {
            hidden: 6,
            latent: 5,
            samples: 2,
            ..PredictorConfig::default()
        };
        let np = NeuralProcess::new(&mut store, cfg, D, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, np)
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        Matrix::from_vec(n, D, (0..n * D).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn set(tape: &mut Tape, x: &Matrix, y: &[Option<f64>]) -> TapeSet {
        TapeSet {
            x: tape.constant(x.clone()),
            y: y.to_vec(),
        }
    }

    #[test]
    fn failed_runs_enter_reliability_context_only() {
        let x = Matrix::zeros(3, D);
        let c = ContextSet::new(x, vec![Some(0.1), Some(0.4), None]).unwrap();
        assert_eq!((c.perf_len(), c.rel_len()), (2, 3));
        let (store, np) = small();
        let mut tape = Tape::new();
        let s = set(&mut tape, &Matrix::filled(3, D, 0.3), &[Some(0.1), Some(0.4), None]);
        let abs = np.abstract_context(&mut tape, &store, &s).unwrap();
        let (_, r, u) = abs.perf.unwrap();
        assert_eq!(tape.shape(r), (2, 6));
        assert_eq!(tape.shape(u), (2, 6));
        assert_eq!(tape.shape(abs.rel.1), (3, 6));
    }

    #[test]
    fn identical_pairs_identical_representations() {
        let (store, np) = small();
        let mut tape = Tape::new();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let s = set(&mut tape, &x, &[Some(0.5), Some(0.5)]);
        let abs = np.abstract_context(&mut tape, &store, &s).unwrap();
        let r = tape.value(abs.perf.unwrap().1);
        assert_eq!(r.row(0), r.row(1));
    }

    #[test]
    fn single_and_duplicate_context_aggregation() {
        let (store, np) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xc = random_x(&mut rng, 1);
        let xt = random_x(&mut rng, 3);
        let mut tape = Tape::new();
        let c = set(&mut tape, &xc, &[Some(0.2)]);
        let t = tape.constant(xt.clone());
        let abs = np.abstract_context(&mut tape, &store, &c).unwrap();
        let r = np.aggregate_deterministic(&mut tape, &store, Task::Perf, t, &abs).unwrap();
        let ri = tape.value(abs.perf.unwrap().1).clone();
        for row in tape.value(r).to_rows() {
            for (a, b) in row.iter().zip(ri.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let dup = Matrix::from_rows(&[xc.row(0).to_vec(), xc.row(0).to_vec()]).unwrap();
        let c2 = set(&mut tape, &dup, &[Some(0.2), Some(0.2)]);
        let abs2 = np.abstract_context(&mut tape, &store, &c2).unwrap();
        let r2 = np.aggregate_deterministic(&mut tape, &store, Task::Perf, t, &abs2).unwrap();
        assert!(tape.value(r).max_abs_diff(tape.value(r2)) < 1e-12);
    }

    #[test]
    fn matching_context_dominates_attention() {
        let (mut store, np) = small();
        // Identity-like projections so scores are scaled dot products.
        let mut eye = Matrix::zeros(D, 6);
        for i in 0..D {
            eye.set(i, i, 1.0);
        }
        *store.value_mut(np.attn_f.q.w) = eye.clone();
        *store.value_mut(np.attn_f.k.w) = eye;
        let xc = Matrix::from_rows(&[vec![8.0, 0.0, 0.0, 0.0], vec![0.0, 8.0, 0.0, 0.0], vec![0.0, 0.0, -8.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let t = tape.constant(Matrix::row_vector(&[8.0, 0.0, 0.0, 0.0]));
        let c = tape.constant(xc);
        let w = np.attention_weights(&mut tape, &store, Task::Perf, t, c).unwrap();
        let w = tape.value(w).row(0).to_vec();
        // scores: 64/sqrt(6) vs 0: separation well above 10
        assert!(64.0 / 6f64.sqrt() >= 10.0);
        assert!(w[0] > w[1] && w[0] > w[2] && w[0] > 0.99);
    }

    #[test]
    fn latent_properties() {
        let (store, np) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_x(&mut rng, 4);
        let ys = [Some(0.3), None, Some(-1.0), Some(0.8)];
        let mut tape = Tape::new();
        let s = set(&mut tape, &x, &ys);
        let abs = np.abstract_context(&mut tape, &store, &s).unwrap();
        let z = np.infer_z(&mut tape, &store, &abs).unwrap();
        assert!(tape.value(z.sigma).data().iter().all(|&s| s > 0.0));
        let kl = kl_on_tape(&mut tape, &z, &z).unwrap();
        assert!(tape.value(kl).get(0, 0).abs() < 1e-12);

        // Reordering the context leaves the pooled latent unchanged.
        let perm = [2, 0, 3, 1];
        let xp = Matrix::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let yp: Vec<Option<f64>> = perm.iter().map(|&i| ys[i]).collect();
        let sp = set(&mut tape, &xp, &yp);
        let absp = np.abstract_context(&mut tape, &store, &sp).unwrap();
        let zp = np.infer_z(&mut tape, &store, &absp).unwrap();
        assert!(tape.value(z.mu).max_abs_diff(tape.value(zp.mu)) < 1e-12);

        let zs = z.sample(&mut tape, &[0.0; 5]).unwrap();
        let h1 = np.infer_h(&mut tape, &store, Task::Perf, &abs, zs).unwrap();
        let h2 = np.infer_h(&mut tape, &store, Task::Perf, &abs, zs).unwrap();
        assert_eq!(tape.value(h1.mu), tape.value(h2.mu));
        assert_eq!(tape.value(h1.sigma), tape.value(h2.sigma));
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_diag_gaussian(&[0.0], &[1.0], &[0.0], &[1.0]), 0.0);
        assert!((kl_diag_gaussian(&[0.0], &[1.0], &[1.0], &[1.0]) - 0.5).abs() < 1e-15);
        let mut tape = Tape::new();
        let q = LatentGaussian {
            mu: tape.constant(Matrix::row_vector(&[0.3, -0.2])),
            sigma: tape.constant(Matrix::row_vector(&[0.5, 1.5])),
        };
        let p = LatentGaussian {
            mu: tape.constant(Matrix::row_vector(&[-0.1, 0.4])),
            sigma: tape.constant(Matrix::row_vector(&[1.2, 0.7])),
        };
        let kl = kl_on_tape(&mut tape, &q, &p).unwrap();
        let want = kl_diag_gaussian(&[0.3, -0.2], &[0.5, 1.5], &[-0.1, 0.4], &[1.2, 0.7]);
        assert!((tape.value(kl).get(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn gate_identity_and_saturation() {
        let mut store = ParamStore::new();
        let g = Gate::new(&mut store, "g", 3, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for id in [g.w1.w, g.w2.w] {
            *store.value_mut(id) = Matrix::zeros(3, 3);
        }
        let mut tape = Tape::new();
        let po = tape.constant(Matrix::row_vector(&[0.5, -1.0, 2.0]));
        let pc = tape.constant(Matrix::row_vector(&[3.0, 1.0, -4.0]));
        let out = g.apply(&mut tape, &store, po, pc).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);
        *store.value_mut(g.w1.b) = Matrix::filled(1, 3, 40.0);
        *store.value_mut(g.w2.b) = Matrix::filled(1, 3, 40.0);
        let mut tape = Tape::new();
        let po = tape.constant(Matrix::row_vector(&[0.5, -1.0, 2.0]));
        let pc = tape.constant(Matrix::row_vector(&[3.0, 1.0, -4.0]));
        let out = g.apply(&mut tape, &store, po, pc).unwrap();
        for (a, b) in tape.value(out).data().iter().zip([1.5, 0.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let g = Gate::new(&mut store, "g", 4, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let f = |s: &ParamStore| {
            let mut tape = Tape::new();
            let po = tape.constant(Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.1, 0.2, 0.3]]).unwrap());
            let pc = tape.constant(Matrix::from_rows(&[vec![0.3, 1.0, -0.4, 0.9], vec![-0.7, 0.2, 0.5, 0.0]]).unwrap());
            let out = g.apply(&mut tape, s, po, pc).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let l = tape.sum(sq).unwrap();
            (tape, l)
        };
        let (tape, l) = f(&store);
        tape.backward(l, &mut store).unwrap();
        let analytic: Vec<_> = store.ids().map(|id| (id, store.grad(id))).collect();
        for r in grad_check(|s| { let (t, l) = f(s); t.value(l).get(0, 0) }, &mut store, &analytic, 1e-5, 1e-4, usize::MAX, 0) {
            assert!(r.pass, "{} {:.3e}", r.name, r.value);
        }
    }

    #[test]
    fn bernoulli_term_vanishes_for_confident_correct_predictions() {
        assert!(bernoulli_log_likelihood(true, 60.0).abs() < 1e-20);
        assert!(bernoulli_log_likelihood(false, -60.0).abs() < 1e-20);
        assert!((bernoulli_log_likelihood(true, 0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_terms_vanish_when_context_equals_target() {
        let (store, np) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_x(&mut rng, 4);
        let ys = [Some(0.3), None, Some(-1.0), Some(0.8)];
        let mut tape = Tape::new();
        let s = set(&mut tape, &x, &ys);
        let abs_c = np.abstract_context(&mut tape, &store, &s).unwrap();
        let abs_d = np.abstract_context(&mut tape, &store, &s).unwrap();
        let zc = np.infer_z(&mut tape, &store, &abs_c).unwrap();
        let zd = np.infer_z(&mut tape, &store, &abs_d).unwrap();
        let kl = kl_on_tape(&mut tape, &zd, &zc).unwrap();
        assert!(tape.value(kl).get(0, 0).abs() < 1e-12);
        let z = zd.sample(&mut tape, &[0.3, -0.1, 0.0, 1.0, 0.2]).unwrap();
        for task in [Task::Perf, Task::Rel] {
            let a = np.infer_h(&mut tape, &store, task, &abs_d, z).unwrap();
            let b = np.infer_h(&mut tape, &store, task, &abs_c, z).unwrap();
            let kl = kl_on_tape(&mut tape, &a, &b).unwrap();
            assert!(tape.value(kl).get(0, 0).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_gradient_on_toy_set() {
        let (mut store, np) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xc = random_x(&mut rng, 4);
        let xd = random_x(&mut rng, 4);
        let yc = [Some(0.5), Some(-0.3), None, Some(1.2)];
        let yd = [Some(0.1), None, Some(-0.8), Some(0.4)];
        let noise = LatentNoise::draw(4, 5, &mut rng);
        let f = |s: &ParamStore| {
            let mut tape = Tape::new();
            let c = set(&mut tape, &xc, &yc);
            let d = set(&mut tape, &xd, &yd);
            let l = np.elbo_loss(&mut tape, s, &c, &d, &noise).unwrap();
            (tape, l)
        };
        let (tape, l) = f(&store);
        tape.backward(l, &mut store).unwrap();
        let analytic: Vec<_> = store.ids().map(|id| (id, store.grad(id))).collect();
        for r in grad_check(|s| { let (t, l) = f(s); t.value(l).get(0, 0) }, &mut store, &analytic, 1e-5, 1e-3, usize::MAX, 1) {
            assert!(r.pass, "{} {:.3e}", r.name, r.value);
        }
    }

    #[test]
    fn empty_target_set_is_usage_error() {
        let (store, np) = small();
        let mut tape = Tape::new();
        let c = set(&mut tape, &Matrix::zeros(2, D), &[Some(0.0), None]);
        let d = TapeSet {
            x: tape.constant(Matrix::zeros(0, D)),
            y: vec![],
        };
        assert!(matches!(
            np.elbo_loss(&mut tape, &store, &c, &d, &LatentNoise::zeros(1, 5)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn predictions_are_valid_and_deterministic() {
        let (store, np) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xc = random_x(&mut rng, 5);
        let xt = random_x(&mut rng, 7);
        let run = |noise: &LatentNoise| {
            let mut tape = Tape::new();
            let c = set(&mut tape, &xc, &[Some(0.5), None, None, Some(0.1), Some(2.0)]);
            let t = tape.constant(xt.clone());
            np.predict(&mut tape, &store, &c, t, noise).unwrap()
        };
        let noise = LatentNoise::draw(4, 5, &mut rng);
        let p = run(&noise);
        assert_eq!(p, run(&noise));
        for q in &p {
            assert!(q.perf_std > 0.0 && q.fail_prob > 0.0 && q.fail_prob < 1.0);
        }
        // With one all-zero sample the output is a single deterministic decode.
        let z = LatentNoise::zeros(1, 5);
        assert_eq!(run(&z), run(&z));
    }

    #[test]
    fn all_failed_context_uses_empty_embedding() {
        let (store, np) = small();
        let mut tape = Tape::new();
        let c = set(&mut tape, &Matrix::filled(2, D, 0.5), &[None, None]);
        let t = tape.constant(Matrix::filled(3, D, 0.1));
        let p = np.predict(&mut tape, &store, &c, t, &LatentNoise::zeros(1, 5)).unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn scaler_round_trip() {
        let ys = [0.1f64.ln(), 2.0f64.ln(), 35.0f64.ln(), 0.7f64.ln()];
        let s = TargetScaler::fit(&ys);
        for y in ys {
            assert!((s.inverse(s.forward(y)) - y).abs() < 1e-9);
        }
        assert_eq!(TargetScaler::fit(&[1.0]).std, 1.0);
    }
}
