use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{ContextSet, LatentNoise, NeuralProcess, Prediction, PredictorConfig, TapeSet, TargetScaler};
use crate::diffcore::{AdamConfig, Matrix, ParamSnapshot, ParamStore, Tape, Var};
use crate::encoder::{CorrelationMatrix, Encoder, EncoderConfig, PlanInput};
use crate::error::{Error, Result};
use crate::knobs::Configuration;
use crate::plan::{FeatureVocab, QueryPlan};
use crate::rng;
use crate::tuner::Observation;

pub const CHECKPOINT_FORMAT: &str = "aqetuner-model/1";

/// Rows encoded per tape when no gradients are needed.
const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub adam: AdamConfig,
    /// Largest number of observations in one optimizer step (split evenly
    /// into context and target halves).
    pub batch_cap: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            batch_cap: 128,
        }
    }
}

/// Result of [`Surrogate::fit`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
    pub skipped: bool,
}

/// Serialized [`Surrogate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub config: SurrogateConfig,
    pub knobs: usize,
    pub init_seed: u64,
    pub vocab: FeatureVocab,
    pub correlation: CorrelationMatrix,
    pub scaler: TargetScaler,
    pub plans: Vec<QueryPlan>,
    pub params: ParamSnapshot,
}

/// Encoder and neural process trained end to end over a fixed plan corpus.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub cfg: SurrogateConfig,
    pub scaler: TargetScaler,
    store: ParamStore,
    encoder: Encoder,
    np: NeuralProcess,
    vocab: FeatureVocab,
    plans: BTreeMap<String, PlanInput>,
    raw_plans: Vec<QueryPlan>,
    corr: CorrelationMatrix,
    knobs: usize,
    init_seed: u64,
}

impl Surrogate {
    pub fn new(cfg: SurrogateConfig, plans: &[QueryPlan], corr: CorrelationMatrix, knobs: usize, seed: u64) -> Result<Self> {
        if cfg.batch_cap < 2 {
            return Err(Error::Validation("batch_cap must be at least 2".into()));
        }
        corr.validate()?;
        if corr.knobs.len() != knobs {
            return Err(Error::Validation(format!(
                "correlation matrix covers {} knobs, expected {knobs}",
                corr.knobs.len()
            )));
        }
        let vocab = FeatureVocab::from_plans(plans);
        let inputs = plans
            .iter()
            .map(|p| Ok((p.query_id.clone(), PlanInput::new(p, &vocab, cfg.encoder.eigenvectors)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let input_dim = vocab.dim() + cfg.encoder.eigenvectors + 1;
        let mut init = rng::stream(seed, "model_init", 0);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg.encoder, input_dim, knobs, &mut init)?;
        let np = NeuralProcess::new(&mut store, cfg.predictor, cfg.encoder.dim, &mut init)?;
        Ok(Self {
            cfg,
            scaler: TargetScaler::default(),
            store,
            encoder,
            np,
            vocab,
            plans: inputs,
            raw_plans: plans.to_vec(),
            corr,
            knobs,
            init_seed: seed,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn correlation(&self) -> &CorrelationMatrix {
        &self.corr
    }

    pub fn knobs(&self) -> usize {
        self.knobs
    }

    fn plan(&self, query: &str) -> Result<&PlanInput> {
        self.plans
            .get(query)
            .ok_or_else(|| Error::UnknownQuery(query.to_string()))
    }

    /// Joint encodings for `(query, theta)` items in input order; each
    /// query's plan is encoded once.
    fn encode_items(&self, tape: &mut Tape, store: &ParamStore, items: &[(&str, Configuration)]) -> Result<Var> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, (q, _)) in items.iter().enumerate() {
            groups.entry(q).or_default().push(i);
        }
        let mut parts = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(items.len());
        for (q, idx) in &groups {
            let thetas: Vec<Configuration> = idx.iter().map(|&i| items[i].1.clone()).collect();
            parts.push(self.encoder.encode(tape, store, self.plan(q)?, &self.corr, &thetas)?);
            order.extend_from_slice(idx);
        }
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let mut inverse = vec![0; items.len()];
        for (row, &i) in order.iter().enumerate() {
            inverse[i] = row;
        }
        if inverse.iter().enumerate().all(|(i, &r)| i == r) {
            Ok(stacked)
        } else {
            tape.gather_rows(stacked, &inverse)
        }
    }

    /// Joint encodings of `thetas` for `query`, one row each.
    pub fn encode(&self, query: &str, thetas: &[Configuration]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(thetas.len() * self.cfg.encoder.dim);
        for chunk in thetas.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let x = self.encoder.encode(&mut tape, &self.store, self.plan(query)?, &self.corr, chunk)?;
            data.extend_from_slice(tape.value(x).data());
        }
        Matrix::from_vec(thetas.len(), self.cfg.encoder.dim, data)
    }

    /// Encodes observations into a prediction context.
    pub fn context(&self, history: &[Observation]) -> Result<ContextSet> {
        let mut rows = Vec::with_capacity(history.len());
        for o in history {
            let x = self.encode(&o.query_id, &[o.configuration()?])?;
            rows.push(x.row(0).to_vec());
        }
        let x = if rows.is_empty() {
            Matrix::zeros(0, self.cfg.encoder.dim)
        } else {
            Matrix::from_rows(&rows)?
        };
        ContextSet::new(x, history.iter().map(Observation::log_latency).collect())
    }

    /// Predictions in log-latency units for target encodings `x`.
    pub fn predict(&self, context: &ContextSet, x: &Matrix, noise: &LatentNoise) -> Result<Vec<Prediction>> {
        if x.rows() == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let c = TapeSet {
            x: tape.constant(context.x.clone()),
            y: context.log_latency.iter().map(|y| y.map(|v| self.scaler.forward(v))).collect(),
        };
        let t = tape.constant(x.clone());
        let preds = self.np.predict(&mut tape, &self.store, &c, t, noise)?;
        Ok(preds
            .into_iter()
            .map(|p| Prediction {
                perf_mean: self.scaler.inverse(p.perf_mean),
                perf_std: p.perf_std * self.scaler.std,
                fail_prob: p.fail_prob,
            })
            .collect())
    }

    /// Fresh noise for prediction or training.
    pub fn draw_noise(&self, seed: u64, label: &str, index: u64) -> LatentNoise {
        LatentNoise::draw(self.cfg.predictor.samples, self.cfg.predictor.latent, &mut rng::stream(seed, label, index))
    }

    /// One Adam step on `batch` split into context (first half) and target
    /// (second half) sets; returns the loss before the update.
    fn step(&mut self, batch: &[&Observation], noise: &LatentNoise) -> Result<f64> {
        let items = batch
            .iter()
            .map(|o| Ok((o.query_id.as_str(), o.configuration()?)))
            .collect::<Result<Vec<_>>>()?;
        let n_c = batch.len() / 2;
        let mut tape = Tape::new();
        let x = self.encode_items(&mut tape, &self.store, &items)?;
        let ys: Vec<Option<f64>> = batch
            .iter()
            .map(|o| o.log_latency().map(|v| self.scaler.forward(v)))
            .collect();
        let ctx_idx: Vec<usize> = (0..n_c).collect();
        let tgt_idx: Vec<usize> = (n_c..batch.len()).collect();
        let c = TapeSet {
            x: tape.gather_rows(x, &ctx_idx)?,
            y: ys[..n_c].to_vec(),
        };
        let d = TapeSet {
            x: tape.gather_rows(x, &tgt_idx)?,
            y: ys[n_c..].to_vec(),
        };
        let loss = self.np.elbo_loss(&mut tape, &self.store, &c, &d, noise)?;
        let value = tape.value(loss).get(0, 0);
        self.store.zero_grad();
        tape.backward(loss, &mut self.store)?;
        self.store.adam_step(&self.cfg.adam);
        Ok(value)
    }

    fn check_history(&mut self, history: &[Observation], min: usize) -> bool {
        if history.len() < min.max(4) {
            log::info!("skipping model training: {} observations, need at least 4", history.len());
            return false;
        }
        let ys: Vec<f64> = history.iter().filter_map(Observation::log_latency).collect();
        self.scaler = TargetScaler::fit(&ys);
        true
    }

    /// `epochs` passes over `history`. Each pass shuffles the observations,
    /// cuts them into near-equal batches of at most `batch_cap`, and takes one
    /// optimizer step per batch. Fewer than four observations skip training.
    pub fn fit(&mut self, history: &[Observation], epochs: usize, seed: u64) -> Result<FitReport> {
        if !self.check_history(history, 4) {
            return Ok(FitReport {
                losses: Vec::new(),
                skipped: true,
            });
        }
        let mut shuffle = rng::stream(seed, "fit", 0);
        let n = history.len();
        let batches = n.div_ceil(self.cfg.batch_cap);
        let mut losses = Vec::with_capacity(epochs);
        let mut step_index = self.store.step_count();
        for _ in 0..epochs {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut shuffle);
            let mut total = 0.0;
            for b in 0..batches {
                let lo = b * n / batches;
                let hi = (b + 1) * n / batches;
                let batch: Vec<&Observation> = idx[lo..hi].iter().map(|&i| &history[i]).collect();
                let noise = self.draw_noise(seed, "fit_noise", step_index);
                total += self.step(&batch, &noise)?;
                step_index += 1;
            }
            losses.push(total / batches as f64);
        }
        Ok(FitReport { losses, skipped: false })
    }

    /// `steps` optimizer steps, each on a fresh random batch of at most
    /// `batch_cap` observations. Returns the per-step losses.
    pub fn train_steps(&mut self, history: &[Observation], steps: usize, seed: u64) -> Result<Vec<f64>> {
        if !self.check_history(history, 4) {
            return Ok(Vec::new());
        }
        let mut pick = rng::stream(seed, "refit", self.store.step_count());
        let take = history.len().min(self.cfg.batch_cap);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<&Observation> = history.choose_multiple(&mut pick, take).collect();
            let noise = self.draw_noise(seed, "refit_noise", self.store.step_count());
            losses.push(self.step(&batch, &noise)?);
        }
        Ok(losses)
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.cfg,
            knobs: self.knobs,
            init_seed: self.init_seed,
            vocab: self.vocab.clone(),
            correlation: self.corr.clone(),
            scaler: self.scaler,
            plans: self.raw_plans.clone(),
            params: self.store.snapshot(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Validation(format!("unsupported model format `{}`", ck.format)));
        }
        let mut m = Self::new(ck.config, &ck.plans, ck.correlation.clone(), ck.knobs, ck.init_seed)?;
        if m.vocab != ck.vocab {
            return Err(Error::Validation("checkpoint vocabulary does not match its plans".into()));
        }
        m.store.load_snapshot(&ck.params)?;
        m.scaler = ck.scaler;
        Ok(m)
    }
}
