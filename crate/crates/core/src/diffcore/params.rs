use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adaptive-moment optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Param {
    name: String,
    value: Matrix,
    #[serde(skip)]
    grad: Option<Matrix>,
    m: Matrix,
    v: Matrix,
}

/// Named trainable matrices, their accumulated gradients and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    step: u64,
}

/// Serialized form of a [`ParamStore`]. Every matrix carries its own
/// `rows`/`cols` header so readers can validate shapes before use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub format: String,
    pub step: u64,
    pub params: Vec<SnapshotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

pub const SNAPSHOT_FORMAT: &str = "aqetuner-params/1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: None,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        self.index.insert(name, id);
        Ok(id)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        self.add(name, Matrix::from_vec(fan_in, fan_out, data)?)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, width: usize) -> Result<ParamId> {
        self.add(name, Matrix::zeros(1, width))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    /// Accumulated gradient, or zeros if nothing has been accumulated.
    pub fn grad(&self, id: ParamId) -> Matrix {
        let p = &self.params[id.0];
        p.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()))
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.value.shape(), g.shape());
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// One bias-corrected Adam update over every parameter, then clears the
    /// gradients. Parameters that received no gradient this step are skipped
    /// entirely (their moments are not advanced).
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let Some(g) = p.grad.take() else {
                continue;
            };
            let g = g.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            step: self.step,
            params: self
                .params
                .iter()
                .map(|p| SnapshotEntry {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    value: p.value.data().to_vec(),
                    adam_m: p.m.data().to_vec(),
                    adam_v: p.v.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &ParamSnapshot) -> Result<Self> {
        if snap.format != SNAPSHOT_FORMAT {
            return Err(Error::Validation(format!(
                "unsupported parameter snapshot format `{}`",
                snap.format
            )));
        }
        let mut store = ParamStore::new();
        for e in &snap.params {
            let id = store.add(&e.name, Matrix::from_vec(e.rows, e.cols, e.value.clone())?)?;
            let p = &mut store.params[id.0];
            p.m = Matrix::from_vec(e.rows, e.cols, e.adam_m.clone())?;
            p.v = Matrix::from_vec(e.rows, e.cols, e.adam_v.clone())?;
        }
        store.step = snap.step;
        Ok(store)
    }

    /// Copies values (and optimizer state) from `snap` into an existing store
    /// with the same layout.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<()> {
        let loaded = Self::from_snapshot(snap)?;
        if loaded.params.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "snapshot has {} parameters, model expects {}",
                loaded.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&loaded.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Validation(format!(
                    "snapshot parameter `{}` {:?} does not match `{}` {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
        }
        self.params = loaded.params;
        self.step = loaded.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::row_vector(&[1.5, -2.0])).unwrap();
        store.accumulate(id, &Matrix::zeros(1, 2));
        store.adam_step(&AdamConfig::default());
        assert_eq!(store.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn positive_gradient_decreases_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(0.0)).unwrap();
        store.accumulate(id, &Matrix::scalar(1.0));
        store.adam_step(&AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        assert!(store.value(id).get(0, 0) < 0.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = sum (w_i - c_i)^2, minimizer w = c.
        let target = [3.0, -1.25, 0.5];
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::zeros(1, 3)).unwrap();
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        for _ in 0..4000 {
            let w = store.value(id).clone();
            let g: Vec<f64> = w.data().iter().zip(&target).map(|(w, c)| 2.0 * (w - c)).collect();
            store.accumulate(id, &Matrix::row_vector(&g));
            store.adam_step(&cfg);
        }
        for (w, c) in store.value(id).data().iter().zip(&target) {
            assert!((w - c).abs() < 1e-3, "{w} vs {c}");
        }
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add_weight("w", 10, 22, &mut rng).unwrap();
        let b = store.add_bias("b", 22).unwrap();
        let limit = (6.0f64 / 32.0).sqrt();
        assert!(store.value(w).data().iter().all(|v| v.abs() <= limit));
        assert!(store.value(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::zeros(1, 1)).unwrap();
        assert!(store.add("w", Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn snapshot_round_trip_preserves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let id = store.add_weight("w", 3, 2, &mut rng).unwrap();
        store.accumulate(id, &Matrix::filled(3, 2, 0.5));
        store.adam_step(&AdamConfig::default());
        let json = serde_json::to_string(&store.snapshot()).unwrap();
        let back: ParamSnapshot = serde_json::from_str(&json).unwrap();
        let restored = ParamStore::from_snapshot(&back).unwrap();
        assert_eq!(restored.value(id), store.value(id));
        assert_eq!(restored.step_count(), 1);
        assert_eq!(restored.name(id), "w");
    }

    #[test]
    fn snapshot_shape_mismatch_rejected() {
        let mut a = ParamStore::new();
        a.add("w", Matrix::zeros(2, 2)).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Matrix::zeros(3, 2)).unwrap();
        assert!(a.load_snapshot(&b.snapshot()).is_err());
    }
}
