//! Knob search space: definitions, min-max normalization to `[0, 1]`, and the
//! weighted one-hot knob representation.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnobKind {
    Continuous,
    Discrete,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnobSpec {
    pub name: String,
    pub kind: KnobKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

/// A raw (engine-facing) knob value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Number(f64),
    Category(String),
}

impl std::fmt::Display for RawValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RawValue::Number(x) => write!(f, "{x}"),
            RawValue::Category(c) => f.write_str(c),
        }
    }
}

/// Normalized knob vector; every coordinate lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(Vec<f64>);

impl Configuration {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("configuration coordinate {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    /// Clamps every coordinate into `[0, 1]` (NaN becomes 0).
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(
            values
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnobSpace {
    pub knobs: Vec<KnobSpec>,
}

impl KnobSpec {
    fn bounds(&self) -> Result<(f64, f64)> {
        match (self.min, self.max) {
            (Some(lo), Some(hi)) if lo < hi && lo.is_finite() && hi.is_finite() => Ok((lo, hi)),
            (Some(_), Some(_)) => Err(Error::config(
                format!("knobs.{}", self.name),
                "min must be finite and strictly below max",
            )),
            (None, _) => Err(Error::config(format!("knobs.{}.min", self.name), "missing field")),
            (_, None) => Err(Error::config(format!("knobs.{}.max", self.name), "missing field")),
        }
    }

    fn categories(&self) -> Result<&[String]> {
        match &self.categories {
            Some(c) if !c.is_empty() => Ok(c),
            Some(_) => Err(Error::config(
                format!("knobs.{}.categories", self.name),
                "category list is empty",
            )),
            None => Err(Error::config(
                format!("knobs.{}.categories", self.name),
                "missing field",
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            KnobKind::Continuous | KnobKind::Discrete => self.bounds().map(|_| ()),
            KnobKind::Categorical => self.categories().map(|_| ()),
        }
    }

    pub fn normalize(&self, raw: &RawValue) -> Result<f64> {
        let out_of_domain =
            |detail: String| Error::Validation(format!("knob `{}`: {detail}", self.name));
        match (self.kind, raw) {
            (KnobKind::Continuous | KnobKind::Discrete, RawValue::Number(v)) => {
                let (lo, hi) = self.bounds()?;
                if !(lo..=hi).contains(v) {
                    return Err(out_of_domain(format!("{v} outside [{lo}, {hi}]")));
                }
                Ok((v - lo) / (hi - lo))
            }
            (KnobKind::Categorical, RawValue::Category(c)) => {
                let cats = self.categories()?;
                let idx = cats
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| out_of_domain(format!("unknown category `{c}`")))?;
                Ok(if cats.len() == 1 {
                    0.0
                } else {
                    idx as f64 / (cats.len() - 1) as f64
                })
            }
            (_, other) => Err(out_of_domain(format!("value `{other}` has the wrong type"))),
        }
    }

    /// Maps a normalized coordinate back to the knob's domain. Discrete knobs
    /// snap to the nearest integer, categorical knobs to the nearest index.
    pub fn denormalize(&self, x: f64) -> Result<RawValue> {
        let x = x.clamp(0.0, 1.0);
        match self.kind {
            KnobKind::Continuous => {
                let (lo, hi) = self.bounds()?;
                Ok(RawValue::Number(lo + x * (hi - lo)))
            }
            KnobKind::Discrete => {
                let (lo, hi) = self.bounds()?;
                Ok(RawValue::Number((lo + x * (hi - lo)).round().clamp(lo.ceil(), hi.floor())))
            }
            KnobKind::Categorical => {
                let cats = self.categories()?;
                let idx = (x * (cats.len() - 1) as f64).round() as usize;
                Ok(RawValue::Category(cats[idx.min(cats.len() - 1)].clone()))
            }
        }
    }
}

impl KnobSpace {
    pub fn new(knobs: Vec<KnobSpec>) -> Result<Self> {
        let space = Self { knobs };
        space.validate()?;
        Ok(space)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let space: KnobSpace = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knobs.is_empty() {
            return Err(Error::config("knobs", "knob space is empty"));
        }
        let mut seen = HashSet::new();
        for k in &self.knobs {
            if !seen.insert(k.name.as_str()) {
                return Err(Error::config(format!("knobs.{}", k.name), "duplicate knob name"));
            }
            k.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.knobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knobs.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.knobs.iter().map(|k| k.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.knobs.iter().position(|k| k.name == name)
    }

    pub fn normalize(&self, raw: &[RawValue]) -> Result<Configuration> {
        if raw.len() != self.knobs.len() {
            return Err(Error::Validation(format!(
                "expected {} knob values, got {}",
                self.knobs.len(),
                raw.len()
            )));
        }
        let values = self
            .knobs
            .iter()
            .zip(raw)
            .map(|(k, v)| k.normalize(v))
            .collect::<Result<Vec<_>>>()?;
        Configuration::new(values)
    }

    pub fn denormalize(&self, theta: &Configuration) -> Result<Vec<RawValue>> {
        if theta.len() != self.knobs.len() {
            return Err(Error::Validation(format!(
                "expected {} knob coordinates, got {}",
                self.knobs.len(),
                theta.len()
            )));
        }
        self.knobs
            .iter()
            .zip(theta.values())
            .map(|(k, &x)| k.denormalize(x))
            .collect()
    }

    /// The configuration the engine actually runs for `theta`, i.e. with
    /// discrete and categorical coordinates snapped.
    pub fn snap(&self, theta: &Configuration) -> Result<Configuration> {
        self.normalize(&self.denormalize(theta)?)
    }
}

/// `n` vectors of length `n`; vector `i` carries `theta[i]` at position `i`.
pub fn weighted_one_hot(theta: &Configuration) -> Vec<Vec<f64>> {
    let n = theta.len();
    theta
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut v = vec![0.0; n];
            v[i] = x;
            v
        })
        .collect()
}

/// `count` i.i.d. uniform configurations in `[0, 1]^n`.
pub fn sample_uniform<R: Rng + ?Sized>(space: &KnobSpace, count: usize, rng: &mut R) -> Vec<Configuration> {
    (0..count)
        .map(|_| Configuration((0..space.len()).map(|_| rng.random::<f64>()).collect()))
        .collect()
}

/// Adds `U[-radius, radius]` noise to each coordinate and clamps to `[0, 1]`.
pub fn perturb<R: Rng + ?Sized>(theta: &Configuration, radius: f64, rng: &mut R) -> Configuration {
    Configuration::clamped(
        theta
            .values()
            .iter()
            .map(|&x| {
                let d = if radius > 0.0 {
                    rng.random_range(-radius..=radius)
                } else {
                    0.0
                };
                x + d
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cont(name: &str, lo: f64, hi: f64) -> KnobSpec {
        KnobSpec {
            name: name.into(),
            kind: KnobKind::Continuous,
            min: Some(lo),
            max: Some(hi),
            categories: None,
        }
    }

    fn space() -> KnobSpace {
        KnobSpace::new(vec![
            cont("mem", 100.0, 500.0),
            KnobSpec {
                name: "threads".into(),
                kind: KnobKind::Discrete,
                min: Some(1.0),
                max: Some(9.0),
                categories: None,
            },
            KnobSpec {
                name: "flag".into(),
                kind: KnobKind::Categorical,
                min: None,
                max: None,
                categories: Some(vec!["off".into(), "on".into()]),
            },
        ])
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        let s = space();
        let c = s
            .normalize(&[RawValue::Number(300.0), RawValue::Number(1.0), RawValue::Category("on".into())])
            .unwrap();
        assert_eq!(c.values(), &[0.5, 0.0, 1.0]);
    }

    #[test]
    fn single_category_normalizes_to_zero() {
        let k = KnobSpec {
            name: "only".into(),
            kind: KnobKind::Categorical,
            min: None,
            max: None,
            categories: Some(vec!["x".into()]),
        };
        assert_eq!(k.normalize(&RawValue::Category("x".into())).unwrap(), 0.0);
    }

    #[test]
    fn out_of_domain_rejected() {
        let s = space();
        let bad = [RawValue::Number(600.0), RawValue::Number(1.0), RawValue::Category("on".into())];
        assert!(matches!(s.normalize(&bad), Err(Error::Validation(_))));
        let bad = [RawValue::Number(200.0), RawValue::Number(1.0), RawValue::Category("maybe".into())];
        assert!(s.normalize(&bad).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KnobSpace::new(vec![cont("a", 1.0, 1.0)]).is_err());
        assert!(KnobSpace::new(vec![cont("a", 0.0, 1.0), cont("a", 0.0, 2.0)]).is_err());
        let err = KnobSpace::from_json(r#"{"knobs":[{"name":"a","kind":"continuous","max":3}]}"#).unwrap_err();
        assert!(err.to_string().contains("knobs.a.min"), "{err}");
    }

    #[test]
    fn weighted_one_hot_examples() {
        let th = Configuration::new(vec![0.3, 0.6, 0.9]).unwrap();
        assert_eq!(
            weighted_one_hot(&th),
            vec![vec![0.3, 0.0, 0.0], vec![0.0, 0.6, 0.0], vec![0.0, 0.0, 0.9]]
        );
        let zero = Configuration::new(vec![0.0; 3]).unwrap();
        assert!(weighted_one_hot(&zero).iter().flatten().all(|&x| x == 0.0));
        assert_eq!(weighted_one_hot(&Configuration::new(vec![0.7]).unwrap()), vec![vec![0.7]]);
    }

    #[test]
    fn uniform_sampling_is_seeded_and_centered() {
        let s = space();
        let a = sample_uniform(&s, 10_000, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_uniform(&s, 10_000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        for j in 0..s.len() {
            let mean = a.iter().map(|c| c.values()[j]).sum::<f64>() / a.len() as f64;
            assert!((0.45..=0.55).contains(&mean), "coordinate {j} mean {mean}");
        }
        assert!(a.iter().flat_map(|c| c.values()).all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn perturb_with_zero_radius_is_identity() {
        let th = Configuration::new(vec![0.2, 0.8, 1.0]).unwrap();
        assert_eq!(perturb(&th, 0.0, &mut ChaCha8Rng::seed_from_u64(4)), th);
    }

    proptest! {
        #[test]
        fn continuous_round_trip(v in 100.0f64..=500.0) {
            let k = cont("mem", 100.0, 500.0);
            let x = k.normalize(&RawValue::Number(v)).unwrap();
            match k.denormalize(x).unwrap() {
                RawValue::Number(back) => prop_assert!((back - v).abs() < 1e-12),
                other => prop_assert!(false, "unexpected {other:?}"),
            }
        }

        #[test]
        fn discrete_and_categorical_round_trip_exactly(t in 1u32..=9, on in any::<bool>()) {
            let s = space();
            let raw = vec![
                RawValue::Number(250.0),
                RawValue::Number(t as f64),
                RawValue::Category(if on { "on" } else { "off" }.into()),
            ];
            let back = s.denormalize(&s.normalize(&raw).unwrap()).unwrap();
            prop_assert_eq!(&back[1..], &raw[1..]);
        }

        #[test]
        fn perturb_stays_in_bounds(
            xs in proptest::collection::vec(0.0f64..=1.0, 1..12),
            radius in 1e-6f64..0.5,
            seed in any::<u64>(),
        ) {
            let th = Configuration::new(xs).unwrap();
            let p = perturb(&th, radius, &mut ChaCha8Rng::seed_from_u64(seed));
            for (a, b) in th.values().iter().zip(p.values()) {
                prop_assert!((0.0..=1.0).contains(b));
                prop_assert!((a - b).abs() <= radius + 1e-15);
            }
        }

        #[test]
        fn weighted_one_hot_injective_on_positive(
            a in proptest::collection::vec(1e-6f64..=1.0, 4),
            b in proptest::collection::vec(1e-6f64..=1.0, 4),
        ) {
            let ca = Configuration::new(a.clone()).unwrap();
            let cb = Configuration::new(b.clone()).unwrap();
            prop_assert_eq!(weighted_one_hot(&ca) == weighted_one_hot(&cb), a == b);
        }
    }
}
