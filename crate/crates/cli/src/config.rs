//! Session configuration files.
//!
//! One `key = value` pair per line. Blank lines and lines starting with `#`
//! are ignored; whitespace around keys and values is trimmed. Keys may not
//! repeat and unknown keys are rejected. Paths are resolved against the
//! directory holding the config file. `scenario` also accepts
//! `builtin:<name>` for the scenarios bundled with the library.
//!
//! | key | default |
//! |-----|---------|
//! | `scenario` | required |
//! | `knob_space` | the scenario's knobs |
//! | `seed` | `0` |
//! | `queries` | every query in the scenario (comma separated) |
//! | `out_dir` | `out` |
//! | `budget.max_evaluations` | `200` (`none` for no limit) |
//! | `budget.max_duration_s` | none |
//! | `budget.candidates` | `256` |
//! | `warmstart.samples` | `20` |
//! | `pso.particles`, `pso.mu`, `pso.c1`, `pso.c2` | `3`, `0.5`, `2`, `2` |
//! | `model.dim`, `model.ffn_hidden`, `model.eigenvectors` | `32`, `32`, `10` |
//! | `model.hidden`, `model.latent`, `model.samples` | `32`, `32`, `4` |
//! | `model.lr`, `model.batch_cap` | `0.003`, `128` |
//! | `model.initial_epochs`, `model.refit_steps` | `100`, `50` |
//! | `correlation.epsilon`, `correlation.lambda`, `correlation.degree` | `0.01`, `0.001`, `2` |
//! | `correlation.shapley_budget`, `correlation.background`, `correlation.eval_points` | `2000`, `32`, `16` |
//! | `sampler.perturbed_fraction`, `sampler.radius` | `0.25`, `0.1` |

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use aqetuner_core::engine::Scenario;
use aqetuner_core::knobs::KnobSpace;
use aqetuner_core::tuner::TunerConfig;

const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioSource {
    Builtin(String),
    File(PathBuf),
}

impl fmt::Display for ScenarioSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioSource::Builtin(name) => write!(f, "{BUILTIN_PREFIX}{name}"),
            ScenarioSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub scenario: ScenarioSource,
    pub knob_space: Option<PathBuf>,
    pub seed: u64,
    pub queries: Option<Vec<String>>,
    pub out_dir: PathBuf,
    pub tuner: TunerConfig,
}

#[derive(Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| err(Some(line), format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn optional<T: FromStr>(key: &str, value: &str, line: usize) -> Result<Option<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value, line).map(Some)
    }
}

impl SessionConfig {
    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (k, v) = trimmed
                .split_once('=')
                .ok_or_else(|| err(Some(line), format!("expected `key = value`, got `{trimmed}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err(Some(line), "empty key"));
            }
            if let Some((_, first)) = entries.insert(k.to_string(), (v.to_string(), line)) {
                return Err(err(Some(line), format!("`{k}` already set on line {first}")));
            }
        }

        let mut cfg = SessionConfig {
            scenario: ScenarioSource::Builtin(String::new()),
            knob_space: None,
            seed: 0,
            queries: None,
            out_dir: base.join("out"),
            tuner: TunerConfig::default(),
        };
        let mut scenario = None;
        let t = &mut cfg.tuner;
        for (key, (value, line)) in &entries {
            let (k, v, l) = (key.as_str(), value.as_str(), *line);
            match k {
                "scenario" => {
                    scenario = Some(match v.strip_prefix(BUILTIN_PREFIX) {
                        Some(name) => ScenarioSource::Builtin(name.to_string()),
                        None => ScenarioSource::File(base.join(v)),
                    })
                }
                "knob_space" => cfg.knob_space = Some(base.join(v)),
                "seed" => cfg.seed = parse(k, v, l)?,
                "queries" => {
                    let qs: Vec<String> = v.split(',').map(|q| q.trim().to_string()).filter(|q| !q.is_empty()).collect();
                    if qs.is_empty() {
                        return Err(err(Some(l), "`queries` lists no query"));
                    }
                    cfg.queries = Some(qs);
                }
                "out_dir" => cfg.out_dir = base.join(v),
                "budget.max_evaluations" => t.budget.max_evaluations = optional(k, v, l)?,
                "budget.max_duration_s" => {
                    t.budget.max_duration = optional::<f64>(k, v, l)?
                        .map(|s| Duration::try_from_secs_f64(s).map_err(|e| err(Some(l), format!("`{k}`: {e}"))))
                        .transpose()?
                }
                "budget.candidates" => t.budget.candidates = parse(k, v, l)?,
                "warmstart.samples" => t.warm_start_samples = parse(k, v, l)?,
                "pso.particles" => t.pso.particles = parse(k, v, l)?,
                "pso.mu" => t.pso.mu = parse(k, v, l)?,
                "pso.c1" => t.pso.c1 = parse(k, v, l)?,
                "pso.c2" => t.pso.c2 = parse(k, v, l)?,
                "model.dim" => t.surrogate.encoder.dim = parse(k, v, l)?,
                "model.ffn_hidden" => t.surrogate.encoder.ffn_hidden = parse(k, v, l)?,
                "model.eigenvectors" => t.surrogate.encoder.eigenvectors = parse(k, v, l)?,
                "model.hidden" => t.surrogate.predictor.hidden = parse(k, v, l)?,
                "model.latent" => t.surrogate.predictor.latent = parse(k, v, l)?,
                "model.samples" => t.surrogate.predictor.samples = parse(k, v, l)?,
                "model.lr" => t.surrogate.adam.lr = parse(k, v, l)?,
                "model.batch_cap" => t.surrogate.batch_cap = parse(k, v, l)?,
                "model.initial_epochs" => t.initial_epochs = parse(k, v, l)?,
                "model.refit_steps" => t.refit_steps = parse(k, v, l)?,
                "correlation.epsilon" => t.correlation.epsilon = parse(k, v, l)?,
                "correlation.lambda" => t.correlation.lambda = parse(k, v, l)?,
                "correlation.degree" => t.correlation.basis.degree = parse(k, v, l)?,
                "correlation.shapley_budget" => t.correlation.shapley_budget = parse(k, v, l)?,
                "correlation.background" => t.correlation.background = parse(k, v, l)?,
                "correlation.eval_points" => t.correlation.eval_points = parse(k, v, l)?,
                "sampler.perturbed_fraction" => t.sampler.perturbed_fraction = parse(k, v, l)?,
                "sampler.radius" => t.sampler.radius = parse(k, v, l)?,
                _ => return Err(err(Some(l), format!("unknown key `{k}`"))),
            }
        }
        cfg.scenario = scenario.ok_or_else(|| err(None, "missing required key `scenario`"))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(None, format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| err(e.line, format!("{}: {}", path.display(), e.message)))
    }

    fn check(&self) -> Result<(), ConfigError> {
        if let ScenarioSource::File(p) = &self.scenario {
            if !p.is_file() {
                return Err(err(None, format!("scenario file {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.knob_space {
            if !p.is_file() {
                return Err(err(None, format!("knob space file {} does not exist", p.display())));
            }
        }
        let c = &self.tuner.correlation;
        if c.basis.degree == 0 || !(c.epsilon >= 0.0) || !(c.lambda >= 0.0) {
            return Err(err(None, "correlation: degree must be positive, epsilon and lambda nonnegative"));
        }
        let s = &self.tuner.sampler;
        if !(0.0..=1.0).contains(&s.perturbed_fraction) || !(s.radius >= 0.0) {
            return Err(err(None, "sampler: perturbed_fraction must lie in [0,1] and radius be nonnegative"));
        }
        self.tuner.validate().map_err(|e| err(None, e.to_string()))
    }

    /// Loads the scenario and checks the optional knob-space file against it.
    pub fn load_scenario(&self) -> aqetuner_core::Result<Scenario> {
        let scenario = match &self.scenario {
            ScenarioSource::Builtin(name) => Scenario::bundled(name)?,
            ScenarioSource::File(p) => Scenario::load(p)?,
        };
        if let Some(p) = &self.knob_space {
            let space = KnobSpace::load(p)?;
            if space != scenario.knob_space()? {
                return Err(aqetuner_core::Error::Config {
                    path: p.display().to_string(),
                    detail: "knob space does not match the scenario's knobs".into(),
                });
            }
        }
        Ok(scenario)
    }
}
