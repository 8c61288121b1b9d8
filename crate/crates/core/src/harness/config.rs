//! Flat `key = value` configuration with dotted section names.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so that typos surface as config errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::classifiers::ClassifierConfig;
use crate::curriculum::CltvConfig;
use crate::error::{Error, Result};
use crate::mdp::{EnvKind, EnvSpec};
use crate::neural::Activation;
use crate::offline::CqlConfig;
use crate::scoring::{GradientMode, TsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Random,
    Medium,
    Expert,
}

impl Tier {
    /// Exploration rate of the epsilon-greedy behaviour policy.
    pub fn epsilon(self) -> f64 {
        match self {
            Tier::Random => 1.0,
            Tier::Medium => 0.5,
            Tier::Expert => 0.05,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(Tier::Random),
            "medium" => Some(Tier::Medium),
            "expert" => Some(Tier::Expert),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Tier::Random => "random",
            Tier::Medium => "medium",
            Tier::Expert => "expert",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source_tier: Tier,
    pub target_tier: Tier,
    pub source_trajectories: usize,
    pub target_trajectories: usize,
    pub horizon: usize,
    pub source_frac: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub horizon: usize,
    /// Extra metrics row every this many training steps (0 = per epoch only).
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub mismatch: f64,
    pub seed: u64,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub ts: TsConfig,
    pub cltv: CltvConfig,
    pub cql: CqlConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub record_wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gamma = 0.99;
        Self {
            env: EnvSpec::grid(5, 5, 0.1).with_gamma(gamma),
            mismatch: 0.3,
            seed: 0,
            data: DataConfig {
                source_tier: Tier::Random,
                target_tier: Tier::Medium,
                source_trajectories: 180,
                target_trajectories: 20,
                horizon: 50,
                source_frac: 0.9,
            },
            classifier: ClassifierConfig { learning_rate: 1e-3, epochs: 10, ..ClassifierConfig::default() },
            ts: TsConfig::default(),
            cltv: CltvConfig { gamma, ..CltvConfig::default() },
            cql: CqlConfig { gamma, ..CqlConfig::default() },
            eval: EvalConfig { n_episodes: 100, horizon: 200, every: 100 },
            sweep: SweepConfig { deltas: vec![0.2, 0.4, 0.6, 0.8, 1.0], lambdas: vec![0.2, 0.4, 0.6, 0.8, 1.0] },
            record_wall_clock: false,
        }
    }
}

fn err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| err(key, format!("cannot parse {v:?}: {e}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses `key = value` lines into an ordered map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (w, h, n) = match self.env.kind {
            EnvKind::Chain { n } => (n, 1, n),
            EnvKind::Grid { width, height } | EnvKind::Cliff { width, height } => (width, height, width * height),
        };
        match key {
            "seed" => self.seed = num(key, v)?,
            "env.kind" => {
                self.env.kind = match v {
                    "chain" => EnvKind::Chain { n },
                    "grid" => EnvKind::Grid { width: w, height: h.max(2) },
                    "cliff" => EnvKind::Cliff { width: w, height: h.max(2) },
                    _ => return Err(err(key, format!("unknown family {v:?} (chain, grid, cliff)"))),
                }
            }
            "env.width" | "env.height" | "env.n" => {
                let x: usize = num(key, v)?;
                self.env.kind = match (self.env.kind, key) {
                    (EnvKind::Chain { .. }, "env.n") => EnvKind::Chain { n: x },
                    (EnvKind::Grid { height, .. }, "env.width") => EnvKind::Grid { width: x, height },
                    (EnvKind::Grid { width, .. }, "env.height") => EnvKind::Grid { width, height: x },
                    (EnvKind::Cliff { height, .. }, "env.width") => EnvKind::Cliff { width: x, height },
                    (EnvKind::Cliff { width, .. }, "env.height") => EnvKind::Cliff { width, height: x },
                    _ => return Err(err(key, "does not apply to the selected env.kind (set env.kind first)")),
                }
            }
            "env.slip" => self.env.slip = num(key, v)?,
            "env.gamma" => {
                let g: f64 = num(key, v)?;
                self.env.gamma = g;
                self.cltv.gamma = g;
                self.cql.gamma = g;
            }
            "env.mismatch" => self.mismatch = num(key, v)?,
            "data.source_tier" | "data.target_tier" => {
                let t = Tier::parse(v).ok_or_else(|| err(key, format!("unknown tier {v:?}")))?;
                if key == "data.source_tier" {
                    self.data.source_tier = t;
                } else {
                    self.data.target_tier = t;
                }
            }
            "data.source_trajectories" => self.data.source_trajectories = num(key, v)?,
            "data.target_trajectories" => self.data.target_trajectories = num(key, v)?,
            "data.horizon" => self.data.horizon = num(key, v)?,
            "data.source_frac" => self.data.source_frac = num(key, v)?,
            "classifier.hidden" => self.classifier.hidden = list(key, v)?,
            "classifier.activation" => self.classifier.activation = activation(key, v)?,
            "classifier.learning_rate" => self.classifier.learning_rate = num(key, v)?,
            "classifier.batch_size" => self.classifier.batch_size = num(key, v)?,
            "classifier.epochs" => self.classifier.epochs = num(key, v)?,
            "ts.hidden" => self.ts.hidden = list(key, v)?,
            "ts.delta" => self.ts.delta_mix = num(key, v)?,
            "ts.batch_size" => self.ts.batch_size = num(key, v)?,
            "ts.steps" => self.ts.steps = num(key, v)?,
            "ts.learning_rate" => self.ts.learning_rate = num(key, v)?,
            "ts.gradient_mode" => {
                self.ts.gradient_mode = match v {
                    "full" => GradientMode::Full,
                    "score-function-only" => GradientMode::ScoreFunctionOnly,
                    _ => return Err(err(key, format!("unknown mode {v:?} (full, score-function-only)"))),
                }
            }
            "cltv.lambda" => self.cltv.lambda = num(key, v)?,
            "cltv.m_ratio" => self.cltv.m_ratio = num(key, v)?,
            "cltv.epochs" => self.cltv.epochs = num(key, v)?,
            "cltv.steps_per_epoch" => self.cltv.steps_per_epoch = num(key, v)?,
            "cltv.td_alpha" => self.cltv.td_alpha = num(key, v)?,
            "cltv.target_steps" => self.cltv.target_steps = num(key, v)?,
            "cql.learning_rate" => self.cql.learning_rate = num(key, v)?,
            "cql.alpha" => self.cql.alpha_cql = num(key, v)?,
            "cql.tau" => self.cql.tau = num(key, v)?,
            "cql.temperature" => self.cql.temperature = num(key, v)?,
            "cql.batch_size" => self.cql.batch_size = num(key, v)?,
            "eval.n_episodes" => self.eval.n_episodes = num(key, v)?,
            "eval.horizon" => self.eval.horizon = num(key, v)?,
            "eval.every" => self.eval.every = num(key, v)?,
            "sweep.delta" => self.sweep.deltas = list(key, v)?,
            "sweep.lambda" => self.sweep.lambdas = list(key, v)?,
            "output.record_wall_clock" => self.record_wall_clock = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(err(key, format!("{x} outside [0, 1]")))
            }
        };
        let positive = |key: &str, x: usize| if x > 0 { Ok(()) } else { Err(err(key, "must be positive")) };
        if !(0.0..1.0).contains(&self.env.slip) {
            return Err(err("env.slip", format!("{} outside [0, 1)", self.env.slip)));
        }
        if !(0.0..1.0).contains(&self.env.gamma) {
            return Err(err("env.gamma", format!("{} outside [0, 1)", self.env.gamma)));
        }
        unit("env.mismatch", self.mismatch)?;
        if !(self.data.source_frac > 0.0 && self.data.source_frac < 1.0) {
            return Err(err("data.source_frac", format!("{} outside (0, 1)", self.data.source_frac)));
        }
        positive("data.source_trajectories", self.data.source_trajectories)?;
        positive("data.target_trajectories", self.data.target_trajectories)?;
        positive("data.horizon", self.data.horizon)?;
        positive("classifier.batch_size", self.classifier.batch_size)?;
        positive("ts.batch_size", self.ts.batch_size)?;
        positive("cql.batch_size", self.cql.batch_size)?;
        positive("eval.n_episodes", self.eval.n_episodes)?;
        unit("ts.delta", self.ts.delta_mix)?;
        unit("cltv.lambda", self.cltv.lambda)?;
        if !(self.cltv.m_ratio > 0.0 && self.cltv.m_ratio <= 1.0) {
            return Err(err("cltv.m_ratio", format!("{} outside (0, 1]", self.cltv.m_ratio)));
        }
        for (k, x) in [
            ("classifier.learning_rate", self.classifier.learning_rate),
            ("ts.learning_rate", self.ts.learning_rate),
            ("cql.learning_rate", self.cql.learning_rate),
            ("cql.temperature", self.cql.temperature),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(err(k, format!("{x} must be positive")));
            }
        }
        if !(self.cql.tau > 0.0 && self.cql.tau <= 1.0) {
            return Err(err("cql.tau", format!("{} outside (0, 1]", self.cql.tau)));
        }
        if !(self.cql.alpha_cql >= 0.0) {
            return Err(err("cql.alpha", "must be non-negative"));
        }
        for (k, vals) in [("sweep.delta", &self.sweep.deltas), ("sweep.lambda", &self.sweep.lambdas)] {
            for &x in vals.iter() {
                unit(k, x)?;
            }
        }
        crate::mdp::make_env(&self.env).map_err(|e| Error::Config(format!("env: {e}")))?;
        Ok(())
    }

    /// Canonical text form: every key, sorted, with its effective value.
    /// The seed is left out so runs over several seeds share one hash.
    pub fn canonical(&self) -> String {
        let mut m = BTreeMap::new();
        let (kind, dims) = match self.env.kind {
            EnvKind::Chain { n } => ("chain", vec![("env.n", n)]),
            EnvKind::Grid { width, height } => ("grid", vec![("env.width", width), ("env.height", height)]),
            EnvKind::Cliff { width, height } => ("cliff", vec![("env.width", width), ("env.height", height)]),
        };
        m.insert("env.kind", kind.to_string());
        for (k, v) in dims {
            m.insert(k, v.to_string());
        }
        m.insert("env.slip", format!("{:?}", self.env.slip));
        m.insert("env.gamma", format!("{:?}", self.env.gamma));
        m.insert("env.mismatch", format!("{:?}", self.mismatch));
        m.insert("data.source_tier", self.data.source_tier.as_str().into());
        m.insert("data.target_tier", self.data.target_tier.as_str().into());
        m.insert("data.source_trajectories", self.data.source_trajectories.to_string());
        m.insert("data.target_trajectories", self.data.target_trajectories.to_string());
        m.insert("data.horizon", self.data.horizon.to_string());
        m.insert("data.source_frac", format!("{:?}", self.data.source_frac));
        m.insert("classifier.hidden", fmt_list(&self.classifier.hidden));
        m.insert("classifier.activation", activation_name(self.classifier.activation).into());
        m.insert("classifier.learning_rate", format!("{:?}", self.classifier.learning_rate));
        m.insert("classifier.batch_size", self.classifier.batch_size.to_string());
        m.insert("classifier.epochs", self.classifier.epochs.to_string());
        m.insert("ts.hidden", fmt_list(&self.ts.hidden));
        m.insert("ts.delta", format!("{:?}", self.ts.delta_mix));
        m.insert("ts.batch_size", self.ts.batch_size.to_string());
        m.insert("ts.steps", self.ts.steps.to_string());
        m.insert("ts.learning_rate", format!("{:?}", self.ts.learning_rate));
        m.insert(
            "ts.gradient_mode",
            match self.ts.gradient_mode {
                GradientMode::Full => "full",
                GradientMode::ScoreFunctionOnly => "score-function-only",
            }
            .into(),
        );
        m.insert("cltv.lambda", format!("{:?}", self.cltv.lambda));
        m.insert("cltv.m_ratio", format!("{:?}", self.cltv.m_ratio));
        m.insert("cltv.epochs", self.cltv.epochs.to_string());
        m.insert("cltv.steps_per_epoch", self.cltv.steps_per_epoch.to_string());
        m.insert("cltv.td_alpha", format!("{:?}", self.cltv.td_alpha));
        m.insert("cltv.target_steps", self.cltv.target_steps.to_string());
        m.insert("cql.learning_rate", format!("{:?}", self.cql.learning_rate));
        m.insert("cql.alpha", format!("{:?}", self.cql.alpha_cql));
        m.insert("cql.tau", format!("{:?}", self.cql.tau));
        m.insert("cql.temperature", format!("{:?}", self.cql.temperature));
        m.insert("cql.batch_size", self.cql.batch_size.to_string());
        m.insert("eval.n_episodes", self.eval.n_episodes.to_string());
        m.insert("eval.horizon", self.eval.horizon.to_string());
        m.insert("eval.every", self.eval.every.to_string());
        m.insert("sweep.delta", fmt_list(&self.sweep.deltas));
        m.insert("sweep.lambda", fmt_list(&self.sweep.lambdas));
        m.insert("output.record_wall_clock", self.record_wall_clock.to_string());
        let mut s = String::new();
        for (k, v) in m {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn activation(key: &str, v: &str) -> Result<Activation> {
    match v {
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        _ => Err(err(key, format!("unknown activation {v:?}"))),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
    }
}

/// Stream seed for a named component.
pub fn sub_seed(seed: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(component.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("env.kind", "cliff").unwrap();
        cfg.set("env.width", "6").unwrap();
        cfg.set("ts.gradient_mode", "score-function-only").unwrap();
        cfg.set("cltv.lambda", "0.25").unwrap();
        let back = ExperimentConfig::from_str(&cfg.canonical()).unwrap();
        assert_eq!(back.canonical(), cfg.canonical());
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_str("cltv.lambda = 2").unwrap_err().to_string();
        assert!(e.contains("cltv.lambda"), "{e}");
        let e = ExperimentConfig::from_str("cltv.lamda = 0.2").unwrap_err().to_string();
        assert!(e.contains("cltv.lamda"), "{e}");
        assert!(ExperimentConfig::from_str("just words").is_err());
        assert!(ExperimentConfig::from_str("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn sub_seeds_differ_by_name() {
        assert_ne!(sub_seed(1, "train"), sub_seed(1, "eval"));
        assert_ne!(sub_seed(1, "train"), sub_seed(2, "train"));
        assert_eq!(sub_seed(7, "ts"), sub_seed(7, "ts"));
    }
}
