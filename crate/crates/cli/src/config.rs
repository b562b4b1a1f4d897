//! Run configuration: defaults, `key = value` file, then flag overrides.

use std::path::PathBuf;
use std::time::Duration;

use evmfunc::boundary::BoundaryConfig;
use evmfunc::config::{ConfigError, KeyValues};
use evmfunc::graphs::PATH_CAP;
use evmfunc::metrics::Aggregation;
use evmfunc::model::TrainConfig;
use evmfunc::pipeline::EvalOptions;

const KEYS: &[&str] = &[
    "model",
    "corpus",
    "out",
    "rho0",
    "delta",
    "rho_min",
    "max_lowerings",
    "max_states",
    "max_depth",
    "timeout_secs",
    "path_cap",
    "seed",
    "jobs",
    "aggregation",
    "register_missing",
];

/// Keys prefixed with `train.` configure training.
const TRAIN_PREFIX: &str = "train.";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub rho0: f64,
    pub delta: f64,
    pub rho_min: f64,
    pub max_lowerings: usize,
    pub max_states: usize,
    pub max_depth: usize,
    /// Per-contract wall-clock cutoff.
    pub timeout_secs: f64,
    pub path_cap: usize,
    pub seed: u64,
    /// Worker threads; 0 means one per core.
    pub jobs: usize,
    pub aggregation: Aggregation,
    pub register_missing: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BoundaryConfig::default();
        RunConfig {
            model: None,
            corpus: None,
            out: None,
            rho0: b.rho0,
            delta: b.delta,
            rho_min: b.rho_min,
            max_lowerings: b.max_lowerings,
            max_states: b.max_states,
            max_depth: b.max_depth,
            timeout_secs: 120.0,
            path_cap: PATH_CAP,
            seed: 0,
            jobs: 0,
            aggregation: Aggregation::Micro,
            register_missing: b.register_missing,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let kv = KeyValues::parse(text)?;
        let mut train = KeyValues::default();
        let mut own = KeyValues::default();
        for k in kv.keys() {
            let v: String = kv.get(k)?.expect("listed key");
            match k.strip_prefix(TRAIN_PREFIX) {
                Some(t) => train.set(t, v),
                None => own.set(k, v),
            }
        }
        own.reject_unknown(KEYS)?;
        let mut c = RunConfig { train: TrainConfig::from_kv(&train)?, ..Default::default() };
        let path = |k: &str| own.get::<String>(k).map(|v| v.map(PathBuf::from));
        c.model = path("model")?;
        c.corpus = path("corpus")?;
        c.out = path("out")?;
        own.apply("rho0", &mut c.rho0)?;
        own.apply("delta", &mut c.delta)?;
        own.apply("rho_min", &mut c.rho_min)?;
        own.apply("max_lowerings", &mut c.max_lowerings)?;
        own.apply("max_states", &mut c.max_states)?;
        own.apply("max_depth", &mut c.max_depth)?;
        own.apply("timeout_secs", &mut c.timeout_secs)?;
        own.apply("path_cap", &mut c.path_cap)?;
        own.apply("seed", &mut c.seed)?;
        own.apply("jobs", &mut c.jobs)?;
        own.apply("aggregation", &mut c.aggregation)?;
        own.apply("register_missing", &mut c.register_missing)?;
        Ok(c)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &str| Err(ConfigError::Range { key: key.into(), msg: msg.into() });
        for (k, v) in [("rho0", self.rho0), ("rho_min", self.rho_min)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(k, "must lie in (0, 1]");
            }
        }
        if self.rho_min > self.rho0 {
            return bad("rho_min", "must not exceed rho0");
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta", "must lie in (0, 1]");
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad("timeout_secs", "must be positive");
        }
        if self.max_states == 0 || self.max_depth == 0 || self.path_cap == 0 {
            return bad("max_states", "budgets must be positive");
        }
        Ok(())
    }

    pub fn boundary(&self) -> BoundaryConfig {
        BoundaryConfig {
            rho0: self.rho0,
            delta: self.delta,
            rho_min: self.rho_min,
            max_lowerings: self.max_lowerings,
            max_states: self.max_states,
            timeout: self.cutoff(),
            max_depth: self.max_depth,
            register_missing: self.register_missing,
            ..Default::default()
        }
    }

    pub fn cutoff(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { cutoff: self.cutoff(), path_cap: self.path_cap }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults() {
        let c = RunConfig::parse("rho0 = 0.6\njobs = 2\naggregation = macro\ntrain.epochs = 3\nmodel = m.bin\n").unwrap();
        assert_eq!(c.rho0, 0.6);
        assert_eq!(c.jobs, 2);
        assert_eq!(c.aggregation, Aggregation::Macro);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model, Some(PathBuf::from("m.bin")));
        assert_eq!(c.boundary().rho0, 0.6);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(ConfigError::Unknown(_))));
        assert!(matches!(RunConfig::parse("train.bogus = 1"), Err(ConfigError::Unknown(_))));
        assert!(RunConfig::parse("rho0 = x").is_err());
        for text in ["rho0 = 0", "rho0 = 1.5", "rho_min = 0.9", "timeout_secs = 0", "max_states = 0"] {
            assert!(RunConfig::parse(text).unwrap().check().is_err(), "{text}");
        }
        assert!(RunConfig::default().check().is_ok());
    }
}
