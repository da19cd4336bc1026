use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fqi::EngineConfig;
use crate::oracle::ReferenceConfig;
use crate::sieve::BasisConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoTransfer,
    OneStep,
    TwoStep,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::NoTransfer => "no_transfer",
            Method::OneStep => "one_step",
            Method::TwoStep => "two_step",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "no_transfer" => Some(Method::NoTransfer),
            "one_step" => Some(Method::OneStep),
            "two_step" => Some(Method::TwoStep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Target trajectories `I^(0)`.
    pub i_target: usize,
    /// Source trajectory counts `I^(1)` swept by the grid.
    pub i_source: Vec<usize>,
    /// Trajectory length `T`.
    pub horizon: usize,
    pub sigma_c: Vec<f64>,
    pub n_sources: usize,
    /// Fixed target reward matrix instead of a random draw.
    pub c_target: Option<[[f64; 3]; 3]>,
    /// Fixed source reward matrix instead of a perturbation of the target.
    pub c_source: Option<[[f64; 3]; 3]>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            i_target: 20,
            i_source: vec![10, 20, 40, 80],
            horizon: 5,
            sigma_c: vec![0.25, 0.5, 0.75, 1.0],
            n_sources: 1,
            c_target: None,
            c_source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub gamma: f64,
    pub basis: BasisConfig,
    /// The engine's own `gamma` and `seed` are overridden per run.
    pub engine: EngineConfig,
    pub env: EnvConfig,
    pub reference: ReferenceConfig,
    pub replications: usize,
    pub master_seed: u64,
    pub methods: Vec<Method>,
    pub diagnostics: bool,
    /// Wall-clock timings make result files differ between runs; off by default.
    pub record_runtime: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gamma: 0.9,
            basis: BasisConfig::default(),
            engine: EngineConfig::default(),
            env: EnvConfig::default(),
            reference: ReferenceConfig::default(),
            replications: 50,
            master_seed: 0,
            methods: vec![Method::NoTransfer, Method::OneStep, Method::TwoStep],
            diagnostics: true,
            record_runtime: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.replications == 0 {
            return Err(Error::Validation("replications must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Validation("methods must be nonempty".into()));
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if m.len() != self.methods.len() {
            return Err(Error::Validation("methods must not repeat".into()));
        }
        let env = &self.env;
        if env.sigma_c.is_empty() || env.sigma_c.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Validation("sigma_c values must be nonempty, finite and nonnegative".into()));
        }
        if env.i_source.is_empty() || env.i_source.contains(&0) {
            return Err(Error::Validation("i_source values must be nonempty and positive".into()));
        }
        if env.i_target == 0 || env.horizon == 0 || env.n_sources == 0 {
            return Err(Error::Validation("i_target, horizon and n_sources must be positive".into()));
        }
        if let Some(c) = env.c_target.iter().chain(env.c_source.iter()).find(|c| c.iter().flatten().any(|v| !v.is_finite())) {
            return Err(Error::Validation(format!("reward matrix {c:?} is not finite")));
        }
        if self.reference.n_eval_points == 0 || self.reference.n_rollouts == 0 || self.reference.n_traj == 0 {
            return Err(Error::Validation("reference sizes must be positive".into()));
        }
        EngineConfig {
            gamma: self.gamma,
            ..self.engine.clone()
        }
        .validate()?;
        Ok(())
    }
}
