//! Reference values of `Q*` for scoring estimators.
//!
//! For environments without a closed-form optimal policy the reference policy
//! is greedy with respect to a large-sample single-task FQI fit; its action
//! values at the evaluation points are then estimated by Monte Carlo. Every
//! rollout uses its own derived seed and results are summed in rollout order.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{simulate, Environment};
use crate::error::{Error, Result};
use crate::fqi::{run_single_fqi, Backup, EngineConfig};
use crate::mdp::{value_iteration, TabularMDP};
use crate::rng::{mix_seed, rng_from, stream};
use crate::sieve::{FeatureMap, QCoefficients};

/// Maps an observation to an action.
pub trait Policy: Sync {
    fn action(&self, obs: &[f64]) -> Result<usize>;
}

/// Greedy with respect to a linear Q estimate (clipped, lowest index on ties).
pub struct GreedyPolicy<'a> {
    pub map: &'a FeatureMap,
    pub coeffs: &'a QCoefficients,
}

impl Policy for GreedyPolicy<'_> {
    fn action(&self, obs: &[f64]) -> Result<usize> {
        Ok(self.map.greedy(self.coeffs, obs, true)?.0)
    }
}

/// Per-state action table for tabular environments observed through
/// [`TabularMDP::state_coordinate`].
pub struct TablePolicy {
    pub actions: Vec<usize>,
}

impl Policy for TablePolicy {
    fn action(&self, obs: &[f64]) -> Result<usize> {
        let n = self.actions.len();
        let s = (((obs[0] + 1.0) * n as f64 / 2.0).floor() as usize).min(n - 1);
        Ok(self.actions[s])
    }
}

/// Smallest `H` with `gamma^H · vmax <= tol`.
pub fn truncation_horizon(gamma: f64, vmax: f64, tol: f64) -> usize {
    let mut h = 0;
    let mut bound = vmax;
    while bound > tol {
        bound *= gamma;
        h += 1;
        if h > 1_000_000 {
            break;
        }
    }
    h
}

/// Monte Carlo estimate of the discounted return from raw state `x_raw`
/// taking `action` first and following `policy` afterwards for a total of
/// `horizon` rewards. Each return is clipped to `±clip` when given.
/// Returns `(mean, standard error)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_policy_value<E: Environment, P: Policy>(
    env: &E,
    policy: &P,
    x_raw: &[f64],
    action: usize,
    n_rollouts: usize,
    horizon: usize,
    clip: Option<f64>,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_rollouts == 0 {
        return Err(Error::Validation("n_rollouts must be positive".into()));
    }
    let gamma = env.gamma();
    let returns: Vec<f64> = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(mix_seed(seed, &[stream::ROLLOUT, i as u64]));
            let mut x = x_raw.to_vec();
            let mut a = action;
            let mut total = 0.0;
            let mut discount = 1.0;
            for t in 0..horizon {
                if t > 0 {
                    a = policy.action(&env.observe(&x))?;
                }
                let (r, next) = env.step(&x, a, &mut rng);
                total += discount * r;
                discount *= gamma;
                x = next;
            }
            Ok(match clip {
                Some(c) => total.clamp(-c, c),
                None => total,
            })
        })
        .collect::<Result<_>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let stderr = if returns.len() > 1 {
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMethod {
    McRollout,
    LargeSampleFqi,
    TabularExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub raw: Vec<f64>,
    pub obs: Vec<f64>,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QStarReference {
    pub method: ReferenceMethod,
    pub eval_points: Vec<EvalPoint>,
    pub values: Vec<f64>,
    /// Empty unless the values are Monte Carlo estimates.
    pub stderr: Vec<f64>,
    pub vmax: f64,
    pub horizon: usize,
}

impl QStarReference {
    pub fn validate(&self) -> Result<()> {
        if self.eval_points.is_empty() {
            return Err(Error::Validation("reference has no evaluation points".into()));
        }
        if self.values.len() != self.eval_points.len() {
            return Err(Error::Dimension("reference values and points differ in length".into()));
        }
        if !self.stderr.is_empty() && self.stderr.len() != self.values.len() {
            return Err(Error::Dimension("reference stderr and values differ in length".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) || self.stderr.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Validation("reference values must be finite, stderr nonnegative".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: QStarReference = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub n_traj: usize,
    /// Length of the simulated trajectories used for the reference fit.
    pub horizon: usize,
    pub n_eval_points: usize,
    pub n_rollouts: usize,
    pub truncation_tol: f64,
    /// Engine settings for the reference fit (gamma is taken from the environment).
    pub engine: EngineConfig,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            n_traj: 2000,
            horizon: 5,
            n_eval_points: 200,
            n_rollouts: 500,
            truncation_tol: 1e-3,
            engine: EngineConfig {
                upsilon: 50,
                reuse_all_data: true,
                ..Default::default()
            },
        }
    }
}

/// Evaluation points drawn from the initial state law and the behavior policy.
pub fn draw_eval_points<E: Environment>(env: &E, count: usize, seed: u64) -> Vec<EvalPoint> {
    let mut rng = rng_from(mix_seed(seed, &[stream::EVAL_POINTS]));
    (0..count)
        .map(|_| {
            let raw = env.initial_state(&mut rng);
            let action = env.behavior_action(&raw, &mut rng);
            EvalPoint {
                obs: env.observe(&raw),
                raw,
                action,
            }
        })
        .collect()
}

/// Fits single-task FQI on a large simulated dataset and scores the greedy
/// policy of that fit by Monte Carlo at fresh evaluation points.
pub fn build_reference<E: Environment>(
    env: &E,
    map: &FeatureMap,
    config: &ReferenceConfig,
    seed: u64,
) -> Result<QStarReference> {
    if config.n_eval_points == 0 {
        return Err(Error::Validation("n_eval_points must be positive".into()));
    }
    let data = simulate(env, 0, config.n_traj, config.horizon, mix_seed(seed, &[stream::REFERENCE_DATA]));
    let engine = EngineConfig {
        gamma: env.gamma(),
        seed: mix_seed(seed, &[stream::ENGINE]),
        ..config.engine.clone()
    };
    let fit = run_single_fqi(&data, map, &engine, Backup::Sampled)?;
    let coeffs = fit.target();
    let vmax = coeffs.vmax;
    let horizon = truncation_horizon(env.gamma(), vmax, config.truncation_tol);
    let points = draw_eval_points(env, config.n_eval_points, seed);
    let policy = GreedyPolicy { map, coeffs };
    let mut values = Vec::with_capacity(points.len());
    let mut stderr = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let (m, s) = mc_policy_value(
            env,
            &policy,
            &p.raw,
            p.action,
            config.n_rollouts,
            horizon,
            Some(vmax),
            mix_seed(seed, &[stream::REFERENCE, i as u64]),
        )?;
        values.push(m);
        stderr.push(s);
    }
    Ok(QStarReference {
        method: ReferenceMethod::LargeSampleFqi,
        eval_points: points,
        values,
        stderr,
        vmax,
        horizon,
    })
}

/// Exact `Q*` of a tabular MDP at the given points (raw state = `[s]`).
pub fn tabular_reference(mdp: &TabularMDP, points: Vec<EvalPoint>) -> Result<QStarReference> {
    let vi = value_iteration(mdp, 1e-12, 100_000)?;
    let values = points.iter().map(|p| vi.q.get(p.raw[0] as usize, p.action)).collect();
    let vmax = if mdp.gamma() < 1.0 { mdp.r_max() / (1.0 - mdp.gamma()) } else { f64::INFINITY };
    Ok(QStarReference {
        method: ReferenceMethod::TabularExact,
        eval_points: points,
        values,
        stderr: Vec::new(),
        vmax,
        horizon: 0,
    })
}

/// Mean absolute difference between the (clipped) estimate and the reference.
pub fn eval_error(coeffs: &QCoefficients, reference: &QStarReference, map: &FeatureMap) -> Result<f64> {
    reference.validate()?;
    let mut total = 0.0;
    for (p, v) in reference.eval_points.iter().zip(&reference.values) {
        total += (map.eval_q(coeffs, &p.obs, p.action, true)? - v).abs();
    }
    Ok(total / reference.values.len() as f64)
}
