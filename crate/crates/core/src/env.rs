//! Generative environments and trajectory simulation.
//!
//! An [`Environment`] evolves a raw state; estimators only ever see the
//! observation returned by [`Environment::observe`]. Each trajectory draws from
//! its own stream derived from `(seed, trajectory index)`, so generation is
//! independent of evaluation order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{TaskDataset, Trajectory, Transition};
use crate::rng::{mix_seed, rng_from, stream};

pub trait Environment: Sync {
    /// Dimension of the observation vector.
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn gamma(&self) -> f64;
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn behavior_action(&self, state: &[f64], rng: &mut ChaCha8Rng) -> usize;
    /// Returns `(reward, next raw state)`.
    fn step(&self, state: &[f64], action: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>);
    fn observe(&self, state: &[f64]) -> Vec<f64>;
}

/// Rolls out `n_traj` behavior-policy trajectories of fixed `horizon`.
pub fn simulate<E: Environment>(
    env: &E,
    task_id: usize,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> TaskDataset {
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(mix_seed(seed, &[stream::TRAJECTORY, i as u64]));
            let mut raw = env.initial_state(&mut rng);
            let mut obs = env.observe(&raw);
            let mut steps = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let action = env.behavior_action(&raw, &mut rng);
                let (reward, next_raw) = env.step(&raw, action, &mut rng);
                let next_obs = env.observe(&next_raw);
                steps.push(Transition {
                    state: obs,
                    action,
                    reward,
                    next_state: next_obs.clone(),
                });
                raw = next_raw;
                obs = next_obs;
            }
            Trajectory { steps }
        })
        .collect();
    TaskDataset {
        task_id,
        state_dim: env.obs_dim(),
        n_actions: env.n_actions(),
        trajectories,
    }
}

/// Draws an index from a discrete distribution given by `probs`.
pub(crate) fn sample_discrete(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last index with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
