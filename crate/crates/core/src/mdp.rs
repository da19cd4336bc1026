//! Finite MDPs with exact dynamic-programming solutions.
//!
//! These serve as ground truth: value iteration gives `Q*` to any tolerance,
//! and [`check_lemma1`] compares the gap between two optimal Q-tables with the
//! reward/transition perturbation bound.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::TaskDataset;
use crate::env::{sample_discrete, simulate, Environment};
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    /// `[s * m + a]`
    reward: Vec<f64>,
    /// `[(s * m + a) * n_states + s']`
    transition: Vec<f64>,
    r_max: f64,
}

#[derive(Serialize, Deserialize)]
struct TabularMdpDoc {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    reward: Vec<f64>,
    transition: Vec<f64>,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        reward: Vec<f64>,
        transition: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Validation("n_states and n_actions must be positive".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Validation(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::Dimension(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Dimension(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Validation("reward entries must be finite".into()));
        }
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Validation(format!(
                    "transition row (s={}, a={}) has a negative or non-finite entry",
                    row_idx / n_actions,
                    row_idx % n_actions
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!(
                    "transition row (s={}, a={}) sums to {sum}",
                    row_idx / n_actions,
                    row_idx % n_actions
                )));
            }
        }
        let r_max = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(TabularMDP {
            n_states,
            n_actions,
            gamma,
            reward,
            transition,
            r_max,
        })
    }

    /// Random MDP with rewards uniform on `[-1, 1]` and Dirichlet(1) transition rows.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let reward: Vec<f64> = (0..n_states * n_actions)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let raw: Vec<f64> = (0..n_states)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
            // push rounding residue into the largest entry
            let residue = 1.0 - row.iter().sum::<f64>();
            let (imax, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            row[imax] += residue;
            transition.extend(row);
        }
        TabularMDP::new(n_states, n_actions, gamma, reward, transition)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Same dynamics with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        TabularMDP::new(
            self.n_states,
            self.n_actions,
            gamma,
            self.reward.clone(),
            self.transition.clone(),
        )
    }

    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self> {
        TabularMDP::new(self.n_states, self.n_actions, self.gamma, reward, self.transition.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TabularMdpDoc {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            reward: self.reward.clone(),
            transition: self.transition.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TabularMdpDoc = serde_json::from_str(text)?;
        TabularMDP::new(doc.n_states, doc.n_actions, doc.gamma, doc.reward, doc.transition)
    }

    /// Observation coordinate of state `s`: the midpoint of the `s`-th of
    /// `n_states` equal cells of `[-1, 1]`, so a degree-0 spline basis with
    /// `n_states + 1` knots is a one-hot state encoding.
    pub fn state_coordinate(&self, s: usize) -> f64 {
        -1.0 + (2 * s + 1) as f64 / self.n_states as f64
    }

    pub fn state_from_coordinate(&self, x: f64) -> usize {
        let cell = ((x + 1.0) * 0.5 * self.n_states as f64).floor();
        (cell.max(0.0) as usize).min(self.n_states - 1)
    }
}

/// Dense `n_states × n_actions` table of action values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::Dimension("ragged Q-table rows".into()));
        }
        Ok(QTable {
            n_states: rows.len(),
            n_actions,
            values: rows.concat(),
        })
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn state_max(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Applies the Bellman optimality operator once.
pub fn bellman_operator(mdp: &TabularMDP, q: &QTable) -> QTable {
    let v: Vec<f64> = (0..mdp.n_states).map(|s| q.state_max(s)).collect();
    let mut out = QTable::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let cont: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&v)
                .map(|(p, vs)| p * vs)
                .sum();
            out.values[s * mdp.n_actions + a] = mdp.reward(s, a) + mdp.gamma * cont;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ValueIteration {
    pub q: QTable,
    pub iterations: usize,
    /// `‖Q_{k+1} − Q_k‖∞` for every backup performed, starting from `Q_0 = 0`.
    pub residuals: Vec<f64>,
}

/// Iterates the Bellman optimality operator from `Q_0 = 0` until
/// `‖T Q − Q‖∞ ≤ tol` and returns that `Q`.
pub fn value_iteration(mdp: &TabularMDP, tol: f64, max_iter: usize) -> Result<ValueIteration> {
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("tol must be positive, got {tol}")));
    }
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut residuals = Vec::new();
    for iterations in 0..=max_iter {
        let next = bellman_operator(mdp, &q);
        let residual = next.sup_distance(&q);
        if residual <= tol {
            return Ok(ValueIteration {
                q,
                iterations,
                residuals,
            });
        }
        if iterations == max_iter {
            return Err(Error::NotConverged {
                iterations: max_iter,
                residual,
            });
        }
        residuals.push(residual);
        q = next;
    }
    unreachable!()
}

/// Per-state argmax; ties go to the lowest action index.
pub fn greedy_policy(q: &QTable) -> Vec<usize> {
    (0..q.n_states)
        .map(|s| {
            let row = q.row(s);
            let mut best = 0;
            for a in 1..row.len() {
                if row[a] > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    /// `sup |Q*_source − Q*_target|`
    pub sup_delta_q: f64,
    /// Right-hand side of the perturbation bound.
    pub bound: f64,
    pub sup_delta_r: f64,
    /// `Σ_{x'} sup_{x,a} |P_source(x'|x,a) − P_target(x'|x,a)|`
    pub tv_delta_rho: f64,
}

/// Solves both MDPs exactly and evaluates
/// `sup|δ_Q| ≤ sup|δ_r|/(1−γ) + γ R_max/(1−γ)² · Σ_{x'} sup_{x,a} |δ_ρ(x'|x,a)|`
/// with `R_max` the largest absolute reward of either MDP.
pub fn check_lemma1(target: &TabularMDP, source: &TabularMDP, tol: f64) -> Result<DiscrepancyReport> {
    if target.n_states != source.n_states || target.n_actions != source.n_actions {
        return Err(Error::Dimension(format!(
            "target is {}x{}, source is {}x{}",
            target.n_states, target.n_actions, source.n_states, source.n_actions
        )));
    }
    if target.gamma != source.gamma {
        return Err(Error::Dimension(format!(
            "discount factors differ: {} vs {}",
            target.gamma, source.gamma
        )));
    }
    let max_iter = 1_000_000;
    let q_target = value_iteration(target, tol, max_iter)?.q;
    let q_source = value_iteration(source, tol, max_iter)?.q;
    let sup_delta_q = q_source.sup_distance(&q_target);
    let sup_delta_r = target
        .reward
        .iter()
        .zip(&source.reward)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let n = target.n_states;
    let tv_delta_rho: f64 = (0..n)
        .map(|next| {
            let mut sup = 0.0_f64;
            for s in 0..n {
                for a in 0..target.n_actions {
                    let d = source.transition_row(s, a)[next] - target.transition_row(s, a)[next];
                    sup = sup.max(d.abs());
                }
            }
            sup
        })
        .sum();
    let gamma = target.gamma;
    let r_max = target.r_max.max(source.r_max);
    let bound = sup_delta_r / (1.0 - gamma) + gamma * r_max / (1.0 - gamma).powi(2) * tv_delta_rho;
    Ok(DiscrepancyReport {
        sup_delta_q,
        bound,
        sup_delta_r,
        tv_delta_rho,
    })
}

/// A tabular MDP driven by a stochastic behavior policy, usable as a
/// generative [`Environment`]. States are observed through
/// [`TabularMDP::state_coordinate`].
#[derive(Debug, Clone)]
pub struct TabularEnv {
    pub mdp: TabularMDP,
    /// `behavior[s][a]`
    pub behavior: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub reward_noise_sd: f64,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

impl TabularEnv {
    pub fn new(mdp: TabularMDP, behavior: Vec<Vec<f64>>, initial: Vec<f64>, reward_noise_sd: f64) -> Result<Self> {
        if behavior.len() != mdp.n_states {
            return Err(Error::Dimension(format!(
                "behavior has {} rows for {} states",
                behavior.len(),
                mdp.n_states
            )));
        }
        for (s, row) in behavior.iter().enumerate() {
            if row.len() != mdp.n_actions {
                return Err(Error::Dimension(format!("behavior row {s} has wrong length")));
            }
            check_distribution(row, &format!("behavior row {s}"))?;
        }
        if initial.len() != mdp.n_states {
            return Err(Error::Dimension("initial distribution has wrong length".into()));
        }
        check_distribution(&initial, "initial distribution")?;
        if !(reward_noise_sd >= 0.0) {
            return Err(Error::Validation("reward noise sd must be nonnegative".into()));
        }
        Ok(TabularEnv {
            mdp,
            behavior,
            initial,
            reward_noise_sd,
        })
    }

    /// Uniform behavior and uniform initial distribution.
    pub fn uniform(mdp: TabularMDP, reward_noise_sd: f64) -> Result<Self> {
        let behavior = vec![vec![1.0 / mdp.n_actions as f64; mdp.n_actions]; mdp.n_states];
        let initial = vec![1.0 / mdp.n_states as f64; mdp.n_states];
        TabularEnv::new(mdp, behavior, initial, reward_noise_sd)
    }
}

impl Environment for TabularEnv {
    fn obs_dim(&self) -> usize {
        1
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions
    }

    fn gamma(&self) -> f64 {
        self.mdp.gamma
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![sample_discrete(&self.initial, rng) as f64]
    }

    fn behavior_action(&self, state: &[f64], rng: &mut ChaCha8Rng) -> usize {
        sample_discrete(&self.behavior[state[0] as usize], rng)
    }

    fn step(&self, state: &[f64], action: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
        let s = state[0] as usize;
        let mut reward = self.mdp.reward(s, action);
        if self.reward_noise_sd > 0.0 {
            reward += Normal::new(0.0, self.reward_noise_sd).unwrap().sample(rng);
        }
        let next = sample_discrete(self.mdp.transition_row(s, action), rng);
        (reward, vec![next as f64])
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![self.mdp.state_coordinate(state[0] as usize)]
    }
}

/// Samples `count` trajectories of length `horizon` from `mdp` under the
/// given behavior policy and initial distribution.
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectories(
    mdp: &TabularMDP,
    behavior: &[Vec<f64>],
    initial: &[f64],
    count: usize,
    horizon: usize,
    reward_noise_sd: f64,
    task_id: usize,
    seed: u64,
) -> Result<TaskDataset> {
    let env = TabularEnv::new(mdp.clone(), behavior.to_vec(), initial.to_vec(), reward_noise_sd)?;
    Ok(simulate(&env, task_id, count, horizon, seed))
}
