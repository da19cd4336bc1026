//! Self-verification suites run by the `check` subcommand.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fqi::{run_single_fqi, Backup, EngineConfig, LambdaRule};
use crate::mdp::{bellman_operator, check_lemma1, sample_trajectories, QTable, TabularMDP};
use crate::rng::{mix_seed, rng_from};
use crate::sieve::{BSplineBasis, BasisConfig, BasisMode, FeatureMap};

use rand::Rng;

/// Value-iteration tolerance used when solving MDP pairs.
const VI_TOL: f64 = 1e-11;
/// Slack for the residual error of the two value-iteration solves.
const BOUND_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Summary {
    pub pairs: usize,
    pub violations: usize,
    /// Largest `sup|δ_Q| / bound` over pairs with a positive bound.
    pub max_ratio: f64,
}

impl Lemma1Summary {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Random pair with 3–6 states, 2–3 actions and `γ ∈ {0.5, 0.9}`. The source
/// is either an independent draw or a perturbation of the target.
pub fn random_mdp_pair(seed: u64) -> Result<(TabularMDP, TabularMDP)> {
    let mut rng = rng_from(seed);
    let n = rng.random_range(3..=6usize);
    let m = rng.random_range(2..=3usize);
    let gamma = if rng.random_bool(0.5) { 0.5 } else { 0.9 };
    let target = TabularMDP::random(n, m, gamma, &mut rng)?;
    let other = TabularMDP::random(n, m, gamma, &mut rng)?;
    if rng.random_bool(0.5) {
        return Ok((target, other));
    }
    let eps_r: f64 = rng.random_range(0.0..0.3);
    let mix: f64 = rng.random_range(0.0..0.3);
    let mut reward = Vec::with_capacity(n * m);
    let mut transition = Vec::with_capacity(n * m * n);
    for s in 0..n {
        for a in 0..m {
            reward.push(target.reward(s, a) + eps_r * rng.random_range(-1.0..=1.0));
            for (p, q) in target.transition_row(s, a).iter().zip(other.transition_row(s, a)) {
                transition.push((1.0 - mix) * p + mix * q);
            }
        }
    }
    let source = TabularMDP::new(n, m, gamma, reward, transition)?;
    Ok((target, source))
}

pub fn lemma1_suite(pairs: usize, seed: u64) -> Result<Lemma1Summary> {
    let mut violations = 0;
    let mut max_ratio = 0.0_f64;
    for i in 0..pairs {
        let (target, source) = random_mdp_pair(mix_seed(seed, &[i as u64]))?;
        let r = check_lemma1(&target, &source, VI_TOL)?;
        if r.sup_delta_q > r.bound + BOUND_SLACK {
            violations += 1;
        }
        if r.bound > 0.0 {
            max_ratio = max_ratio.max(r.sup_delta_q / r.bound);
        }
    }
    Ok(Lemma1Summary {
        pairs,
        violations,
        max_ratio,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceSummary {
    pub iterations: usize,
    /// `max_{s,a} |Q̂_τ(s,a) − (T^τ 0)(s,a)|` for `τ = 1..=iterations`.
    pub deviations: Vec<f64>,
}

impl EquivalenceSummary {
    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().fold(0.0, |m, v| m.max(*v))
    }
}

/// Indicator basis over the `n_states` cells of `[-1, 1]`.
pub fn one_hot_map(n_states: usize, n_actions: usize) -> Result<FeatureMap> {
    let basis = BSplineBasis::new(
        1,
        BasisConfig {
            degree: 0,
            knots_per_dim: n_states + 1,
            mode: BasisMode::Tensor,
        },
    )?;
    FeatureMap::new(basis, n_actions)
}

/// Runs single-task FQI with exact backups on a one-hot basis and compares
/// each iterate with value iteration started from zero.
pub fn oracle_equivalence(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    iterations: usize,
    seed: u64,
) -> Result<EquivalenceSummary> {
    let mut rng = rng_from(mix_seed(seed, &[0]));
    let mdp = TabularMDP::random(n_states, n_actions, gamma, &mut rng)?;
    let behavior = vec![vec![1.0 / n_actions as f64; n_actions]; n_states];
    let initial = vec![1.0 / n_states as f64; n_states];
    let data = sample_trajectories(&mdp, &behavior, &initial, 40 * n_states * n_actions, 5, 0.0, 0, mix_seed(seed, &[1]))?;
    let mut seen = vec![false; n_states * n_actions];
    for tr in data.transitions() {
        seen[mdp.state_from_coordinate(tr.state[0]) * n_actions + tr.action] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Validation("sampled data does not cover every state-action pair".into()));
    }
    let map = one_hot_map(n_states, n_actions)?;
    let cfg = EngineConfig {
        gamma,
        upsilon: iterations,
        reuse_all_data: true,
        clip: true,
        vmax: Some(mdp.r_max() / (1.0 - gamma)),
        ridge_eps: Some(0.0),
        lambda: LambdaRule::Infinite,
        seed,
        ..Default::default()
    };
    let out = run_single_fqi(&data, &map, &cfg, Backup::Exact(&mdp))?;
    let mut q = QTable::zeros(n_states, n_actions);
    let mut deviations = Vec::with_capacity(iterations);
    for coeffs in &out.target_path[1..] {
        q = bellman_operator(&mdp, &q);
        let mut dev = 0.0_f64;
        for s in 0..n_states {
            let x = [mdp.state_coordinate(s)];
            for a in 0..n_actions {
                dev = dev.max((map.eval_q(coeffs, &x, a, true)? - q.get(s, a)).abs());
            }
        }
        deviations.push(dev);
    }
    Ok(EquivalenceSummary { iterations, deviations })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub lemma1: Lemma1Summary,
    pub equivalence: EquivalenceSummary,
    pub equivalence_tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lemma1.passed() && self.equivalence.max_deviation() <= self.equivalence_tol
    }
}

pub fn run_checks(seed: u64) -> Result<CheckReport> {
    Ok(CheckReport {
        lemma1: lemma1_suite(200, seed)?,
        equivalence: oracle_equivalence(5, 2, 0.9, 50, seed)?,
        equivalence_tol: 1e-9,
    })
}
