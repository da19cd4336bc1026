//! Fitted Q-iteration engines over a sieve feature map.
//!
//! Three estimators share one iteration loop:
//!
//! * single-task FQI on the target only,
//! * one-step pooling, where every task regresses onto a common `w`,
//! * two-step transfer: pooled `w`, then a per-task lasso correction `delta`
//!   so that each task carries `beta = w + delta`.
//!
//! Every task's trajectories are split into `upsilon` disjoint subsets and
//! iteration `tau` reads only subset `tau` (unless `reuse_all_data` is set).

use std::io::Write;

use log::warn;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{TaskDataset, Transition};
use crate::error::{Error, Result};
use crate::mdp::TabularMDP;
use crate::regress::{
    cross_validate_lambda, default_lambda_multipliers, default_ridge, dot, lasso_gram, solve_gram, DesignMatrix,
    Gram, LassoOptions,
};
use crate::rng::{mix_seed, rng_from, stream};
use crate::sieve::{FeatureMap, QCoefficients};

/// How the Step II penalty level is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LambdaRule {
    /// Cross-validated over `multipliers · λ_max`; `None` means the default grid.
    Cv { multipliers: Option<Vec<f64>> },
    Fixed { value: f64 },
    /// `delta` is forced to zero.
    Infinite,
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Cv { multipliers: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum InitRule {
    #[default]
    Zero,
    /// Entries i.i.d. `N(0, sd²)`, one draw shared by all tasks.
    Gaussian { sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub gamma: f64,
    pub upsilon: usize,
    pub reuse_all_data: bool,
    pub clip: bool,
    /// Clipping level; defaults to `max |reward| / (1 - gamma)` over all tasks.
    pub vmax: Option<f64>,
    /// Step I ridge level; defaults to `1e-8 · trace(G) / q`.
    pub ridge_eps: Option<f64>,
    pub lambda: LambdaRule,
    pub cv_folds: usize,
    /// Keep each task's `λ` from the first iteration.
    pub cv_once: bool,
    pub init: InitRule,
    pub lasso: LassoOptions,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            gamma: 0.9,
            upsilon: 10,
            reuse_all_data: false,
            clip: true,
            vmax: None,
            ridge_eps: None,
            lambda: LambdaRule::default(),
            cv_folds: 5,
            cv_once: false,
            init: InitRule::Zero,
            lasso: LassoOptions::default(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.upsilon == 0 {
            return Err(Error::Validation("upsilon must be at least 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Validation("cv_folds must be at least 2".into()));
        }
        if let Some(v) = self.vmax {
            if !(v > 0.0) {
                return Err(Error::Validation(format!("vmax must be positive, got {v}")));
            }
        }
        if let Some(e) = self.ridge_eps {
            if !(e >= 0.0) {
                return Err(Error::Validation(format!("ridge_eps must be nonnegative, got {e}")));
            }
        }
        match &self.lambda {
            LambdaRule::Fixed { value } if !(*value >= 0.0) => {
                return Err(Error::Validation(format!("fixed lambda must be nonnegative, got {value}")))
            }
            LambdaRule::Cv { multipliers: Some(m) } if m.is_empty() || m.iter().any(|v| !(*v >= 0.0)) => {
                return Err(Error::Validation("lambda multipliers must be nonempty and nonnegative".into()))
            }
            _ => {}
        }
        if let InitRule::Gaussian { sd } = self.init {
            if !(sd >= 0.0) {
                return Err(Error::Validation(format!("init sd must be nonnegative, got {sd}")));
            }
        }
        Ok(())
    }
}

/// Source of the regression target for each sample.
#[derive(Debug, Clone, Copy)]
pub enum Backup<'a> {
    /// `R + γ max_a' Q(x', a')` from the observed transition.
    Sampled,
    /// `r(s, a) + γ Σ_s' P(s'|s, a) max_a' Q(s', a')` using the known model;
    /// states are recovered from their one-dimensional coordinates.
    Exact(&'a TabularMDP),
}

/// Random trajectory-level partition into `upsilon` near-equal subsets.
/// Each subset lists trajectory indices in increasing order.
pub fn split_dataset(data: &TaskDataset, upsilon: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if upsilon == 0 {
        return Err(Error::Validation("upsilon must be at least 1".into()));
    }
    let n = data.n_trajectories();
    if n < upsilon {
        return Err(Error::Validation(format!(
            "task {} has {n} trajectories, fewer than upsilon = {upsilon}",
            data.task_id
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let mut subsets = vec![Vec::new(); upsilon];
    for (pos, &i) in order.iter().enumerate() {
        subsets[pos % upsilon].push(i);
    }
    subsets.iter_mut().for_each(|s| s.sort_unstable());
    Ok(subsets)
}

/// `R + γ max_a' Q(x', a')` with clipped action values.
pub fn pseudo_response(
    transitions: &[&Transition],
    coeffs_prev: &QCoefficients,
    map: &FeatureMap,
    gamma: f64,
    clip: bool,
) -> Result<Vec<f64>> {
    transitions
        .iter()
        .map(|tr| {
            if gamma == 0.0 {
                return Ok(tr.reward);
            }
            let (_, v) = map.greedy(coeffs_prev, &tr.next_state, clip)?;
            Ok(tr.reward + gamma * v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransFQIState {
    pub tau: usize,
    pub w_hat: QCoefficients,
    /// Indexed like the input task list.
    pub delta_hat: Vec<QCoefficients>,
    pub beta_hat: Vec<QCoefficients>,
    /// Per task, the trajectory subsets used by each iteration.
    pub split: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub tau: usize,
    pub task_id: usize,
    pub l1_delta: f64,
    pub linf_beta_change: f64,
    /// Empty when Step II was skipped.
    pub chosen_lambda: Option<f64>,
    /// RMS of the Step I residual on this task's rows.
    pub step1_residual: f64,
}

pub fn write_history_csv<W: Write>(records: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EngineOutput {
    pub state: TransFQIState,
    pub history: Vec<IterationRecord>,
    /// Target coefficients `beta^(0)` for `tau = 0..=upsilon`.
    pub target_path: Vec<QCoefficients>,
    /// `accessed[tau - 1][task]`: trajectories whose rows were read at `tau`.
    pub accessed: Vec<Vec<Vec<usize>>>,
}

impl EngineOutput {
    pub fn target(&self) -> &QCoefficients {
        self.target_path.last().expect("path holds the initial estimate")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Single,
    OneStep,
    TwoStep,
}

pub fn run_transfqi(datasets: &[TaskDataset], map: &FeatureMap, config: &EngineConfig, backup: Backup) -> Result<EngineOutput> {
    run_engine(datasets, map, config, backup, Mode::TwoStep)
}

pub fn run_onestep(datasets: &[TaskDataset], map: &FeatureMap, config: &EngineConfig, backup: Backup) -> Result<EngineOutput> {
    run_engine(datasets, map, config, backup, Mode::OneStep)
}

pub fn run_single_fqi(dataset: &TaskDataset, map: &FeatureMap, config: &EngineConfig, backup: Backup) -> Result<EngineOutput> {
    if dataset.task_id != 0 {
        return Err(Error::Validation(format!(
            "single-task FQI expects the target (task 0), got task {}",
            dataset.task_id
        )));
    }
    run_engine(std::slice::from_ref(dataset), map, config, backup, Mode::Single)
}

/// Precomputed sparse features for every sample of a task.
struct TaskCache<'a> {
    data: &'a TaskDataset,
    /// `xi(x, a)` per sample, trajectory-major.
    xi: Vec<Vec<(usize, f64)>>,
    /// `phi(x')` per sample.
    next_phi: Vec<Vec<(usize, f64)>>,
    /// First sample index of each trajectory (plus a final sentinel).
    offsets: Vec<usize>,
}

impl<'a> TaskCache<'a> {
    fn new(data: &'a TaskDataset, map: &FeatureMap) -> Result<Self> {
        let mut xi = Vec::with_capacity(data.n_samples());
        let mut next_phi = Vec::with_capacity(data.n_samples());
        let mut offsets = vec![0];
        for tr in data.transitions() {
            let mut a = Vec::new();
            map.eval_xi_sparse(&tr.state, tr.action, &mut a)?;
            let mut b = Vec::new();
            map.basis().eval_sparse(&tr.next_state, &mut b)?;
            xi.push(a);
            next_phi.push(b);
        }
        for t in &data.trajectories {
            offsets.push(offsets.last().unwrap() + t.steps.len());
        }
        Ok(TaskCache {
            data,
            xi,
            next_phi,
            offsets,
        })
    }
}

/// One task's regression problem at one iteration.
struct Problem {
    design: DesignMatrix,
    y: Vec<f64>,
    groups: Vec<usize>,
    gram: Gram,
}

fn max_q_sparse(phi: &[(usize, f64)], coeffs: &QCoefficients, map: &FeatureMap, clip: bool) -> f64 {
    let p = map.block_len();
    let mut best = f64::NEG_INFINITY;
    for a in 0..map.n_actions() {
        let raw: f64 = phi.iter().map(|&(i, v)| v * coeffs.beta[a * p + i]).sum();
        let q = if clip { coeffs.clip(raw) } else { raw };
        if q > best {
            best = q;
        }
    }
    best
}

/// Builds the design and responses for the trajectories in `subset`.
fn build_problem(
    cache: &TaskCache,
    subset: &[usize],
    coeffs: &QCoefficients,
    map: &FeatureMap,
    config: &EngineConfig,
    backup: Backup,
) -> Result<Problem> {
    let q = map.dim();
    let exact_values = match backup {
        Backup::Exact(mdp) => {
            let mut v = Vec::with_capacity(mdp.n_states());
            for s in 0..mdp.n_states() {
                let (_, val) = map.greedy(coeffs, &[mdp.state_coordinate(s)], config.clip)?;
                v.push(val);
            }
            Some((mdp, v))
        }
        Backup::Sampled => None,
    };
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for &traj in subset {
        let steps = &cache.data.trajectories[traj].steps;
        for (t, tr) in steps.iter().enumerate() {
            let idx = cache.offsets[traj] + t;
            let mut row = vec![0.0; q];
            for &(j, v) in &cache.xi[idx] {
                row[j] += v;
            }
            data.extend_from_slice(&row);
            let target = match &exact_values {
                None => {
                    if config.gamma == 0.0 {
                        tr.reward
                    } else {
                        tr.reward + config.gamma * max_q_sparse(&cache.next_phi[idx], coeffs, map, config.clip)
                    }
                }
                Some((mdp, v)) => {
                    let s = mdp.state_from_coordinate(tr.state[0]);
                    let next: f64 = mdp
                        .transition_row(s, tr.action)
                        .iter()
                        .zip(v)
                        .map(|(p, val)| p * val)
                        .sum();
                    mdp.reward(s, tr.action) + config.gamma * next
                }
            };
            y.push(target);
            groups.push(traj);
        }
    }
    let design = DesignMatrix::new(y.len(), q, data)?;
    let gram = Gram::from_design(&design, &y)?;
    Ok(Problem {
        design,
        y,
        groups,
        gram,
    })
}

fn check_inputs(datasets: &[TaskDataset], map: &FeatureMap) -> Result<usize> {
    let targets: Vec<usize> = (0..datasets.len()).filter(|&i| datasets[i].task_id == 0).collect();
    if targets.len() != 1 {
        return Err(Error::Validation(format!(
            "exactly one target task (task_id 0) required, found {}",
            targets.len()
        )));
    }
    let mut ids: Vec<usize> = datasets.iter().map(|d| d.task_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != datasets.len() {
        return Err(Error::Validation("task ids must be distinct".into()));
    }
    for d in datasets {
        d.validate()?;
        if d.state_dim != map.state_dim() || d.n_actions != map.n_actions() {
            return Err(Error::Dimension(format!(
                "task {} has state_dim {} and {} actions; feature map expects {} and {}",
                d.task_id,
                d.state_dim,
                d.n_actions,
                map.state_dim(),
                map.n_actions()
            )));
        }
    }
    Ok(targets[0])
}

fn initial_coeffs(config: &EngineConfig, q: usize, vmax: f64) -> Result<QCoefficients> {
    let mut c = QCoefficients::zeros(q, vmax);
    if let InitRule::Gaussian { sd } = config.init {
        let normal = Normal::new(0.0, sd).map_err(|e| Error::Validation(e.to_string()))?;
        let mut rng = rng_from(mix_seed(config.seed, &[stream::INIT]));
        c.beta.iter_mut().for_each(|b| *b = normal.sample(&mut rng));
    }
    Ok(c)
}

fn diff_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn diff_linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Step II for one task: returns `(delta, chosen lambda)`.
fn correct_task(
    prob: &Problem,
    w: &[f64],
    config: &EngineConfig,
    frozen: Option<f64>,
    cv_seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let q = w.len();
    let fitted = prob.design.mul_vec(w);
    let resid: Vec<f64> = prob.y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let gram = Gram::from_design(&prob.design, &resid)?;
    let lambda = match (&config.lambda, frozen) {
        (LambdaRule::Infinite, _) => return Ok((vec![0.0; q], f64::INFINITY)),
        (_, Some(l)) => l,
        (LambdaRule::Fixed { value }, None) => *value,
        (LambdaRule::Cv { multipliers }, None) => {
            let lmax = gram.lambda_max();
            let mults = multipliers.clone().unwrap_or_else(default_lambda_multipliers);
            let grid: Vec<f64> = mults.iter().map(|m| m * lmax).collect();
            let mut labels = prob.groups.clone();
            labels.dedup();
            let folds = config.cv_folds.min(labels.len());
            if folds < 2 {
                // one trajectory cannot be cross-validated: keep the pooled fit
                lmax
            } else {
                cross_validate_lambda(&prob.design, &resid, &prob.groups, &grid, folds, cv_seed, &config.lasso)?.lambda
            }
        }
    };
    let sol = lasso_gram(&gram, lambda, &config.lasso, None)?;
    Ok((sol.delta, lambda))
}

fn run_engine(
    datasets: &[TaskDataset],
    map: &FeatureMap,
    config: &EngineConfig,
    backup: Backup,
    mode: Mode,
) -> Result<EngineOutput> {
    config.validate()?;
    let target = check_inputs(datasets, map)?;
    let tasks: Vec<usize> = match mode {
        Mode::Single => vec![target],
        _ => (0..datasets.len()).collect(),
    };
    let q = map.dim();
    let vmax = match config.vmax {
        Some(v) => v,
        None => {
            let rmax = datasets.iter().fold(0.0_f64, |m, d| m.max(d.max_abs_reward()));
            let v = rmax / (1.0 - config.gamma);
            if v > 0.0 {
                v
            } else {
                f64::MIN_POSITIVE
            }
        }
    };
    if let Backup::Exact(mdp) = backup {
        if map.state_dim() != 1 || mdp.n_actions() != map.n_actions() {
            return Err(Error::Dimension("exact backups need one-dimensional tabular states".into()));
        }
    }

    let caches: Vec<TaskCache> = datasets.iter().map(|d| TaskCache::new(d, map)).collect::<Result<_>>()?;
    let split: Vec<Vec<Vec<usize>>> = datasets
        .iter()
        .map(|d| {
            if config.reuse_all_data {
                Ok(vec![(0..d.n_trajectories()).collect(); config.upsilon])
            } else {
                split_dataset(d, config.upsilon, mix_seed(config.seed, &[stream::SPLIT, d.task_id as u64]))
            }
        })
        .collect::<Result<_>>()?;

    let init = initial_coeffs(config, q, vmax)?;
    let mut beta: Vec<QCoefficients> = vec![init.clone(); datasets.len()];
    let mut delta: Vec<QCoefficients> = vec![QCoefficients::zeros(q, vmax); datasets.len()];
    let mut w_hat = init.clone();
    let mut frozen: Vec<Option<f64>> = vec![None; datasets.len()];
    let mut history = Vec::new();
    let mut target_path = vec![beta[target].clone()];
    let mut accessed = Vec::with_capacity(config.upsilon);

    for tau in 1..=config.upsilon {
        let problems: Vec<(usize, Problem)> = tasks
            .par_iter()
            .map(|&k| {
                let coeffs = match mode {
                    Mode::TwoStep => &beta[k],
                    _ => &w_hat,
                };
                build_problem(&caches[k], &split[k][tau - 1], coeffs, map, config, backup)
                    .map(|p| (k, p))
                    .map_err(|e| e.at(tau, datasets[k].task_id))
            })
            .collect::<Result<_>>()?;
        let mut touched = vec![Vec::new(); datasets.len()];
        for (k, _) in &problems {
            touched[*k] = split[*k][tau - 1].clone();
        }
        accessed.push(touched);

        // Step I
        let grams: Vec<&Gram> = problems.iter().map(|(_, p)| &p.gram).collect();
        let pooled = Gram::pooled(&grams).map_err(|e| e.at(tau, 0))?;
        if pooled.n < q {
            warn!("iteration {tau}: {} pooled rows for {q} features; relying on ridge", pooled.n);
        }
        let ridge = config.ridge_eps.unwrap_or_else(|| default_ridge(&pooled));
        let w = solve_gram(&pooled, ridge).map_err(|e| e.at(tau, 0))?;

        // Step II
        let corrections: Vec<(Vec<f64>, Option<f64>)> = problems
            .par_iter()
            .map(|(k, p)| {
                if mode != Mode::TwoStep {
                    return Ok((vec![0.0; q], None));
                }
                let cv_seed = mix_seed(config.seed, &[stream::CV, tau as u64, datasets[*k].task_id as u64]);
                correct_task(p, &w, config, frozen[*k], cv_seed)
                    .map(|(d, l)| (d, Some(l)))
                    .map_err(|e| e.at(tau, datasets[*k].task_id))
            })
            .collect::<Result<_>>()?;

        for ((k, p), (d, lambda)) in problems.iter().zip(corrections) {
            let new_beta: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + b).collect();
            let fitted = p.design.mul_vec(&w);
            let rss: f64 = p.y.iter().zip(&fitted).map(|(y, f)| (y - f) * (y - f)).sum();
            history.push(IterationRecord {
                tau,
                task_id: datasets[*k].task_id,
                l1_delta: d.iter().map(|v| v.abs()).sum(),
                linf_beta_change: diff_linf(&new_beta, &beta[*k].beta),
                chosen_lambda: lambda,
                step1_residual: (rss / p.y.len() as f64).sqrt(),
            });
            if config.cv_once && frozen[*k].is_none() {
                frozen[*k] = lambda;
            }
            delta[*k] = QCoefficients { beta: d, vmax };
            beta[*k] = QCoefficients { beta: new_beta, vmax };
        }
        w_hat = QCoefficients { beta: w, vmax };
        if mode != Mode::TwoStep {
            for k in 0..datasets.len() {
                beta[k] = w_hat.clone();
            }
        }
        target_path.push(beta[target].clone());
    }

    Ok(EngineOutput {
        state: TransFQIState {
            tau: config.upsilon,
            w_hat,
            delta_hat: delta,
            beta_hat: beta,
            split,
        },
        history,
        target_path,
        accessed,
    })
}

/// `Σ_j |a_j - b_j|`; exposed for tests and diagnostics.
pub fn l1_distance(a: &QCoefficients, b: &QCoefficients) -> f64 {
    diff_l1(&a.beta, &b.beta)
}

/// Fitted value `xi(x, a)ᵀ beta` without clipping.
pub fn linear_value(map: &FeatureMap, coeffs: &QCoefficients, x: &[f64], a: usize) -> Result<f64> {
    let xi = map.eval_xi(x, a)?;
    Ok(dot(&xi, &coeffs.beta))
}
