//! Empirical task-discrepancy and design-heterogeneity measures.
//!
//! Only the reward part of the task discrepancy is estimated: rewards are
//! observed directly, so each task's reward function can be projected onto
//! the sieve by a ridge-stabilized regression. Transition discrepancies are
//! available for tabular models through [`crate::mdp::check_lemma1`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::TaskDataset;
use crate::error::{Error, Result};
use crate::regress::{default_ridge, solve_gram, DesignMatrix, Gram};
use crate::sieve::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyEstimates {
    pub h_r_hat: f64,
    pub c_sigma_hat: f64,
    /// `‖β_r^(k) - β_r^(0)‖₁` for each source, in input order.
    pub per_task_l1: Vec<f64>,
}

fn design_of(dataset: &TaskDataset, map: &FeatureMap) -> Result<(DesignMatrix, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Validation(format!("task {} has no samples", dataset.task_id)));
    }
    let mut rows = Vec::with_capacity(dataset.n_samples() * map.dim());
    let mut y = Vec::with_capacity(dataset.n_samples());
    for tr in dataset.transitions() {
        rows.extend(map.eval_xi(&tr.state, tr.action)?);
        y.push(tr.reward);
    }
    Ok((DesignMatrix::new(y.len(), map.dim(), rows)?, y))
}

/// Sieve coefficients of the task's reward function. `ridge_eps = None`
/// uses the default level `1e-8 · trace(ZᵀZ/n) / q`.
pub fn estimate_reward_coeffs(dataset: &TaskDataset, map: &FeatureMap, ridge_eps: Option<f64>) -> Result<Vec<f64>> {
    let (z, y) = design_of(dataset, map)?;
    let gram = Gram::from_design(&z, &y)?;
    solve_gram(&gram, ridge_eps.unwrap_or_else(|| default_ridge(&gram)))
}

/// Largest `ℓ1` distance from the target's coefficients (first entry).
/// Returns `(h_r_hat, per-source distances)`.
pub fn estimate_hr(coeffs: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let target = coeffs
        .first()
        .ok_or_else(|| Error::Validation("target coefficients missing".into()))?;
    let mut per_task = Vec::with_capacity(coeffs.len().saturating_sub(1));
    for c in &coeffs[1..] {
        if c.len() != target.len() {
            return Err(Error::Dimension(format!(
                "coefficient vectors of length {} and {}",
                c.len(),
                target.len()
            )));
        }
        per_task.push(c.iter().zip(target).map(|(a, b)| (a - b).abs()).sum());
    }
    let h = per_task.iter().fold(0.0_f64, |m, v| m.max(*v));
    Ok((h, per_task))
}

/// `1 + max_k ‖Σ̄⁻¹ (Σ_k - Σ̄)‖₁` from per-task second-moment matrices
/// (row-major `q × q`) and their sample counts. `Σ̄` is the count-weighted
/// average; the matrix norm is the largest absolute column sum.
pub fn c_sigma_from_covariances(covs: &[Vec<f64>], counts: &[usize], q: usize, ridge_eps: f64) -> Result<f64> {
    if covs.is_empty() || covs.len() != counts.len() {
        return Err(Error::Validation("need one count per covariance and at least one task".into()));
    }
    if covs.iter().any(|c| c.len() != q * q) {
        return Err(Error::Dimension("covariance matrices must be q x q".into()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Validation("no samples".into()));
    }
    let sigma_bar = if covs.len() == 1 {
        covs[0].clone()
    } else {
        let mut acc = vec![0.0; q * q];
        for (c, &n) in covs.iter().zip(counts) {
            acc.iter_mut().zip(c).for_each(|(a, v)| *a += n as f64 * v);
        }
        acc.iter_mut().for_each(|a| *a /= total as f64);
        acc
    };
    let mut bar = DMatrix::from_row_slice(q, q, &sigma_bar);
    for j in 0..q {
        bar[(j, j)] += ridge_eps;
    }
    let chol = bar.cholesky().ok_or_else(|| Error::Singular {
        context: format!("average design covariance ({q} columns, ridge {ridge_eps:e})"),
        condition: f64::INFINITY,
    })?;
    let mut worst = 0.0_f64;
    for c in covs {
        let diff = DMatrix::from_fn(q, q, |r, k| c[r * q + k] - sigma_bar[r * q + k]);
        if diff.iter().all(|v| *v == 0.0) {
            continue;
        }
        let m = chol.solve(&diff);
        for col in m.column_iter() {
            worst = worst.max(col.iter().map(|v| v.abs()).sum());
        }
    }
    Ok(1.0 + worst)
}

/// Heterogeneity of the per-task feature second moments `Z_kᵀZ_k / n_k`.
pub fn estimate_c_sigma(datasets: &[TaskDataset], map: &FeatureMap, ridge_eps: Option<f64>) -> Result<f64> {
    let q = map.dim();
    let mut covs = Vec::with_capacity(datasets.len());
    let mut counts = Vec::with_capacity(datasets.len());
    for d in datasets {
        let (z, y) = design_of(d, map)?;
        covs.push(Gram::from_design(&z, &y)?.g);
        counts.push(z.n_rows());
    }
    let ridge = match ridge_eps {
        Some(e) => e,
        None => {
            let total: usize = counts.iter().sum();
            let trace: f64 = covs
                .iter()
                .zip(&counts)
                .map(|(c, &n)| n as f64 * (0..q).map(|j| c[j * q + j]).sum::<f64>())
                .sum::<f64>()
                / total as f64;
            1e-8 * trace / q as f64
        }
    };
    c_sigma_from_covariances(&covs, &counts, q, ridge)
}

/// Both measures for a target (first dataset with `task_id == 0`) and sources.
pub fn estimate_discrepancies(datasets: &[TaskDataset], map: &FeatureMap) -> Result<DiscrepancyEstimates> {
    let target = datasets
        .iter()
        .position(|d| d.task_id == 0)
        .ok_or_else(|| Error::Validation("target task (task_id 0) missing".into()))?;
    let mut ordered: Vec<&TaskDataset> = vec![&datasets[target]];
    ordered.extend(datasets.iter().enumerate().filter(|(i, _)| *i != target).map(|(_, d)| d));
    let coeffs = ordered
        .iter()
        .map(|d| estimate_reward_coeffs(d, map, None))
        .collect::<Result<Vec<_>>>()?;
    let (h_r_hat, per_task_l1) = estimate_hr(&coeffs)?;
    let c_sigma_hat = estimate_c_sigma(datasets, map, None)?;
    Ok(DiscrepancyEstimates {
        h_r_hat,
        c_sigma_hat,
        per_task_l1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Trajectory, Transition};
    use crate::rng::rng_from;
    use crate::sieve::{BSplineBasis, BasisConfig, BasisMode};
    use crate::simenv::{make_source_spec, make_target_spec, simulate_task, SourcePerturbation};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn one_hot_map(cells: usize) -> FeatureMap {
        let basis = BSplineBasis::new(
            1,
            BasisConfig {
                degree: 0,
                knots_per_dim: cells + 1,
                mode: BasisMode::Tensor,
            },
        )
        .unwrap();
        FeatureMap::new(basis, 2).unwrap()
    }

    fn cell_dataset(task_id: usize, n: usize, seed: u64, reward: impl Fn(usize, usize) -> f64) -> TaskDataset {
        let mut rng = rng_from(seed);
        let mut d = TaskDataset::new(task_id, 1, 2);
        let mut steps = Vec::new();
        for _ in 0..n {
            let s = rng.random_range(0..4usize);
            let a = rng.random_range(0..2usize);
            let x = -1.0 + (2 * s + 1) as f64 / 4.0;
            steps.push(Transition {
                state: vec![x],
                action: a,
                reward: reward(s, a),
                next_state: vec![x],
            });
        }
        d.trajectories.push(Trajectory { steps });
        d
    }

    #[test]
    fn reward_coefficients() {
        let map = one_hot_map(4);
        let zero = cell_dataset(0, 200, 1, |_, _| 0.0);
        assert!(estimate_reward_coeffs(&zero, &map, None).unwrap().iter().all(|v| *v == 0.0));
        // plant a coefficient per (state, action) cell and recover it
        let planted = |s: usize, a: usize| (s as f64 - 1.5) * if a == 0 { 1.0 } else { -2.0 };
        let d = cell_dataset(0, 400, 2, planted);
        let beta = estimate_reward_coeffs(&d, &map, Some(0.0)).unwrap();
        for a in 0..2 {
            for s in 0..4 {
                assert_abs_diff_eq!(beta[a * 4 + s], planted(s, a), epsilon = 1e-6);
            }
        }
        assert_eq!(beta, estimate_reward_coeffs(&d, &map, Some(0.0)).unwrap());
        assert!(estimate_reward_coeffs(&TaskDataset::new(0, 1, 2), &map, None).is_err());
    }

    #[test]
    fn hr_examples() {
        let (h, per) = estimate_hr(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!((h, per), (0.0, vec![0.0]));
        let (h, _) = estimate_hr(&[vec![0.0, 0.0, 0.0], vec![1.0, -2.0, 0.0]]).unwrap();
        assert_eq!(h, 3.0);
        assert!(estimate_hr(&[vec![0.0], vec![0.0, 1.0]]).is_err());
        assert_eq!(estimate_hr(&[vec![4.0]]).unwrap().0, 0.0);
    }

    proptest! {
        #[test]
        fn hr_matches_loop_and_is_symmetric(
            coeffs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..6)
        ) {
            let (h, per) = estimate_hr(&coeffs).unwrap();
            let mut naive = 0.0_f64;
            for k in 1..coeffs.len() {
                let mut s = 0.0;
                for j in 0..6 {
                    s += (coeffs[k][j] - coeffs[0][j]).abs();
                }
                prop_assert!((s - per[k - 1]).abs() <= 1e-12);
                naive = naive.max(s);
            }
            prop_assert!((h - naive).abs() <= 1e-12);
            let mut relabeled = coeffs.clone();
            relabeled[1..].reverse();
            prop_assert_eq!(estimate_hr(&relabeled).unwrap().0, h);
        }
    }

    #[test]
    fn c_sigma_examples() {
        let map = one_hot_map(4);
        let d0 = cell_dataset(0, 300, 3, |s, _| s as f64);
        assert_eq!(estimate_c_sigma(std::slice::from_ref(&d0), &map, None).unwrap(), 1.0);
        let mut d1 = d0.clone();
        d1.task_id = 1;
        let c = estimate_c_sigma(&[d0.clone(), d1], &map, None).unwrap();
        assert_abs_diff_eq!(c, 1.0, epsilon = 1e-9);
        let d2 = cell_dataset(1, 300, 4, |s, _| s as f64);
        assert!(estimate_c_sigma(&[d0, d2], &map, None).unwrap() > 1.0);

        // Σ̄ = diag(2, 1), tasks at Σ̄ ∓ E with E = [[0.5, 0.2], [0.2, 0.1]]:
        // Σ̄⁻¹E = [[0.25, 0.1], [0.2, 0.1]], largest column sum 0.45
        let lo = vec![1.5, -0.2, -0.2, 0.9];
        let hi = vec![2.5, 0.2, 0.2, 1.1];
        let c = c_sigma_from_covariances(&[lo, hi], &[1, 1], 2, 0.0).unwrap();
        assert_abs_diff_eq!(c, 1.45, epsilon = 1e-14);
        let singular = vec![1.0, 1.0, 1.0, 1.0];
        assert!(matches!(
            c_sigma_from_covariances(&[singular.clone(), singular], &[1, 1], 2, 0.0),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn simulated_tasks() {
        let basis = BSplineBasis::new(3, BasisConfig::default()).unwrap();
        let map = FeatureMap::new(basis, 2).unwrap();
        let target = make_target_spec(1, 0.9);
        let d0 = simulate_task(&target, 0, 50, 5, 1).unwrap();
        let est = estimate_discrepancies(std::slice::from_ref(&d0), &map).unwrap();
        assert_eq!(est.c_sigma_hat, 1.0);
        assert_eq!(est.h_r_hat, 0.0);
        assert!(est.per_task_l1.is_empty());
        let src = make_source_spec(&target, SourcePerturbation { sigma_c: 1.0, seed: 2 }).unwrap();
        let d1 = simulate_task(&src, 1, 50, 5, 2).unwrap();
        let est = estimate_discrepancies(&[d0, d1], &map).unwrap();
        assert!(est.c_sigma_hat >= 1.0 - 1e-12);
        assert_eq!(est.per_task_l1.len(), 1);
        assert_eq!(est.h_r_hat, est.per_task_l1[0]);
    }
}
