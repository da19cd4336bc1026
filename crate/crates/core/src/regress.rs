//! Linear regression kernels used by the engines.
//!
//! * [`ols_fit`]: least squares on the normal equations
//!   `(ZᵀZ/n + ε I) w = Zᵀy/n`, solved by Cholesky.
//! * [`lasso_fit`]: cyclic coordinate descent on
//!   `(1/2n)‖r − Zδ‖² + λ‖δ‖₁` using covariance (Gram) updates.
//! * [`cross_validate_lambda`]: K-fold selection of `λ` where folds are
//!   formed from whole groups (trajectories).
//!
//! All routines sweep coordinates in a fixed order and never pivot randomly,
//! so identical inputs give bit-identical outputs.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Above this estimate of `cond(ZᵀZ)` an unregularized system counts as singular.
const SINGULAR_CONDITION: f64 = 1e14;

/// Dense row-major `n × q` design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    q: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(n: usize, q: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || q == 0 {
            return Err(Error::Validation(format!("design must be non-empty (got {n} x {q})")));
        }
        if data.len() != n * q {
            return Err(Error::Dimension(format!(
                "design data has {} entries, expected {n} x {q}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("design contains NaN or Inf".into()));
        }
        Ok(DesignMatrix { n, q, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let q = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != q) {
            return Err(Error::Dimension("ragged design rows".into()));
        }
        DesignMatrix::new(rows.len(), q, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.q..(i + 1) * self.q]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.q)
    }

    /// `Z v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.rows().map(|r| dot(r, v)).collect()
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.q);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DesignMatrix::new(idx.len(), self.q, data)
    }

    /// Accumulates `ZᵀZ` and `Zᵀy` (unnormalized) for the given rows.
    fn cross_products(&self, y: &[f64], rows: impl Iterator<Item = usize>) -> (Vec<f64>, Vec<f64>, f64, usize) {
        let q = self.q;
        let mut g = vec![0.0; q * q];
        let mut c = vec![0.0; q];
        let mut yy = 0.0;
        let mut count = 0;
        for i in rows {
            let r = self.row(i);
            for (j, &rj) in r.iter().enumerate() {
                if rj == 0.0 {
                    continue;
                }
                c[j] += rj * y[i];
                let gj = &mut g[j * q..(j + 1) * q];
                for (k, &rk) in r.iter().enumerate() {
                    gj[k] += rj * rk;
                }
            }
            yy += y[i] * y[i];
            count += 1;
        }
        (g, c, yy, count)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized second moments of a regression problem:
/// `G = ZᵀZ/n`, `c = Zᵀy/n`, `yy = yᵀy/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    pub q: usize,
    pub n: usize,
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub yy: f64,
}

impl Gram {
    pub fn from_design(z: &DesignMatrix, y: &[f64]) -> Result<Self> {
        check_response(z, y)?;
        Gram::from_rows(z, y, 0..z.n)
    }

    fn from_rows(z: &DesignMatrix, y: &[f64], rows: impl Iterator<Item = usize>) -> Result<Self> {
        let (mut g, mut c, yy, n) = z.cross_products(y, rows);
        if n == 0 {
            return Err(Error::Validation("no rows selected".into()));
        }
        let inv = 1.0 / n as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        c.iter_mut().for_each(|v| *v *= inv);
        Ok(Gram {
            q: z.q,
            n,
            g,
            c,
            yy: yy * inv,
        })
    }

    /// Row-count-weighted combination of several problems sharing columns.
    pub fn pooled(parts: &[&Gram]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("nothing to pool".into()))?;
        if parts.len() == 1 {
            return Ok((*first).clone());
        }
        let q = first.q;
        if parts.iter().any(|p| p.q != q) {
            return Err(Error::Dimension("pooled problems disagree on column count".into()));
        }
        let n: usize = parts.iter().map(|p| p.n).sum();
        let mut g = vec![0.0; q * q];
        let mut c = vec![0.0; q];
        let mut yy = 0.0;
        for p in parts {
            let w = p.n as f64;
            g.iter_mut().zip(&p.g).for_each(|(a, b)| *a += w * b);
            c.iter_mut().zip(&p.c).for_each(|(a, b)| *a += w * b);
            yy += w * p.yy;
        }
        let inv = 1.0 / n as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        c.iter_mut().for_each(|v| *v *= inv);
        Ok(Gram { q, n, g, c, yy: yy * inv })
    }

    pub fn trace(&self) -> f64 {
        (0..self.q).map(|j| self.g[j * self.q + j]).sum()
    }

    /// The smallest `λ` for which the lasso solution is identically zero: `‖c‖∞`.
    pub fn lambda_max(&self) -> f64 {
        self.c.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn objective(&self, delta: &[f64], g_delta: &[f64], lambda: f64) -> f64 {
        0.5 * self.yy - dot(&self.c, delta) + 0.5 * dot(delta, g_delta) + lambda * l1(delta)
    }

    fn mul(&self, v: &[f64]) -> Vec<f64> {
        self.g.chunks(self.q).map(|row| dot(row, v)).collect()
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn check_response(z: &DesignMatrix, y: &[f64]) -> Result<()> {
    if y.len() != z.n {
        return Err(Error::Dimension(format!(
            "response has length {}, design has {} rows",
            y.len(),
            z.n
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("response contains NaN or Inf".into()));
    }
    Ok(())
}

/// Default ridge level for stabilizing the pooled fit: `1e-8 · trace(G) / q`.
pub fn default_ridge(gram: &Gram) -> f64 {
    1e-8 * gram.trace() / gram.q as f64
}

/// Solves `(G + ε I) w = c`.
pub fn solve_gram(gram: &Gram, ridge_eps: f64) -> Result<Vec<f64>> {
    if !(ridge_eps >= 0.0) {
        return Err(Error::Validation(format!("ridge_eps must be nonnegative, got {ridge_eps}")));
    }
    let q = gram.q;
    let mut a = DMatrix::from_row_slice(q, q, &gram.g);
    for j in 0..q {
        a[(j, j)] += ridge_eps;
    }
    let diag_max = (0..q).fold(0.0_f64, |m, j| m.max(a[(j, j)].abs()));
    let chol = a.cholesky().ok_or_else(|| Error::Singular {
        context: format!("normal equations ({q} columns, ridge {ridge_eps:e})"),
        condition: f64::INFINITY,
    })?;
    let l = chol.l_dirty();
    let (mut lmin, mut lmax) = (f64::INFINITY, 0.0_f64);
    for j in 0..q {
        let d = l[(j, j)].abs();
        lmin = lmin.min(d);
        lmax = lmax.max(d);
    }
    let condition = if lmin > 0.0 { (lmax / lmin).powi(2) } else { f64::INFINITY };
    if ridge_eps == 0.0 && (condition > SINGULAR_CONDITION || diag_max == 0.0) {
        return Err(Error::Singular {
            context: format!("unregularized normal equations ({q} columns)"),
            condition,
        });
    }
    let w = chol.solve(&DVector::from_column_slice(&gram.c));
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            context: "normal equations produced non-finite solution".into(),
            condition,
        });
    }
    Ok(w.iter().copied().collect())
}

/// Least squares with optional ridge stabilization.
pub fn ols_fit(z: &DesignMatrix, y: &[f64], ridge_eps: f64) -> Result<Vec<f64>> {
    let gram = Gram::from_design(z, y)?;
    solve_gram(&gram, ridge_eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoOptions {
    /// Sweeps stop once the largest coordinate change, scaled by the root
    /// mean square of its column, is at most `tol`...
    pub tol: f64,
    /// ...and the KKT violation is at most `kkt_tol`.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            tol: 1e-10,
            kkt_tol: 1e-7,
            max_sweeps: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub delta: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub kkt_violation: f64,
    /// Objective value after every sweep (first entry: at the start point).
    pub objective_path: Vec<f64>,
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest KKT violation of `delta` for the lasso problem described by `gram`.
pub fn kkt_violation(gram: &Gram, delta: &[f64], lambda: f64) -> f64 {
    let g_delta = gram.mul(delta);
    let mut worst = 0.0_f64;
    for j in 0..gram.q {
        let grad = gram.c[j] - g_delta[j];
        let v = if delta[j] == 0.0 {
            (grad.abs() - lambda).max(0.0)
        } else {
            (grad - lambda * delta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Target point for one feature-sign step on the support `active` with signs
/// `theta`. If the smooth part is flat along some direction that still lowers
/// the penalty, the target moves along that direction up to the first zero
/// crossing; otherwise it is the minimum-norm solution of
/// `G_AA x = c_A - λ θ_A`.
fn support_target(gram: &Gram, active: &[usize], delta: &[f64], theta: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let a = active.len();
    let sub = DMatrix::from_fn(a, a, |r, c| gram.g[active[r] * gram.q + active[c]]);
    let b = DVector::from_iterator(a, active.iter().map(|&j| gram.c[j] - lambda * theta[j]));
    let d_a = DVector::from_iterator(a, active.iter().map(|&j| delta[j]));
    let svd = sub.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return None;
    }
    let v_t = svd.v_t.as_ref()?;
    let r = &b - &sub * &d_a;
    let mut null_part = DVector::zeros(a);
    for (i, &sv) in svd.singular_values.iter().enumerate() {
        if sv <= 1e-13 * smax {
            let v = v_t.row(i).transpose();
            null_part += &v * v.dot(&r);
        }
    }
    if null_part.norm() > 1e-12 * b.norm().max(1.0) {
        let mut t = f64::INFINITY;
        for i in 0..a {
            let (d, v) = (d_a[i], null_part[i]);
            if d != 0.0 && v != 0.0 && v.signum() != d.signum() {
                t = t.min(-d / v);
            }
        }
        if !t.is_finite() {
            return None;
        }
        return Some((&d_a + null_part * t).iter().copied().collect());
    }
    let x = svd.solve(&b, 1e-13 * smax).ok()?;
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(x.iter().copied().collect())
}

/// Feature-sign search (an exact active-set method) started from `delta`.
///
/// Each step fixes a sign pattern, heads for the minimizer of the objective
/// on that orthant and line-searches over the sign-change breakpoints on the
/// way. The objective never increases; the loop stops at a KKT point, when
/// progress stops, or after `20 q` steps.
fn feature_sign(gram: &Gram, delta: &[f64], lambda: f64, kkt_tol: f64) -> Vec<f64> {
    let q = gram.q;
    let sign = |d: &f64| if *d == 0.0 { 0.0 } else { d.signum() };
    let mut delta = delta.to_vec();
    let mut theta: Vec<f64> = delta.iter().map(sign).collect();
    let objective = |d: &[f64]| gram.objective(d, &gram.mul(d), lambda);
    let mut current = objective(&delta);
    for _ in 0..20 * q {
        let g_delta = gram.mul(&delta);
        let grad: Vec<f64> = (0..q).map(|j| gram.c[j] - g_delta[j]).collect();
        let active_ok = (0..q)
            .filter(|&j| theta[j] != 0.0)
            .all(|j| delta[j] != 0.0 && (grad[j] - lambda * theta[j]).abs() <= kkt_tol);
        if active_ok {
            let mut best: Option<(usize, f64)> = None;
            for j in (0..q).filter(|&j| theta[j] == 0.0) {
                let excess = grad[j].abs() - lambda;
                if excess > kkt_tol && best.is_none_or(|(_, e)| excess > e) {
                    best = Some((j, excess));
                }
            }
            match best {
                Some((j, _)) => theta[j] = grad[j].signum(),
                None => break,
            }
        }
        let active: Vec<usize> = (0..q).filter(|&j| theta[j] != 0.0).collect();
        let Some(x) = support_target(gram, &active, &delta, &theta, lambda) else { break };
        let mut ts = vec![1.0];
        for (i, &j) in active.iter().enumerate() {
            if delta[j] != 0.0 && x[i].signum() != delta[j].signum() {
                ts.push(delta[j] / (delta[j] - x[i]));
            }
        }
        let mut best_point: Option<(f64, Vec<f64>)> = None;
        for &t in &ts {
            let mut cand = delta.clone();
            for (i, &j) in active.iter().enumerate() {
                let v = delta[j] + t * (x[i] - delta[j]);
                let crossed = delta[j] != 0.0
                    && (v.signum() != delta[j].signum()
                        || (x[i].signum() != delta[j].signum() && delta[j] / (delta[j] - x[i]) == t));
                cand[j] = if crossed { 0.0 } else { v };
            }
            let obj = objective(&cand);
            if best_point.as_ref().is_none_or(|(o, _)| obj < *o) {
                best_point = Some((obj, cand));
            }
        }
        let (obj, cand) = best_point.expect("at least one candidate");
        if obj > current {
            break;
        }
        delta = cand;
        current = obj;
        theta = delta.iter().map(sign).collect();
    }
    delta
}

/// Coordinate descent on a prepared Gram problem, optionally warm-started.
///
/// Collinear or underdetermined designs make plain sweeps crawl along flat
/// directions, so every 50 sweeps without convergence the current point is
/// handed to an exact active-set search, whose result is kept only if it does
/// not raise the objective.
pub fn lasso_gram(gram: &Gram, lambda: f64, opts: &LassoOptions, warm: Option<&[f64]>) -> Result<LassoSolution> {
    if !(lambda >= 0.0) {
        return Err(Error::Validation(format!("lambda must be nonnegative, got {lambda}")));
    }
    let q = gram.q;
    let mut delta = match warm {
        Some(w) if w.len() == q => w.to_vec(),
        Some(_) => return Err(Error::Dimension("warm start has wrong length".into())),
        None => vec![0.0; q],
    };
    if lambda >= gram.lambda_max() {
        delta.iter_mut().for_each(|d| *d = 0.0);
        return Ok(LassoSolution {
            kkt_violation: kkt_violation(gram, &delta, lambda),
            objective_path: vec![0.5 * gram.yy],
            delta,
            lambda,
            iterations: 0,
        });
    }
    let mut g_delta = gram.mul(&delta);
    let mut objective_path = vec![gram.objective(&delta, &g_delta, lambda)];
    let mut sweeps = 0;
    loop {
        let mut max_change = 0.0_f64;
        for j in 0..q {
            let gjj = gram.g[j * q + j];
            if gjj <= 0.0 {
                if delta[j] != 0.0 {
                    // column is identically zero: its coefficient only adds penalty
                    let old = delta[j];
                    delta[j] = 0.0;
                    max_change = max_change.max(old.abs());
                }
                continue;
            }
            let old = delta[j];
            let rho = gram.c[j] - g_delta[j] + gjj * old;
            let new = soft_threshold(rho, lambda) / gjj;
            let change = new - old;
            if change != 0.0 {
                delta[j] = new;
                let col = &gram.g[j * q..(j + 1) * q];
                for (gd, gk) in g_delta.iter_mut().zip(col) {
                    *gd += gk * change;
                }
                max_change = max_change.max(change.abs() * gjj.sqrt());
            }
        }
        sweeps += 1;
        let mut current = gram.objective(&delta, &g_delta, lambda);
        if sweeps % 50 == 0 && max_change > opts.tol {
            g_delta = gram.mul(&delta);
            if kkt_violation(gram, &delta, lambda) > opts.kkt_tol {
                let cand = feature_sign(gram, &delta, lambda, 0.1 * opts.kkt_tol);
                let cand_g = gram.mul(&cand);
                let cand_obj = gram.objective(&cand, &cand_g, lambda);
                if cand_obj <= current {
                    delta = cand;
                    g_delta = cand_g;
                    current = cand_obj;
                    max_change = 0.0;
                }
            }
        }
        let previous = *objective_path.last().unwrap();
        objective_path.push(current);
        // on flat optimal faces the iterates can creep without improving anything
        let stalled = previous - current <= 64.0 * f64::EPSILON * (1.0 + current.abs());
        if max_change <= opts.tol || stalled {
            // refresh the running product before judging optimality
            g_delta = gram.mul(&delta);
            let kkt = kkt_violation(gram, &delta, lambda);
            if kkt <= opts.kkt_tol {
                return Ok(LassoSolution {
                    delta,
                    lambda,
                    iterations: sweeps,
                    kkt_violation: kkt,
                    objective_path,
                });
            }
        }
        if sweeps >= opts.max_sweeps {
            return Err(Error::LassoMaxIter {
                sweeps,
                kkt_violation: kkt_violation(gram, &delta, lambda),
            });
        }
    }
}

/// Lasso on a design matrix and residual response.
pub fn lasso_fit(z: &DesignMatrix, r: &[f64], lambda: f64, opts: &LassoOptions) -> Result<LassoSolution> {
    let gram = Gram::from_design(z, r)?;
    lasso_gram(&gram, lambda, opts, None)
}

/// `count` log-spaced values from `lo_ratio · scale` up to `scale`, in
/// increasing order.
pub fn log_grid(scale: f64, lo_ratio: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![scale];
    }
    let (a, b) = (lo_ratio.ln(), 0.0);
    (0..count)
        .map(|i| scale * (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Default relative `λ` grid: 20 log-spaced multipliers in `[1e-4, 1]` of `λ_max`.
pub fn default_lambda_multipliers() -> Vec<f64> {
    log_grid(1.0, 1e-4, 20)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub lambda: f64,
    /// Pooled held-out mean squared error per grid entry (same order as the grid).
    pub mse: Vec<f64>,
}

/// Picks `λ` from `grid` by `folds`-fold cross-validation. Rows sharing a
/// `group` label (a trajectory) always land in the same fold. Ties in held-out
/// error go to the larger `λ`.
pub fn cross_validate_lambda(
    z: &DesignMatrix,
    r: &[f64],
    groups: &[usize],
    grid: &[f64],
    folds: usize,
    seed: u64,
    opts: &LassoOptions,
) -> Result<CvResult> {
    check_response(z, r)?;
    if groups.len() != z.n {
        return Err(Error::Dimension("group labels must cover every row".into()));
    }
    if grid.is_empty() {
        return Err(Error::Validation("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Validation("lambda grid entries must be nonnegative".into()));
    }
    if folds < 2 {
        return Err(Error::Validation(format!("need at least 2 folds, got {folds}")));
    }
    if grid.len() == 1 {
        return Ok(CvResult {
            lambda: grid[0],
            mse: vec![f64::NAN],
        });
    }
    let mut labels: Vec<usize> = groups.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < folds {
        return Err(Error::Validation(format!(
            "{} groups cannot fill {folds} folds",
            labels.len()
        )));
    }
    labels.shuffle(&mut rng_from(seed));
    let fold_of = |g: usize| labels.iter().position(|&l| l == g).unwrap() % folds;
    let row_fold: Vec<usize> = groups.iter().map(|&g| fold_of(g)).collect();

    // visit the grid from large to small λ so warm starts follow the path
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]).then(a.cmp(&b)));

    let mut sse = vec![0.0; grid.len()];
    let mut held_total = 0usize;
    for f in 0..folds {
        let train = Gram::from_rows(z, r, (0..z.n).filter(|&i| row_fold[i] != f))?;
        let held: Vec<usize> = (0..z.n).filter(|&i| row_fold[i] == f).collect();
        held_total += held.len();
        let mut warm: Option<Vec<f64>> = None;
        for &gi in &order {
            let sol = lasso_gram(&train, grid[gi], opts, warm.as_deref())?;
            for &i in &held {
                let e = r[i] - dot(z.row(i), &sol.delta);
                sse[gi] += e * e;
            }
            warm = Some(sol.delta);
        }
    }
    let mse: Vec<f64> = sse.iter().map(|s| s / held_total as f64).collect();
    let mut best = order[0];
    for &gi in &order[1..] {
        // strict improvement only: equal error keeps the larger λ
        if mse[gi] < mse[best] {
            best = gi;
        }
    }
    Ok(CvResult {
        lambda: grid[best],
        mse,
    })
}
