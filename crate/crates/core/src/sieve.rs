//! B-spline sieve basis on `[-1, 1]^d` and the block state-action feature map.
//!
//! Each coordinate gets a clamped uniform knot vector over `[-1, 1]` with
//! `knots_per_dim` breakpoints (endpoints included), which carries
//! `knots_per_dim + degree - 1` B-splines. In additive mode the per-coordinate
//! families are concatenated and followed by a constant intercept; in tensor
//! mode every cross-product is formed (last coordinate varies fastest).
//!
//! The state-action map places `phi(x)` into block `a` of an `m * p` vector
//! and leaves all other blocks at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    #[default]
    Additive,
    Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub degree: usize,
    pub knots_per_dim: usize,
    pub mode: BasisMode,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            degree: 3,
            knots_per_dim: 4,
            mode: BasisMode::Additive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    dim: usize,
    degree: usize,
    knots_per_dim: usize,
    mode: BasisMode,
    knots: Vec<f64>,
    per_dim: usize,
    p: usize,
}

impl BSplineBasis {
    pub fn new(dim: usize, config: BasisConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("basis dimension must be positive".into()));
        }
        if config.knots_per_dim < 2 {
            return Err(Error::Validation(format!(
                "knots_per_dim must be at least 2 (got {})",
                config.knots_per_dim
            )));
        }
        let breaks = config.knots_per_dim;
        let degree = config.degree;
        let mut knots = Vec::with_capacity(breaks + 2 * degree);
        knots.extend(std::iter::repeat_n(-1.0, degree));
        for j in 0..breaks {
            knots.push(-1.0 + 2.0 * j as f64 / (breaks - 1) as f64);
        }
        // exact endpoint regardless of rounding
        *knots.last_mut().unwrap() = 1.0;
        knots.extend(std::iter::repeat_n(1.0, degree));

        let per_dim = breaks + degree - 1;
        let p = match config.mode {
            BasisMode::Additive => dim * per_dim + 1,
            BasisMode::Tensor => per_dim
                .checked_pow(dim as u32)
                .ok_or_else(|| Error::Validation("tensor basis size overflows".into()))?,
        };
        Ok(BSplineBasis {
            dim,
            degree,
            knots_per_dim: breaks,
            mode: config.mode,
            knots,
            per_dim,
            p,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots_per_dim(&self) -> usize {
        self.knots_per_dim
    }

    pub fn mode(&self) -> BasisMode {
        self.mode
    }

    /// Number of B-splines per coordinate.
    pub fn per_dim(&self) -> usize {
        self.per_dim
    }

    /// Total basis size `p`.
    pub fn len(&self) -> usize {
        self.p
    }

    pub fn is_empty(&self) -> bool {
        self.p == 0
    }

    /// Full clamped knot vector shared by every coordinate.
    pub fn knot_vector(&self) -> &[f64] {
        &self.knots
    }

    /// Knot span index `i` with `knots[i] <= u < knots[i + 1]`; `u = 1`
    /// belongs to the last non-degenerate span.
    fn span(&self, u: f64) -> usize {
        let last = self.per_dim - 1;
        let lo = self.degree;
        if u >= self.knots[last + 1] {
            return last;
        }
        // binary search over spans [lo, last]
        let (mut a, mut b) = (lo, last + 1);
        while b - a > 1 {
            let mid = (a + b) / 2;
            if u < self.knots[mid] {
                b = mid;
            } else {
                a = mid;
            }
        }
        a
    }

    /// The `degree + 1` possibly-nonzero B-splines at `u`, and the index of the first.
    fn local(&self, u: f64, vals: &mut [f64]) -> usize {
        let p = self.degree;
        let i = self.span(u);
        let knots = &self.knots;
        vals[0] = 1.0;
        let mut left = [0.0_f64; 16];
        let mut right = [0.0_f64; 16];
        for j in 1..=p {
            left[j] = u - knots[i + 1 - j];
            right[j] = knots[i + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        i - p
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "point has {} coordinates, basis expects {}",
                x.len(),
                self.dim
            )));
        }
        if let Some(v) = x.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("coordinate {v} outside [-1, 1]")));
        }
        Ok(())
    }

    /// Nonzero basis values at `x` as `(index, value)` pairs, written into `out`.
    pub fn eval_sparse(&self, x: &[f64], out: &mut Vec<(usize, f64)>) -> Result<()> {
        self.check_point(x)?;
        if self.degree > 14 {
            return Err(Error::Validation("degree above 14 is not supported".into()));
        }
        out.clear();
        let k = self.degree + 1;
        let mut vals = [0.0_f64; 16];
        match self.mode {
            BasisMode::Additive => {
                for (d, &u) in x.iter().enumerate() {
                    let first = self.local(u, &mut vals);
                    for (r, &v) in vals[..k].iter().enumerate() {
                        out.push((d * self.per_dim + first + r, v));
                    }
                }
                out.push((self.p - 1, 1.0));
            }
            BasisMode::Tensor => {
                out.push((0, 1.0));
                let mut next = Vec::with_capacity(out.capacity());
                for &u in x {
                    let first = self.local(u, &mut vals);
                    next.clear();
                    for &(idx, w) in out.iter() {
                        for (r, &v) in vals[..k].iter().enumerate() {
                            next.push((idx * self.per_dim + first + r, w * v));
                        }
                    }
                    std::mem::swap(out, &mut next);
                }
            }
        }
        Ok(())
    }

    /// Dense basis vector `phi(x)` of length `p`.
    pub fn eval_phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut sparse = Vec::new();
        self.eval_sparse(x, &mut sparse)?;
        let mut phi = vec![0.0; self.p];
        for (i, v) in sparse {
            phi[i] += v;
        }
        Ok(phi)
    }
}

/// Componentwise `tanh`, mapping `R^d` into `(-1, 1)^d`.
pub fn squash_state(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Linear action-value coefficients plus the clipping level `V_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QCoefficients {
    pub beta: Vec<f64>,
    pub vmax: f64,
}

impl QCoefficients {
    pub fn zeros(len: usize, vmax: f64) -> Self {
        QCoefficients {
            beta: vec![0.0; len],
            vmax,
        }
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(-self.vmax, self.vmax)
    }

    pub fn l1_norm(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    basis: BSplineBasis,
    n_actions: usize,
}

impl FeatureMap {
    pub fn new(basis: BSplineBasis, n_actions: usize) -> Result<Self> {
        if n_actions == 0 {
            return Err(Error::Validation("n_actions must be positive".into()));
        }
        Ok(FeatureMap { basis, n_actions })
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn state_dim(&self) -> usize {
        self.basis.dim
    }

    /// Per-action block size `p`.
    pub fn block_len(&self) -> usize {
        self.basis.p
    }

    /// Feature dimension `m * p`.
    pub fn dim(&self) -> usize {
        self.n_actions * self.basis.p
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(Error::Validation(format!(
                "action {a} out of range (m = {})",
                self.n_actions
            )));
        }
        Ok(())
    }

    pub fn eval_xi(&self, x: &[f64], a: usize) -> Result<Vec<f64>> {
        self.check_action(a)?;
        let phi = self.basis.eval_phi(x)?;
        let mut xi = vec![0.0; self.dim()];
        let p = self.basis.p;
        xi[a * p..(a + 1) * p].copy_from_slice(&phi);
        Ok(xi)
    }

    /// Nonzero entries of `xi(x, a)` as `(index, value)` pairs.
    pub fn eval_xi_sparse(&self, x: &[f64], a: usize, out: &mut Vec<(usize, f64)>) -> Result<()> {
        self.check_action(a)?;
        self.basis.eval_sparse(x, out)?;
        let offset = a * self.basis.p;
        for e in out.iter_mut() {
            e.0 += offset;
        }
        Ok(())
    }

    fn check_coeffs(&self, coeffs: &QCoefficients) -> Result<()> {
        if coeffs.beta.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "coefficient vector has length {}, feature map has {}",
                coeffs.beta.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn eval_q(&self, coeffs: &QCoefficients, x: &[f64], a: usize, clip: bool) -> Result<f64> {
        self.check_action(a)?;
        self.check_coeffs(coeffs)?;
        let mut sparse = Vec::new();
        self.basis.eval_sparse(x, &mut sparse)?;
        let offset = a * self.basis.p;
        let raw: f64 = sparse.iter().map(|&(i, v)| v * coeffs.beta[offset + i]).sum();
        Ok(if clip { coeffs.clip(raw) } else { raw })
    }

    /// `Q(x, a)` for every action, sharing one basis evaluation.
    pub fn q_values(&self, coeffs: &QCoefficients, x: &[f64], clip: bool) -> Result<Vec<f64>> {
        self.check_coeffs(coeffs)?;
        let mut sparse = Vec::new();
        self.basis.eval_sparse(x, &mut sparse)?;
        let p = self.basis.p;
        Ok((0..self.n_actions)
            .map(|a| {
                let raw: f64 = sparse.iter().map(|&(i, v)| v * coeffs.beta[a * p + i]).sum();
                if clip {
                    coeffs.clip(raw)
                } else {
                    raw
                }
            })
            .collect())
    }

    /// `(argmax action, max value)`; ties go to the lowest action index.
    pub fn greedy(&self, coeffs: &QCoefficients, x: &[f64], clip: bool) -> Result<(usize, f64)> {
        let q = self.q_values(coeffs, x, clip)?;
        let mut best = 0;
        for a in 1..q.len() {
            if q[a] > q[best] {
                best = a;
            }
        }
        Ok((best, q[best]))
    }
}
