//! Order statistics and the Wilcoxon signed-rank test.
//!
//! Quantiles use linear interpolation between order statistics: for sorted
//! values `v[0..n]` and probability `p`, `h = (n - 1) p` and
//! `Q(p) = v[⌊h⌋] + (h - ⌊h⌋)(v[⌊h⌋ + 1] - v[⌊h⌋])`.

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyReport("no values to summarize".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("values must be finite".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(quantile_sorted(&sorted_finite(values)?, p))
}

pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

/// Box-plot summary; whiskers reach the most extreme values within
/// `1.5 · IQR` of the quartiles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let v = sorted_finite(values)?;
        let q1 = quantile_sorted(&v, 0.25);
        let q3 = quantile_sorted(&v, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo_fence && *x <= hi_fence).collect();
        Ok(BoxStats {
            n: v.len(),
            min: v[0],
            q1,
            median: quantile_sorted(&v, 0.5),
            q3,
            max: v[v.len() - 1],
            whisker_low: inside[0],
            whisker_high: inside[inside.len() - 1],
            outliers: v.iter().copied().filter(|x| *x < lo_fence || *x > hi_fence).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Permutation,
    Asymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)` over the nonzero differences.
    pub statistic: f64,
    pub p_value: f64,
    pub n_nonzero: usize,
    pub method: WilcoxonMethod,
}

/// Average ranks of `values` (1-based) and whether any ties occurred.
fn average_ranks(values: &[f64]) -> (Vec<f64>, bool) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = false;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        if j - i > 1 {
            ties = true;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    (ranks, ties)
}

/// Counts of each rank sum `0..=n(n+1)/2` over the `2^n` sign patterns.
fn signed_rank_counts(n: usize) -> Vec<f64> {
    let top = n * (n + 1) / 2;
    let mut c = vec![0.0; top + 1];
    c[0] = 1.0;
    for k in 1..=n {
        for s in (k..=top).rev() {
            c[s] += c[s - k];
        }
    }
    c
}

/// Two-sided paired signed-rank test of `x - y`.
///
/// Zero differences are dropped. With at most 50 pairs and no ties or zeros
/// the exact null distribution is used; with ties or zeros and at most 13
/// pairs every sign pattern is enumerated; otherwise the normal
/// approximation with tie correction and no continuity correction applies.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("paired samples of length {} and {}", x.len(), y.len())));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("differences must be finite".into()));
    }
    let n_total = d.len();
    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Err(Error::Domain("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let r_plus: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let r_minus: f64 = ranks.iter().sum::<f64>() - r_plus;
    let statistic = r_plus.min(r_minus);
    let zeros = n_total > n;

    let (p, method) = if n_total <= 50 && !ties && !zeros {
        let counts = signed_rank_counts(n);
        let total = 2f64.powi(n as i32);
        let k = r_plus.round() as usize;
        let cdf: f64 = counts[..=k].iter().sum::<f64>() / total;
        let sf: f64 = counts[k..].iter().sum::<f64>() / total;
        ((2.0 * cdf.min(sf)).min(1.0), WilcoxonMethod::Exact)
    } else if n_total <= 13 {
        let eps = 1e-14 * r_plus.abs();
        let (mut le, mut ge) = (0usize, 0usize);
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            if s <= r_plus + eps {
                le += 1;
            }
            if s >= r_plus - eps {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        ((2.0 * (le.min(ge) as f64) / total).min(1.0), WilcoxonMethod::Permutation)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0);
        let mut i = 0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            var -= (t * t * t - t) / 2.0;
            i = j;
        }
        let se = (var / 24.0).sqrt();
        let z = (r_plus - mean) / se;
        (erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0), WilcoxonMethod::Asymptotic)
    };
    Ok(WilcoxonResult {
        statistic,
        p_value: p,
        n_nonzero: n,
        method,
    })
}
