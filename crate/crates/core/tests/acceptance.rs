//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use transfqi::diagnostics::{estimate_c_sigma, estimate_hr, estimate_reward_coeffs};
use transfqi::harness::check::{lemma1_suite, oracle_equivalence};
use transfqi::harness::cli::cli_main;
use transfqi::harness::run::{
    feature_map, run_experiment, source_data, source_spec, target_data, target_spec, ReferenceCache, ResultRow,
};
use transfqi::harness::stats::{median, wilcoxon_signed_rank};
use transfqi::harness::{ExperimentConfig, Method};
use transfqi::regress::{lasso_fit, DesignMatrix, LassoOptions};
use transfqi::rng::rng_from;

const ACCEPTANCE_CONFIG: &str = include_str!("../../../configs/acceptance.json");
const SMOKE_CONFIG: &str = include_str!("../../../configs/smoke.json");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let s = lemma1_suite(200, 2024).expect("lemma suite runs");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        s.violations == 0 && s.pairs == 200 && secs < 10.0,
        format!(
            "{} pairs, {} violations, max ratio {:.4}, {secs:.2}s",
            s.pairs, s.violations, s.max_ratio
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let e = oracle_equivalence(5, 2, 0.9, 50, 2024).expect("equivalence runs");
    let secs = start.elapsed().as_secs_f64();
    let dev = e.max_deviation();
    outcome(
        e.deviations.len() == 50 && dev <= 1e-9 && secs < 5.0,
        format!("50 iterations, max deviation {dev:.3e}, {secs:.2}s"),
    )
}

/// KKT violation computed from the raw design, independent of the solver.
fn kkt_from_design(z: &DMatrix<f64>, r: &DVector<f64>, delta: &DVector<f64>, lambda: f64) -> f64 {
    let n = z.nrows() as f64;
    let grad = z.transpose() * (r - z * delta) / n;
    let mut worst = 0.0_f64;
    for j in 0..delta.len() {
        let v = if delta[j] != 0.0 {
            (grad[j] - lambda * delta[j].signum()).abs()
        } else {
            (grad[j].abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

fn criterion_3() -> Outcome {
    let mut rng = rng_from(2024);
    let opts = LassoOptions::default();
    let mut worst_kkt = 0.0_f64;
    let mut worst_ols = 0.0_f64;
    let mut monotone = true;
    let mut failures = 0;
    for _ in 0..100 {
        let p = rng.random_range(5..30usize);
        let n = rng.random_range(2 * p..6 * p);
        let z = DMatrix::<f64>::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let beta = DVector::<f64>::from_fn(p, |j, _| if j % 3 == 0 { StandardNormal.sample(&mut rng) } else { 0.0 });
        let noise = DVector::<f64>::from_fn(n, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            0.5 * e
        });
        let r = &z * &beta + noise;
        let design = DesignMatrix::new(n, p, (0..n).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| z[(i, j)]).collect())
            .expect("design");
        let rv: Vec<f64> = r.iter().copied().collect();
        let lambda_max = (z.transpose() * &r).amax() / n as f64;
        for m in [0.01, 0.1, 1.0] {
            let lambda = m * lambda_max;
            match lasso_fit(&design, &rv, lambda, &opts) {
                Ok(sol) => {
                    let d = DVector::from_vec(sol.delta.clone());
                    worst_kkt = worst_kkt.max(kkt_from_design(&z, &r, &d, lambda));
                    for w in sol.objective_path.windows(2) {
                        if w[1] > w[0] + 1e-12 * (1.0 + w[0].abs()) {
                            monotone = false;
                        }
                    }
                }
                Err(_) => failures += 1,
            }
        }
        // ordinary least squares by SVD as the reference
        let ols = z.clone().svd(true, true).solve(&r, 1e-14).expect("svd solve");
        match lasso_fit(&design, &rv, 0.0, &opts) {
            Ok(sol) => {
                let d = DVector::from_vec(sol.delta);
                worst_ols = worst_ols.max((d - &ols).norm() / ols.norm());
            }
            Err(_) => failures += 1,
        }
    }
    outcome(
        failures == 0 && worst_kkt <= 1e-6 && worst_ols <= 1e-6 && monotone,
        format!(
            "100 problems: max KKT {worst_kkt:.2e}, max OLS relative error {worst_ols:.2e}, monotone {monotone}, failures {failures}"
        ),
    )
}

fn errors(rows: &[ResultRow], sigma: f64, i_source: usize, method: Method) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.sigma_c == sigma && r.i_source == i_source && r.method == method)
        .filter_map(|r| r.mean_abs_error.map(|e| (r.replication, e)))
        .collect();
    v.sort_by_key(|x| x.0);
    v
}

fn values(v: &[(usize, f64)]) -> Vec<f64> {
    v.iter().map(|x| x.1).collect()
}

fn med(v: &[(usize, f64)]) -> f64 {
    median(&values(v)).unwrap_or(f64::NAN)
}

/// Paired p-value over replications present in both samples.
fn paired_p(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let bm: HashMap<usize, f64> = b.iter().copied().collect();
    let (x, y): (Vec<f64>, Vec<f64>) = a.iter().filter_map(|(r, e)| bm.get(r).map(|f| (*e, *f))).unzip();
    wilcoxon_signed_rank(&x, &y).map(|w| w.p_value).unwrap_or(f64::NAN)
}

fn criterion_4(rows: &[ResultRow], reps: usize) -> Outcome {
    let nt = errors(rows, 0.25, 80, Method::NoTransfer);
    let one = errors(rows, 0.25, 80, Method::OneStep);
    let two = errors(rows, 0.25, 80, Method::TwoStep);
    let complete = nt.len() == reps && one.len() == reps && two.len() == reps;
    let (m_nt, m_one, m_two) = (med(&nt), med(&one), med(&two));
    let (p_one, p_two) = (paired_p(&one, &nt), paired_p(&two, &nt));
    outcome(
        complete && m_two < m_nt && m_one < m_nt && p_two < 0.05 && p_one < 0.05,
        format!(
            "medians no_transfer {m_nt:.4}, one_step {m_one:.4} (p {p_one:.2e}), two_step {m_two:.4} (p {p_two:.2e}), fits {}/{}/{}",
            nt.len(),
            one.len(),
            two.len()
        ),
    )
}

fn criterion_5(rows: &[ResultRow], reps: usize) -> Outcome {
    let nt = errors(rows, 1.0, 80, Method::NoTransfer);
    let one = errors(rows, 1.0, 80, Method::OneStep);
    let two = errors(rows, 1.0, 80, Method::TwoStep);
    let complete = nt.len() == reps && one.len() == reps && two.len() == reps;
    let (m_nt, m_one, m_two) = (med(&nt), med(&one), med(&two));
    outcome(
        complete && m_two <= m_one && m_two <= 1.1 * m_nt,
        format!("medians no_transfer {m_nt:.4}, one_step {m_one:.4}, two_step {m_two:.4}"),
    )
}

fn criterion_6(rows: &[ResultRow], reps: usize) -> Outcome {
    let small = errors(rows, 0.25, 10, Method::TwoStep);
    let large = errors(rows, 0.25, 80, Method::TwoStep);
    let (a, b) = (med(&small), med(&large));
    let reduction = 1.0 - b / a;
    outcome(
        small.len() == reps && large.len() == reps && reduction >= 0.10,
        format!("two_step median I1=10 {a:.4}, I1=80 {b:.4}, reduction {:.1}%", 100.0 * reduction),
    )
}

fn criterion_7(base: &ExperimentConfig, rows: &[ResultRow], cache: &ReferenceCache) -> Outcome {
    let small = errors(rows, base.env.sigma_c[0], base.env.i_source[0], Method::NoTransfer);
    let mut cfg = base.clone();
    cfg.env.i_target = 160;
    cfg.env.sigma_c = vec![base.env.sigma_c[0]];
    cfg.env.i_source = vec![base.env.i_source[0]];
    cfg.methods = vec![Method::NoTransfer];
    cfg.diagnostics = false;
    let big_rows = run_experiment(&cfg, cache).expect("I0=160 run");
    let big = errors(&big_rows, cfg.env.sigma_c[0], cfg.env.i_source[0], Method::NoTransfer);
    let (a, b) = (med(&small), med(&big));
    let reduction = 1.0 - b / a;
    outcome(
        small.len() == base.replications && big.len() == base.replications && reduction >= 0.25,
        format!("no_transfer median I0=20 {a:.4}, I0=160 {b:.4}, reduction {:.1}%", 100.0 * reduction),
    )
}

fn criterion_8(base: &ExperimentConfig) -> Outcome {
    let n = 1280;
    let mut cfg = base.clone();
    cfg.replications = 20;
    cfg.env.i_target = n;
    cfg.env.i_source = vec![n];
    cfg.env.sigma_c = vec![0.0, 1.0];
    let map = feature_map(cfg.basis).expect("feature map");
    let mut medians = Vec::new();
    let mut c_sigma_single = true;
    for sigma_idx in 0..2 {
        let mut h = Vec::new();
        for rep in 0..cfg.replications {
            let t = target_spec(&cfg, rep);
            let td = target_data(&cfg, &t, rep).expect("target data");
            let s = source_spec(&cfg, &t, sigma_idx, rep, 0).expect("source spec");
            let sd = source_data(&cfg, &s, sigma_idx, 0, rep, 0).expect("source data");
            let coeffs = vec![
                estimate_reward_coeffs(&td, &map, None).expect("target fit"),
                estimate_reward_coeffs(&sd, &map, None).expect("source fit"),
            ];
            h.push(estimate_hr(&coeffs).expect("h_r").0);
            if sigma_idx == 0 && rep < 5 {
                c_sigma_single &= estimate_c_sigma(std::slice::from_ref(&td), &map, None).expect("c_sigma") == 1.0;
            }
        }
        medians.push(median(&h).expect("median"));
    }
    let ratio = medians[0] / medians[1];
    outcome(
        ratio < 0.25 && c_sigma_single,
        format!(
            "{n} trajectories per task: median h_r_hat sigma 0 {:.3}, sigma 1 {:.3}, ratio {ratio:.3}; c_sigma_hat(K=0) == 1: {c_sigma_single}",
            medians[0], medians[1]
        ),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = dir.path().join("smoke.json");
    std::fs::write(&config, SMOKE_CONFIG).expect("write config");
    let mut files = Vec::new();
    for (i, threads) in ["1", "2"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let code = cli_main([
            "transfqi",
            "run",
            "--config",
            config.to_str().expect("utf-8 path"),
            "--out",
            out.to_str().expect("utf-8 path"),
            "--threads",
            threads,
        ]);
        if code != 0 {
            return outcome(false, format!("run {i} exited with {code}"));
        }
        files.push(std::fs::read(out.join("results.csv")).expect("results"));
    }
    outcome(
        files[0] == files[1] && !files[0].is_empty(),
        format!("two runs (1 and 2 threads), {} bytes each, identical {}", files[0].len(), files[0] == files[1]),
    )
}

fn main() {
    let mut all = true;
    let mut report = |id: usize, o: Outcome| {
        all &= o.pass;
        println!("criterion {id}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());

    let cfg = ExperimentConfig::from_json(ACCEPTANCE_CONFIG).expect("acceptance config");
    let cache = ReferenceCache::new();
    let start = Instant::now();
    let rows = run_experiment(&cfg, &cache).expect("acceptance grid");
    println!(
        "grid: {} rows, {} failed, {:.1}s",
        rows.len(),
        rows.iter().filter(|r| r.mean_abs_error.is_none()).count(),
        start.elapsed().as_secs_f64()
    );
    report(4, criterion_4(&rows, cfg.replications));
    report(5, criterion_5(&rows, cfg.replications));
    report(6, criterion_6(&rows, cfg.replications));
    report(7, criterion_7(&cfg, &rows, &cache));
    report(8, criterion_8(&cfg));
    report(9, criterion_9());
    if !all {
        println!("acceptance: FAIL");
        std::process::exit(1);
    }
    println!("acceptance: PASS");
}
