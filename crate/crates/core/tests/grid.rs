use std::collections::HashSet;

use transfqi::fqi::{EngineConfig, LambdaRule};
use transfqi::harness::config::EnvConfig;
use transfqi::harness::run::{run_experiment, write_results, ReferenceCache};
use transfqi::harness::{ExperimentConfig, Method};
use transfqi::oracle::ReferenceConfig;

fn grid_config() -> ExperimentConfig {
    ExperimentConfig {
        gamma: 0.5,
        env: EnvConfig {
            i_target: 10,
            i_source: vec![10, 20, 40],
            sigma_c: vec![0.25, 1.0],
            ..Default::default()
        },
        engine: EngineConfig {
            upsilon: 3,
            reuse_all_data: true,
            lambda: LambdaRule::Cv {
                multipliers: Some(vec![0.01, 0.1, 1.0]),
            },
            ..Default::default()
        },
        reference: ReferenceConfig {
            n_traj: 100,
            n_eval_points: 20,
            n_rollouts: 20,
            ..Default::default()
        },
        replications: 5,
        master_seed: 11,
        methods: vec![Method::NoTransfer, Method::TwoStep],
        ..Default::default()
    }
}

#[test]
fn every_cell_appears_once_per_replication() {
    let rows = run_experiment(&grid_config(), &ReferenceCache::new()).unwrap();
    assert_eq!(rows.len(), 60);
    let keys: HashSet<(u64, usize, Method, usize)> = rows
        .iter()
        .map(|r| (r.sigma_c.to_bits(), r.i_source, r.method, r.replication))
        .collect();
    assert_eq!(keys.len(), 60);
    assert!(rows.iter().all(|r| r.mean_abs_error.is_some_and(|e| e >= 0.0)));
    assert!(rows.iter().all(|r| r.c_sigma_hat.is_some_and(|c| c >= 1.0 - 1e-12)));
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let cfg = grid_config();
    let csv = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let rows = pool.install(|| run_experiment(&cfg, &ReferenceCache::new())).unwrap();
        let mut buf = Vec::new();
        write_results(&rows, &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(1), csv(3));
}

#[test]
fn adding_a_method_keeps_other_rows() {
    let cfg = grid_config();
    let mut more = cfg.clone();
    more.methods.push(Method::OneStep);
    let a = run_experiment(&cfg, &ReferenceCache::new()).unwrap();
    let b = run_experiment(&more, &ReferenceCache::new()).unwrap();
    let b_kept: Vec<_> = b.into_iter().filter(|r| r.method != Method::OneStep).collect();
    assert_eq!(a, b_kept);
}
