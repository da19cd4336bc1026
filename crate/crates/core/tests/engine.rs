use transfqi::fqi::{run_single_fqi, run_transfqi, Backup, EngineConfig, LambdaRule};
use transfqi::harness::check::one_hot_map;
use transfqi::harness::stats::median;
use transfqi::mdp::{bellman_operator, sample_trajectories, QTable, TabularMDP};
use transfqi::rng::rng_from;
use transfqi::sieve::{BSplineBasis, BasisConfig, FeatureMap};
use transfqi::simenv::{make_target_spec, simulate_task, STATE_DIM};

#[test]
fn transfer_with_exact_backups_follows_value_iteration() {
    let (n, m, gamma) = (5, 2, 0.8);
    let mdp = TabularMDP::random(n, m, gamma, &mut rng_from(17)).unwrap();
    let behavior = vec![vec![0.5; m]; n];
    let initial = vec![1.0 / n as f64; n];
    let target = sample_trajectories(&mdp, &behavior, &initial, 60, 5, 0.0, 0, 1).unwrap();
    let source = sample_trajectories(&mdp, &behavior, &initial, 120, 5, 0.0, 1, 2).unwrap();
    let map = one_hot_map(n, m).unwrap();
    for lambda in [LambdaRule::Infinite, LambdaRule::Cv { multipliers: None }] {
        let cfg = EngineConfig {
            gamma,
            upsilon: 30,
            reuse_all_data: true,
            vmax: Some(mdp.r_max() / (1.0 - gamma)),
            ridge_eps: Some(0.0),
            lambda: lambda.clone(),
            ..Default::default()
        };
        let out = run_transfqi(&[target.clone(), source.clone()], &map, &cfg, Backup::Exact(&mdp)).unwrap();
        let mut q = QTable::zeros(n, m);
        for coeffs in &out.target_path[1..] {
            q = bellman_operator(&mdp, &q);
            for s in 0..n {
                for a in 0..m {
                    let est = map.eval_q(coeffs, &[mdp.state_coordinate(s)], a, true).unwrap();
                    assert!((est - q.get(s, a)).abs() <= 1e-9, "{lambda:?} ({s},{a}): {est} vs {}", q.get(s, a));
                }
            }
        }
    }
}

#[test]
fn identical_tasks_give_small_corrections() {
    let map = FeatureMap::new(BSplineBasis::new(STATE_DIM, BasisConfig::default()).unwrap(), 2).unwrap();
    let mut ratios = Vec::new();
    for rep in 0..20u64 {
        let spec = make_target_spec(1000 + rep, 0.6);
        let target = simulate_task(&spec, 0, 40, 5, 2 * rep).unwrap();
        let source = simulate_task(&spec, 1, 40, 5, 2 * rep + 1).unwrap();
        let cfg = EngineConfig {
            gamma: 0.6,
            upsilon: 5,
            reuse_all_data: true,
            seed: rep,
            ..Default::default()
        };
        let out = run_transfqi(&[target, source], &map, &cfg, Backup::Sampled).unwrap();
        let w = out.state.w_hat.l1_norm();
        let d = out.state.delta_hat[0].l1_norm();
        ratios.push(d / w);
    }
    let med = median(&ratios).unwrap();
    assert!(med < 0.1, "median |delta|/|w| = {med}, ratios {ratios:?}");
}

#[test]
fn single_fqi_iterates_settle() {
    let spec = make_target_spec(5, 0.6);
    let data = simulate_task(&spec, 0, 200, 5, 9).unwrap();
    let map = FeatureMap::new(BSplineBasis::new(STATE_DIM, BasisConfig::default()).unwrap(), 2).unwrap();
    let cfg = EngineConfig {
        gamma: 0.6,
        upsilon: 20,
        reuse_all_data: true,
        ..Default::default()
    };
    let out = run_single_fqi(&data, &map, &cfg, Backup::Sampled).unwrap();
    let first = out.history.first().unwrap().linf_beta_change;
    let last = out.history.last().unwrap().linf_beta_change;
    assert!(last < 1e-3 * first, "first {first}, last {last}");
}
