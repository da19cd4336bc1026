//! Quadratic-reward linear-Gaussian environment family and transition CSV I/O.
//!
//! Raw states follow `x' = s · diag(a, -a, a) · x + ε` with `a = ±1`, rewards
//! are `a · xᵀ C x + ε_r`, and estimators see `tanh(x)`. Action index 0 is
//! `a = -1`, index 1 is `a = +1`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{TaskDataset, Trajectory, Transition};
use crate::env::{simulate, Environment};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::sieve::squash_state;

pub const STATE_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadEnvSpec {
    pub c_matrix: [[f64; STATE_DIM]; STATE_DIM],
    pub dyn_scale: f64,
    pub state_noise_sd: f64,
    pub reward_noise_sd: f64,
    pub gamma: f64,
}

impl QuadEnvSpec {
    pub fn new(c_matrix: [[f64; STATE_DIM]; STATE_DIM], gamma: f64) -> Self {
        QuadEnvSpec {
            c_matrix,
            dyn_scale: 0.75,
            state_noise_sd: 0.5,
            reward_noise_sd: 0.5,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("reward matrix must be finite".into()));
        }
        if !(self.state_noise_sd >= 0.0) || !(self.reward_noise_sd >= 0.0) {
            return Err(Error::Validation("noise standard deviations must be nonnegative".into()));
        }
        if !self.dyn_scale.is_finite() {
            return Err(Error::Validation("dyn_scale must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    /// `±1` value of an action index.
    pub fn action_sign(action: usize) -> f64 {
        if action == 0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Noise-free reward `a · xᵀ C x` at a raw state.
    pub fn mean_reward(&self, x: &[f64], action: usize) -> f64 {
        let mut quad = 0.0;
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                quad += x[i] * self.c_matrix[i][j] * x[j];
            }
        }
        Self::action_sign(action) * quad
    }

    /// Noise-free next raw state.
    pub fn mean_next(&self, x: &[f64], action: usize) -> Vec<f64> {
        let a = Self::action_sign(action);
        let signs = [a, -a, a];
        (0..STATE_DIM).map(|i| self.dyn_scale * signs[i] * x[i]).collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl Environment for QuadEnvSpec {
    fn obs_dim(&self) -> usize {
        STATE_DIM
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..STATE_DIM).map(|_| normal(rng)).collect()
    }

    fn behavior_action(&self, _state: &[f64], rng: &mut ChaCha8Rng) -> usize {
        usize::from(rng.random_bool(0.5))
    }

    fn step(&self, state: &[f64], action: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
        let reward = self.mean_reward(state, action) + self.reward_noise_sd * normal(rng);
        let next = self
            .mean_next(state, action)
            .into_iter()
            .map(|m| m + self.state_noise_sd * normal(rng))
            .collect();
        (reward, next)
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        squash_state(state)
    }
}

/// Target task: diagonal of `C` drawn `N(0, 1)`, off-diagonal `N(0, 1/4)`.
pub fn make_target_spec(seed: u64, gamma: f64) -> QuadEnvSpec {
    let mut rng = rng_from(seed);
    let mut c = [[0.0; STATE_DIM]; STATE_DIM];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let sd = if i == j { 1.0 } else { 0.5 };
            *v = sd * normal(&mut rng);
        }
    }
    QuadEnvSpec::new(c, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourcePerturbation {
    pub sigma_c: f64,
    pub seed: u64,
}

/// Source task: every entry of `C` shifted by independent `N(0, sigma_c²)`.
pub fn make_source_spec(target: &QuadEnvSpec, pert: SourcePerturbation) -> Result<QuadEnvSpec> {
    if !(pert.sigma_c >= 0.0) || !pert.sigma_c.is_finite() {
        return Err(Error::Validation(format!("sigma_c must be nonnegative, got {}", pert.sigma_c)));
    }
    let mut rng = rng_from(pert.seed);
    let mut spec = target.clone();
    for row in spec.c_matrix.iter_mut() {
        for v in row.iter_mut() {
            let e = normal(&mut rng);
            if pert.sigma_c > 0.0 {
                *v += pert.sigma_c * e;
            }
        }
    }
    Ok(spec)
}

pub fn simulate_task(spec: &QuadEnvSpec, task_id: usize, n_traj: usize, horizon: usize, seed: u64) -> Result<TaskDataset> {
    spec.validate()?;
    Ok(simulate(spec, task_id, n_traj, horizon, seed))
}

/// Shape of a transition file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub state_dim: usize,
    pub n_actions: usize,
}

fn header(state_dim: usize) -> Vec<String> {
    let mut h = vec!["task_id".to_string(), "traj_id".into(), "t".into()];
    h.extend((1..=state_dim).map(|i| format!("s_{i}")));
    h.push("action".into());
    h.push("reward".into());
    h.extend((1..=state_dim).map(|i| format!("sp_{i}")));
    h
}

/// Writes `task_id,traj_id,t,s_1..s_d,action,reward,sp_1..sp_d` rows.
pub fn write_transitions<W: Write>(data: &TaskDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(data.state_dim))?;
    let mut record = Vec::new();
    for (i, traj) in data.trajectories.iter().enumerate() {
        for (t, tr) in traj.steps.iter().enumerate() {
            record.clear();
            record.push(data.task_id.to_string());
            record.push(i.to_string());
            record.push(t.to_string());
            record.extend(tr.state.iter().map(|v| v.to_string()));
            record.push(tr.action.to_string());
            record.push(tr.reward.to_string());
            record.extend(tr.next_state.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_transitions_csv(data: &TaskDataset, path: &Path) -> Result<()> {
    write_transitions(data, std::fs::File::create(path)?)
}

/// Parses a transition file written by [`write_transitions`] (or any file with
/// the same layout). Rows of a trajectory must be consecutive with
/// `t = 0, 1, 2, ...`; all rows must share one task id.
pub fn read_transitions<R: Read>(input: R, schema: CsvSchema) -> Result<TaskDataset> {
    let d = schema.state_dim;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let expected = header(d);
    let found: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if found != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("header {:?} does not match expected {:?}", found.join(","), expected.join(",")),
        });
    }
    let mut data = TaskDataset::new(0, d, schema.n_actions);
    let mut task: Option<usize> = None;
    let mut current: Option<String> = None;
    let mut seen_traj: Vec<String> = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != 2 * d + 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", 2 * d + 5, rec.len()),
            });
        }
        let field = |i: usize| rec.get(i).unwrap().trim();
        let parse_f = |i: usize| -> Result<f64> {
            let v: f64 = field(i).parse().map_err(|_| Error::Parse {
                line,
                message: format!("field {} is not a number: {:?}", i + 1, field(i)),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("field {} is not finite", i + 1),
                });
            }
            Ok(v)
        };
        let parse_u = |i: usize, name: &str| -> Result<usize> {
            field(i).parse().map_err(|_| Error::Parse {
                line,
                message: format!("{name} must be a nonnegative integer, got {:?}", field(i)),
            })
        };
        let task_id = parse_u(0, "task_id")?;
        match task {
            None => task = Some(task_id),
            Some(k) if k != task_id => {
                return Err(Error::Validation(format!(
                    "line {line}: task_id {task_id} differs from {k}; one task per file"
                )))
            }
            _ => {}
        }
        let traj = field(1).to_string();
        let t = parse_u(2, "t")?;
        let state = (3..3 + d).map(parse_f).collect::<Result<Vec<_>>>()?;
        let action = parse_u(3 + d, "action")?;
        if action >= schema.n_actions {
            return Err(Error::Parse {
                line,
                message: format!("action {action} out of range for {} actions", schema.n_actions),
            });
        }
        let reward = parse_f(4 + d)?;
        let next_state = (5 + d..5 + 2 * d).map(parse_f).collect::<Result<Vec<_>>>()?;
        if current.as_deref() != Some(traj.as_str()) {
            if seen_traj.contains(&traj) {
                return Err(Error::Validation(format!("line {line}: trajectory {traj} is not contiguous")));
            }
            seen_traj.push(traj.clone());
            current = Some(traj);
            data.trajectories.push(Trajectory::default());
        }
        let steps = &mut data.trajectories.last_mut().unwrap().steps;
        if t != steps.len() {
            return Err(Error::Validation(format!(
                "line {line}: expected t = {}, found {t}",
                steps.len()
            )));
        }
        steps.push(Transition {
            state,
            action,
            reward,
            next_state,
        });
    }
    data.task_id = task.unwrap_or(0);
    Ok(data)
}

pub fn load_transitions_csv(path: &Path, schema: CsvSchema) -> Result<TaskDataset> {
    read_transitions(std::fs::File::open(path)?, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::mix_seed;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn target_spec_distribution() {
        assert_eq!(make_target_spec(3, 0.9), make_target_spec(3, 0.9));
        let mut diag = Vec::new();
        let mut off = Vec::new();
        for s in 0..10_000u64 {
            let c = make_target_spec(mix_seed(s, &[]), 0.9).c_matrix;
            for i in 0..3 {
                for j in 0..3 {
                    if i == j {
                        diag.push(c[i][j]);
                    } else {
                        off.push(c[i][j]);
                    }
                }
            }
        }
        let vd = variance(&diag);
        let vo = variance(&off);
        assert!((0.9..=1.1).contains(&vd), "diag variance {vd}");
        assert!((0.225..=0.275).contains(&vo), "off-diagonal variance {vo}");
    }

    #[test]
    fn source_perturbation() {
        let target = make_target_spec(1, 0.9);
        let same = make_source_spec(&target, SourcePerturbation { sigma_c: 0.0, seed: 5 }).unwrap();
        assert_eq!(same.c_matrix, target.c_matrix);
        let pert = SourcePerturbation { sigma_c: 0.5, seed: 5 };
        assert_eq!(make_source_spec(&target, pert).unwrap(), make_source_spec(&target, pert).unwrap());
        let mut diffs = Vec::new();
        for s in 0..10_000u64 {
            let src = make_source_spec(&target, SourcePerturbation { sigma_c: 0.5, seed: s }).unwrap();
            diffs.push(src.c_matrix[0][1] - target.c_matrix[0][1]);
        }
        let sd = variance(&diffs).sqrt();
        assert!((sd - 0.5).abs() <= 0.025, "sd {sd}");
        assert!(make_source_spec(&target, SourcePerturbation { sigma_c: -1.0, seed: 0 }).is_err());
    }

    #[test]
    fn deterministic_dynamics() {
        let mut c = [[0.0; 3]; 3];
        c[0][0] = 2.5;
        c[1][2] = 7.0;
        let spec = QuadEnvSpec {
            state_noise_sd: 0.0,
            reward_noise_sd: 0.0,
            ..QuadEnvSpec::new(c, 0.9)
        };
        let mut rng = rng_from(0);
        let (r, next) = spec.step(&[1.0, 0.0, 0.0], 1, &mut rng);
        assert_eq!(next, vec![0.75, 0.0, 0.0]);
        assert_eq!(r, 2.5);
        let (r, next) = spec.step(&[1.0, 0.0, 0.0], 0, &mut rng);
        assert_eq!(next, vec![-0.75, 0.0, 0.0]);
        assert_eq!(r, -2.5);
        let (_, next) = spec.step(&[1.0, 2.0, -1.0], 1, &mut rng);
        assert_eq!(next, vec![0.75, -1.5, -0.75]);
    }

    proptest! {
        #[test]
        fn raw_chain_contracts_isometrically(x in prop::array::uniform3(-5.0f64..5.0), a in 0usize..2) {
            let spec = QuadEnvSpec { state_noise_sd: 0.0, reward_noise_sd: 0.0, ..make_target_spec(0, 0.9) };
            let next = spec.mean_next(&x, a);
            let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
            prop_assert!((norm(&next) - 0.75 * norm(&x)).abs() <= 1e-12 * (1.0 + norm(&x)));
        }
    }

    #[test]
    fn simulated_data_shape() {
        let spec = make_target_spec(2, 0.9);
        let empty = simulate_task(&spec, 0, 0, 5, 1).unwrap();
        assert!(empty.is_empty());
        let d = simulate_task(&spec, 3, 40, 5, 1).unwrap();
        assert_eq!(d.task_id, 3);
        assert_eq!(d.n_samples(), 200);
        for tr in d.transitions() {
            assert!(tr.state.iter().chain(&tr.next_state).all(|v| v.abs() < 1.0));
        }
        // consecutive observations chain within a trajectory
        for traj in &d.trajectories {
            for w in traj.steps.windows(2) {
                assert_eq!(w[0].next_state, w[1].state);
            }
        }
        assert_eq!(d, simulate_task(&spec, 3, 40, 5, 1).unwrap());
    }

    #[test]
    fn behavior_actions_balanced() {
        let spec = make_target_spec(4, 0.9);
        let d = simulate_task(&spec, 0, 20_000, 5, 9).unwrap();
        let n = d.n_samples() as f64;
        let mean: f64 = d.transitions().map(|t| QuadEnvSpec::action_sign(t.action)).sum::<f64>() / n;
        assert!(mean.abs() <= 3.0 / n.sqrt(), "mean action {mean}");
    }

    #[test]
    fn csv_round_trip() {
        let spec = make_target_spec(5, 0.9);
        let d = simulate_task(&spec, 1, 7, 5, 2).unwrap();
        let mut buf = Vec::new();
        write_transitions(&d, &mut buf).unwrap();
        let schema = CsvSchema { state_dim: 3, n_actions: 2 };
        let back = read_transitions(buf.as_slice(), schema).unwrap();
        assert_eq!(back, d);
        let mut again = Vec::new();
        write_transitions(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn csv_errors() {
        let schema = CsvSchema { state_dim: 1, n_actions: 2 };
        let head = "task_id,traj_id,t,s_1,action,reward,sp_1\n";
        let empty = read_transitions(head.as_bytes(), schema).unwrap();
        assert!(empty.is_empty());

        let bad_action = format!("{head}0,0,0,0.1,0,1.0,0.2\n0,0,1,0.2,-1,1.0,0.3\n");
        match read_transitions(bad_action.as_bytes(), schema) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let gap = format!("{head}0,0,0,0.1,0,1.0,0.2\n0,0,2,0.2,1,1.0,0.3\n");
        assert!(matches!(read_transitions(gap.as_bytes(), schema), Err(Error::Validation(_))));
        let bad_float = format!("{head}0,0,0,abc,0,1.0,0.2\n");
        assert!(matches!(read_transitions(bad_float.as_bytes(), schema), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(
            read_transitions("a,b\n".as_bytes(), schema),
            Err(Error::Parse { line: 1, .. })
        ));
        let mixed = format!("{head}0,0,0,0.1,0,1.0,0.2\n1,1,0,0.2,1,1.0,0.3\n");
        assert!(matches!(read_transitions(mixed.as_bytes(), schema), Err(Error::Validation(_))));
        let ok = format!("{head}2,a,0,0.1,0,1.5,0.2\n2,a,1,0.2,1,-1.0,0.3\n2,b,0,0.0,1,0.0,0.0\n");
        let d = read_transitions(ok.as_bytes(), schema).unwrap();
        assert_eq!(d.task_id, 2);
        assert_eq!(d.n_trajectories(), 2);
        assert_abs_diff_eq!(d.trajectories[0].steps[1].reward, -1.0);
    }
}
