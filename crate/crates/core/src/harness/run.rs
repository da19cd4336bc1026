//! Replicated grid execution.
//!
//! Seeds are derived from the master seed and grid indices only:
//!
//! * target spec, target data and the reference from `(master, replication)`,
//! * source specs from `(master, σ index, replication, source)`,
//! * source data from `(master, σ index, I1 index, replication, source)`,
//! * engine randomness (splits, CV folds) from `(master, replication)`.
//!
//! The target task and its reference are therefore shared by every cell of a
//! replication, and the single-task baseline is fitted once per replication.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TaskDataset;
use crate::diagnostics::estimate_discrepancies;
use crate::error::{Error, Result};
use crate::fqi::{run_onestep, run_single_fqi, run_transfqi, Backup, EngineConfig};
use crate::oracle::{build_reference, eval_error, QStarReference, ReferenceConfig};
use crate::rng::{mix_seed, stream};
use crate::sieve::{BSplineBasis, BasisConfig, FeatureMap};
use crate::simenv::{make_source_spec, make_target_spec, simulate_task, QuadEnvSpec, SourcePerturbation, STATE_DIM};

use super::config::{ExperimentConfig, Method};

/// One output line. Failed fits leave `mean_abs_error` empty and set `note`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sigma_c: f64,
    pub i_source: usize,
    pub method: Method,
    pub replication: usize,
    pub mean_abs_error: Option<f64>,
    pub h_r_hat: Option<f64>,
    pub c_sigma_hat: Option<f64>,
    pub runtime_ms: u64,
    pub note: String,
}

pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let row: ResultRow = rec.map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn feature_map(basis: BasisConfig) -> Result<FeatureMap> {
    FeatureMap::new(BSplineBasis::new(STATE_DIM, basis)?, 2)
}

pub fn target_spec(cfg: &ExperimentConfig, rep: usize) -> QuadEnvSpec {
    match cfg.env.c_target {
        Some(c) => QuadEnvSpec::new(c, cfg.gamma),
        None => make_target_spec(mix_seed(cfg.master_seed, &[stream::TARGET_SPEC, rep as u64]), cfg.gamma),
    }
}

pub fn source_spec(cfg: &ExperimentConfig, target: &QuadEnvSpec, sigma_idx: usize, rep: usize, k: usize) -> Result<QuadEnvSpec> {
    if let Some(c) = cfg.env.c_source {
        return Ok(QuadEnvSpec::new(c, cfg.gamma));
    }
    make_source_spec(
        target,
        SourcePerturbation {
            sigma_c: cfg.env.sigma_c[sigma_idx],
            seed: mix_seed(cfg.master_seed, &[stream::SOURCE_SPEC, sigma_idx as u64, rep as u64, k as u64]),
        },
    )
}

pub fn target_data(cfg: &ExperimentConfig, spec: &QuadEnvSpec, rep: usize) -> Result<TaskDataset> {
    simulate_task(
        spec,
        0,
        cfg.env.i_target,
        cfg.env.horizon,
        mix_seed(cfg.master_seed, &[stream::TARGET_DATA, rep as u64]),
    )
}

pub fn source_data(
    cfg: &ExperimentConfig,
    spec: &QuadEnvSpec,
    sigma_idx: usize,
    i_idx: usize,
    rep: usize,
    k: usize,
) -> Result<TaskDataset> {
    let seed = mix_seed(
        cfg.master_seed,
        &[stream::SOURCE_DATA, sigma_idx as u64, i_idx as u64, rep as u64, k as u64],
    );
    simulate_task(spec, k + 1, cfg.env.i_source[i_idx], cfg.env.horizon, seed)
}

pub fn engine_config(cfg: &ExperimentConfig, rep: usize) -> EngineConfig {
    EngineConfig {
        gamma: cfg.gamma,
        seed: mix_seed(cfg.master_seed, &[stream::ENGINE, rep as u64]),
        ..cfg.engine.clone()
    }
}

pub fn reference_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    mix_seed(cfg.master_seed, &[stream::REFERENCE, rep as u64])
}

#[derive(Serialize)]
struct ReferenceKey<'a> {
    spec: &'a QuadEnvSpec,
    basis: &'a BasisConfig,
    reference: &'a ReferenceConfig,
    seed: u64,
}

/// Memoizes references by everything they depend on, optionally persisting
/// them as JSON files in a directory.
#[derive(Debug, Default)]
pub struct ReferenceCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Arc<QStarReference>>>,
}

impl ReferenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: PathBuf) -> Self {
        ReferenceCache {
            dir: Some(dir),
            memory: Mutex::default(),
        }
    }

    fn file_name(key: &str) -> String {
        let mut h = 0u64;
        for chunk in key.as_bytes().chunks(8) {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            h = mix_seed(h, &[u64::from_le_bytes(b)]);
        }
        format!("reference_{h:016x}.json")
    }

    pub fn get_or_build(
        &self,
        spec: &QuadEnvSpec,
        map: &FeatureMap,
        basis: &BasisConfig,
        config: &ReferenceConfig,
        seed: u64,
    ) -> Result<Arc<QStarReference>> {
        let key = serde_json::to_string(&ReferenceKey {
            spec,
            basis,
            reference: config,
            seed,
        })?;
        if let Some(r) = self.memory.lock().expect("reference cache poisoned").get(&key) {
            return Ok(Arc::clone(r));
        }
        let path = self.dir.as_ref().map(|d| d.join(Self::file_name(&key)));
        let reference = match &path {
            Some(p) if p.exists() => QStarReference::load(p)?,
            _ => {
                let r = build_reference(spec, map, config, seed)?;
                if let Some(p) = &path {
                    std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
                    r.save(p)?;
                }
                r
            }
        };
        let reference = Arc::new(reference);
        self.memory
            .lock()
            .expect("reference cache poisoned")
            .insert(key, Arc::clone(&reference));
        Ok(reference)
    }
}

/// Builds (or loads) the reference of every replication's target.
pub fn build_references(cfg: &ExperimentConfig, cache: &ReferenceCache) -> Result<Vec<Result<Arc<QStarReference>>>> {
    cfg.validate()?;
    let map = feature_map(cfg.basis)?;
    Ok((0..cfg.replications)
        .map(|rep| {
            let spec = target_spec(cfg, rep);
            spec.validate()?;
            cache.get_or_build(&spec, &map, &cfg.basis, &cfg.reference, reference_seed(cfg, rep))
        })
        .collect())
}

struct Fit {
    error: Result<f64>,
    runtime_ms: u64,
}

fn fit_method(
    method: Method,
    datasets: &[TaskDataset],
    map: &FeatureMap,
    engine: &EngineConfig,
    reference: &QStarReference,
    record_runtime: bool,
) -> Fit {
    let start = Instant::now();
    let out = match method {
        Method::NoTransfer => run_single_fqi(&datasets[0], map, engine, Backup::Sampled),
        Method::OneStep => run_onestep(datasets, map, engine, Backup::Sampled),
        Method::TwoStep => run_transfqi(datasets, map, engine, Backup::Sampled),
    };
    let runtime_ms = if record_runtime { start.elapsed().as_millis() as u64 } else { 0 };
    Fit {
        error: out.and_then(|o| eval_error(o.target(), reference, map)),
        runtime_ms,
    }
}

#[derive(Clone, Copy)]
struct Cell {
    sigma_idx: usize,
    i_idx: usize,
    rep: usize,
}

fn failed_rows(cfg: &ExperimentConfig, cell: Cell, note: &str) -> Vec<ResultRow> {
    cfg.methods
        .iter()
        .map(|&method| ResultRow {
            sigma_c: cfg.env.sigma_c[cell.sigma_idx],
            i_source: cfg.env.i_source[cell.i_idx],
            method,
            replication: cell.rep,
            mean_abs_error: None,
            h_r_hat: None,
            c_sigma_hat: None,
            runtime_ms: 0,
            note: note.to_string(),
        })
        .collect()
}

fn run_cell(
    cfg: &ExperimentConfig,
    map: &FeatureMap,
    cell: Cell,
    target: &(QuadEnvSpec, TaskDataset),
    reference: &QStarReference,
    baseline: Option<&Fit>,
) -> Result<Vec<ResultRow>> {
    let mut datasets = vec![target.1.clone()];
    for k in 0..cfg.env.n_sources {
        let spec = source_spec(cfg, &target.0, cell.sigma_idx, cell.rep, k)?;
        datasets.push(source_data(cfg, &spec, cell.sigma_idx, cell.i_idx, cell.rep, k)?);
    }
    let (h_r_hat, c_sigma_hat, diag_note) = if cfg.diagnostics {
        match estimate_discrepancies(&datasets, map) {
            Ok(d) => (Some(d.h_r_hat), Some(d.c_sigma_hat), String::new()),
            Err(e) => (None, None, format!("diagnostics: {e}")),
        }
    } else {
        (None, None, String::new())
    };
    let engine = engine_config(cfg, cell.rep);
    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let own;
        let fit = match (method, baseline) {
            (Method::NoTransfer, Some(b)) => b,
            _ => {
                own = fit_method(method, &datasets, map, &engine, reference, cfg.record_runtime);
                &own
            }
        };
        let (mean_abs_error, mut note) = match &fit.error {
            Ok(v) => (Some(*v), String::new()),
            Err(e) => (None, e.to_string()),
        };
        if !diag_note.is_empty() {
            if !note.is_empty() {
                note.push_str("; ");
            }
            note.push_str(&diag_note);
        }
        rows.push(ResultRow {
            sigma_c: cfg.env.sigma_c[cell.sigma_idx],
            i_source: cfg.env.i_source[cell.i_idx],
            method,
            replication: cell.rep,
            mean_abs_error,
            h_r_hat,
            c_sigma_hat,
            runtime_ms: fit.runtime_ms,
            note,
        });
    }
    Ok(rows)
}

/// Runs the full grid. Rows are ordered by σ, then `I1`, then replication,
/// then method in configuration order. Failures inside a cell become rows
/// with a note; only an invalid configuration aborts the run.
pub fn run_experiment(cfg: &ExperimentConfig, cache: &ReferenceCache) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let map = feature_map(cfg.basis)?;
    info!("building {} references", cfg.replications);
    let references = build_references(cfg, cache)?;
    let targets: Vec<Result<(QuadEnvSpec, TaskDataset)>> = (0..cfg.replications)
        .map(|rep| {
            let spec = target_spec(cfg, rep);
            let data = target_data(cfg, &spec, rep)?;
            Ok((spec, data))
        })
        .collect();
    let baselines: Vec<Option<Fit>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| match (&targets[rep], &references[rep]) {
            (Ok(t), Ok(r)) if cfg.methods.contains(&Method::NoTransfer) => Some(fit_method(
                Method::NoTransfer,
                std::slice::from_ref(&t.1),
                &map,
                &engine_config(cfg, rep),
                r,
                cfg.record_runtime,
            )),
            _ => None,
        })
        .collect();
    let mut cells = Vec::new();
    for sigma_idx in 0..cfg.env.sigma_c.len() {
        for i_idx in 0..cfg.env.i_source.len() {
            for rep in 0..cfg.replications {
                cells.push(Cell { sigma_idx, i_idx, rep });
            }
        }
    }
    info!("running {} cells", cells.len());
    let rows: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&cell| {
            let outcome = match (&targets[cell.rep], &references[cell.rep]) {
                (Ok(t), Ok(r)) => run_cell(cfg, &map, cell, t, r, baselines[cell.rep].as_ref()),
                (Err(e), _) => Err(Error::Validation(format!("target task: {e}"))),
                (_, Err(e)) => Err(Error::Validation(format!("reference: {e}"))),
            };
            outcome.unwrap_or_else(|e| {
                warn!("cell failed: {e}");
                failed_rows(cfg, cell, &e.to_string())
            })
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fqi::LambdaRule;
    use crate::harness::config::EnvConfig;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            gamma: 0.5,
            env: EnvConfig {
                i_target: 10,
                i_source: vec![10],
                sigma_c: vec![0.5],
                ..Default::default()
            },
            engine: EngineConfig {
                upsilon: 2,
                lambda: LambdaRule::Fixed { value: 0.05 },
                ..Default::default()
            },
            reference: ReferenceConfig {
                n_traj: 100,
                n_eval_points: 10,
                n_rollouts: 20,
                ..Default::default()
            },
            replications: 1,
            methods: vec![Method::TwoStep],
            ..Default::default()
        }
    }

    #[test]
    fn one_cell_one_method_gives_one_row() {
        let cfg = tiny_config();
        let rows = run_experiment(&cfg, &ReferenceCache::new()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].mean_abs_error.unwrap() >= 0.0, "{:?}", rows[0]);
        assert_eq!(rows[0].runtime_ms, 0);
    }

    #[test]
    fn targets_are_shared_across_cells() {
        let mut cfg = tiny_config();
        cfg.env.sigma_c = vec![0.0, 1.0];
        let s0 = target_spec(&cfg, 3);
        assert_eq!(s0, target_spec(&cfg, 3));
        assert_ne!(s0, target_spec(&cfg, 4));
        let same = source_spec(&cfg, &s0, 0, 3, 0).unwrap();
        assert_eq!(same.c_matrix, s0.c_matrix);
        assert_ne!(source_spec(&cfg, &s0, 1, 3, 0).unwrap().c_matrix, s0.c_matrix);
    }

    #[test]
    fn failures_become_rows() {
        let mut cfg = tiny_config();
        // more iterations than target trajectories
        cfg.engine.upsilon = 50;
        cfg.methods = vec![Method::NoTransfer, Method::TwoStep];
        let rows = run_experiment(&cfg, &ReferenceCache::new()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_abs_error.is_none() && !r.note.is_empty()));
    }

    #[test]
    fn csv_round_trip() {
        let rows = run_experiment(&tiny_config(), &ReferenceCache::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results(&rows, std::fs::File::create(&path).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "sigma_c,i_source,method,replication,mean_abs_error,h_r_hat,c_sigma_hat,runtime_ms,note\n"
        ));
        assert_eq!(read_results(&path).unwrap(), rows);
    }
}
