//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on invalid input or usage, 2 on solver
//! failure or a failed verification suite.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::error::{Error, Result};
use crate::simenv::write_transitions_csv;

use super::check::run_checks;
use super::config::ExperimentConfig;
use super::report::write_report;
use super::run::{
    build_references, read_results, run_experiment, source_data, source_spec, target_data, target_spec, write_results,
    ReferenceCache,
};

#[derive(Debug, Parser)]
#[command(name = "transfqi", version, about = "Transferred fitted Q-iteration experiments")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the simulated transition files of every grid cell.
    Simulate,
    /// Run the experiment grid and write results.csv.
    Run,
    /// Build and cache the reference values of every replication.
    Oracle,
    /// Summarize a results file into summary.csv and one SVG per sigma_c.
    Report {
        /// Results file (default: <out>/results.csv).
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Run the built-in verification suites.
    Check,
}

const CACHE_DIR: &str = "references";

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Validation("--config is required for this command".into()))?;
    if !path.exists() {
        return Err(Error::Validation(format!("config file not found: {}", path.display())));
    }
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn simulate_all(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    std::fs::create_dir_all(out)?;
    let mut written = 0;
    for rep in 0..cfg.replications {
        let target = target_spec(cfg, rep);
        write_transitions_csv(&target_data(cfg, &target, rep)?, &out.join(format!("target_rep{rep}.csv")))?;
        written += 1;
        for (si, sigma) in cfg.env.sigma_c.iter().enumerate() {
            for (ii, n) in cfg.env.i_source.iter().enumerate() {
                for k in 0..cfg.env.n_sources {
                    let spec = source_spec(cfg, &target, si, rep, k)?;
                    let data = source_data(cfg, &spec, si, ii, rep, k)?;
                    let name = format!("source_sigma{sigma}_i{n}_rep{rep}_k{k}.csv");
                    write_transitions_csv(&data, &out.join(name))?;
                    written += 1;
                }
            }
        }
    }
    Ok(written)
}

/// Returns `Ok(false)` when a verification suite fails.
fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(cli)?;
            let n = simulate_all(&cfg, &cli.out)?;
            println!("wrote {n} transition files to {}", cli.out.display());
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let cache = ReferenceCache::with_dir(cli.out.join(CACHE_DIR));
            let rows = run_experiment(&cfg, &cache)?;
            std::fs::create_dir_all(&cli.out)?;
            let path = cli.out.join("results.csv");
            write_results(&rows, std::fs::File::create(&path)?)?;
            let failed = rows.iter().filter(|r| r.mean_abs_error.is_none()).count();
            println!("wrote {} rows ({failed} failed) to {}", rows.len(), path.display());
        }
        Command::Oracle => {
            let cfg = load_config(cli)?;
            let cache = ReferenceCache::with_dir(cli.out.join(CACHE_DIR));
            let refs = build_references(&cfg, &cache)?;
            for r in &refs {
                if let Err(e) = r {
                    return Err(Error::Validation(format!("reference failed: {e}")));
                }
            }
            println!("cached {} references in {}", refs.len(), cli.out.join(CACHE_DIR).display());
        }
        Command::Report { results } => {
            let input = results.clone().unwrap_or_else(|| cli.out.join("results.csv"));
            if !input.exists() {
                return Err(Error::Validation(format!("results file not found: {}", input.display())));
            }
            let rows = read_results(&input)?;
            let panels = write_report(&rows, &cli.out)?;
            println!("wrote summary.csv and {} panels to {}", panels.len(), cli.out.display());
        }
        Command::Check => {
            let report = run_checks(cli.seed.unwrap_or(0))?;
            println!(
                "lemma1: {} pairs, {} violations, max ratio {:.6}",
                report.lemma1.pairs, report.lemma1.violations, report.lemma1.max_ratio
            );
            println!(
                "oracle equivalence: {} iterations, max deviation {:e} (tol {:e})",
                report.equivalence.iterations,
                report.equivalence.max_deviation(),
                report.equivalence_tol
            );
            let ok = report.passed();
            println!("{}", if ok { "check passed" } else { "check FAILED" });
            return Ok(ok);
        }
    }
    Ok(true)
}

pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 1;
        }
    };
    info!("running {:?}", cli.command);
    match pool.install(|| execute(&cli)) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_solver_failure() {
                2
            } else {
                1
            }
        }
    }
}
