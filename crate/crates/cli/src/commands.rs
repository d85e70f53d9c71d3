//! The four subcommands. Each returns the process exit code.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mmflow_core::diagnostics::{
    check_classical_estimates, check_entropy_steps, decay_fit, heat_flow_dissipation_check, interpolation_check,
    smooth_bump, weak_form_rate, weak_form_residual, EstimateReport,
};
use mmflow_core::jko::run_trajectory;
use mmflow_core::transport::{action_per_step, distance};
use mmflow_core::{CaseTag, Error, Grid1D, GridField, SolverOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ConfigError, Scenario, ScenarioConfig};
use crate::io::{self, Manifest, RunStatus};

pub const SUCCESS: i32 = 0;
pub const CONFIG_PARSE: i32 = 1;
pub const CONFIG_INVALID: i32 = 2;
pub const SOLVER_FAILURE: i32 = 3;
pub const MISSING_ARTIFACTS: i32 = 2;
pub const ARGUMENT_ERROR: i32 = 2;
pub const CHECK_FAILED: i32 = 4;
pub const MASS_MISMATCH: i32 = 5;

/// Names accepted by `verify --checks`.
pub const CHECKS: [&str; 10] = [
    "energy_monotonicity",
    "telescoping",
    "holder_chaining",
    "moment_envelope",
    "h1_sup_bound",
    "h2_budget",
    "entropy_step",
    "heat_flow",
    "decay_envelope",
    "weak_form_rate",
];

fn config_exit(e: &ConfigError) -> i32 {
    match e {
        ConfigError::Read { .. } | ConfigError::Parse(_) => CONFIG_PARSE,
        ConfigError::Invalid(_) => CONFIG_INVALID,
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load(config_path: &Path) -> Result<ScenarioConfig, i32> {
    ScenarioConfig::load(config_path).map(|(c, _)| c).map_err(|e| {
        eprintln!("error: {e}");
        config_exit(&e)
    })
}

fn weak_test_functions(config: &ScenarioConfig, grid: Grid1D, n: usize) -> (impl Fn(f64) -> f64, GridField) {
    let d = &config.diagnostics;
    let end = config.final_time();
    let (center, radius) = (d.psi_center.unwrap_or(0.5 * end), d.psi_radius.unwrap_or(0.4 * end));
    let rho_radius = d.rho_radius.unwrap_or(0.5 * grid.half_length());
    let rho = GridField::from_fn(grid, n, |_, x| smooth_bump(x, d.rho_center, rho_radius));
    (move |t| smooth_bump(t, center, radius), rho)
}

/// Runs the scenario and writes `records.csv`, the snapshots and `manifest.json`.
pub fn cmd_run(config_path: &Path, out_dir: &Path, tau_override: Option<f64>, quiet: bool) -> i32 {
    let mut config = match load(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(tau) = tau_override {
        if !(tau > 0.0) {
            eprintln!("error: --tau-override must be positive");
            return ARGUMENT_ERROR;
        }
        config.override_tau(tau);
    }
    let config_dir = parent_dir(config_path);
    let scenario = match config.build(&config_dir) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return config_exit(&e);
        }
    };
    if let Err(e) = std::fs::create_dir_all(out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return CONFIG_INVALID;
    }
    let Scenario {
        space,
        density,
        pairs,
        initial,
        jko,
        grid,
    } = scenario;
    let initial_masses = mmflow_core::grid::mass_vector(&initial, &space).expect("validated field");
    if !quiet {
        let masses: Vec<String> = initial_masses.iter().map(|m| format!("{m:.6e}")).collect();
        println!("initial masses: {}", masses.join(", "));
    }
    let start = Instant::now();
    let mut write_error: Option<io::IoError> = None;
    let result = run_trajectory(&initial, &density, &pairs, &jko, |k, u| {
        if write_error.is_none() {
            if let Err(e) = io::write_field(&out_dir.join(io::snapshot_name(k)), u) {
                write_error = Some(e);
            }
        }
    });
    let wall = start.elapsed().as_secs_f64();
    let n = space.components();
    let (trajectory, failure) = match result {
        Ok(t) => (t, None),
        Err(f) => {
            let f = *f;
            (f.partial, Some((f.step, f.error)))
        }
    };
    let weak_form_residual = if failure.is_none() {
        let (psi, rho) = weak_test_functions(&config, grid, n);
        weak_form_residual(&trajectory.states, jko.tau, &density, &pairs, psi, &rho).ok()
    } else {
        None
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        schema_version: config.schema_version,
        status: if failure.is_none() { RunStatus::Completed } else { RunStatus::Failed },
        steps_completed: trajectory.records.len().saturating_sub(1),
        tau: jko.tau,
        wall_time_seconds: wall,
        config_dir: config_dir.display().to_string(),
        config,
        initial_masses,
        snapshots: trajectory.snapshots.clone(),
        warnings: trajectory.warnings.clone(),
        weak_form_residual,
        error: failure.as_ref().map(|(k, e)| format!("step {k}: {e}")),
    };
    let written = io::write_records(&out_dir.join(io::RECORDS_FILE), &trajectory.records, n)
        .and_then(|_| io::write_manifest(&out_dir.join(io::MANIFEST_FILE), &manifest));
    if let Some(e) = write_error.or(written.err()) {
        eprintln!("error: {e}");
        return CONFIG_INVALID;
    }
    if !quiet {
        for w in &trajectory.warnings {
            println!("warning: {w}");
        }
    }
    match failure {
        Some((k, e)) => {
            eprintln!("error: step {k} failed: {e}");
            SOLVER_FAILURE
        }
        None => {
            if !quiet {
                let last = trajectory.records.last().expect("initial record");
                println!(
                    "{} steps to T = {:.6e} in {wall:.2} s, final energy {:.6e}",
                    manifest.steps_completed, last.time, last.energy
                );
            }
            SUCCESS
        }
    }
}

struct LoadedRun {
    manifest: Manifest,
    scenario: Scenario,
    records: Vec<mmflow_core::TrajectoryRecord>,
    snapshots: Vec<GridField>,
}

fn load_run(dir: &Path) -> Result<LoadedRun, String> {
    let manifest = io::read_manifest(&dir.join(io::MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let records = io::read_records(&dir.join(io::RECORDS_FILE)).map_err(|e| e.to_string())?;
    let scenario = manifest
        .config
        .build(Path::new(&manifest.config_dir))
        .map_err(|e| e.to_string())?;
    let n = scenario.space.components();
    let snapshots = manifest
        .snapshots
        .iter()
        .map(|&k| io::read_field(&dir.join(io::snapshot_name(k)), scenario.grid, n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    if records.len() < 2 {
        return Err(format!("{}: the run has no completed steps", dir.display()));
    }
    Ok(LoadedRun {
        manifest,
        scenario,
        records,
        snapshots,
    })
}

fn failed_report(name: &str, error: &dyn std::fmt::Display) -> EstimateReport {
    EstimateReport::new(name, f64::NAN, f64::NAN, 0.0).with_note(format!("check could not be evaluated: {error}"))
}

/// Worst-slack reports of the heat-flow checks over all snapshots.
fn heat_flow_reports(run: &LoadedRun) -> Vec<EstimateReport> {
    let s = &run.scenario;
    let d = &run.manifest.config.diagnostics;
    let results: Vec<_> = run
        .snapshots
        .par_iter()
        .filter(|u| u.is_interior(&s.space))
        .map(|u| heat_flow_dissipation_check(&s.density, &s.pairs, u, d.heat_duration, d.heat_substeps))
        .collect();
    let mut worst: [Option<EstimateReport>; 2] = [None, None];
    for r in results {
        match r {
            Ok((a, b)) => {
                for (slot, rep) in worst.iter_mut().zip([a, b]) {
                    if slot.as_ref().is_none_or(|w| rep.slack + rep.tolerance < w.slack + w.tolerance) {
                        *slot = Some(rep);
                    }
                }
            }
            Err(e) => return vec![failed_report("heat_flow_dissipation", &e)],
        }
    }
    let count = run.snapshots.len() as f64;
    worst
        .into_iter()
        .flatten()
        .map(|r| r.with_constant("snapshots", count))
        .collect()
}

/// Runs the selected diagnostics on a run directory and writes `reports.jsonl`.
pub fn cmd_verify(run_dir: &Path, checks: &[String], coarse: Option<&Path>, quiet: bool) -> i32 {
    if let Some(bad) = checks.iter().find(|c| !CHECKS.contains(&c.as_str())) {
        eprintln!("error: unknown check {bad:?}; known checks: {}", CHECKS.join(", "));
        return ARGUMENT_ERROR;
    }
    let run = match load_run(run_dir) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return MISSING_ARTIFACTS;
        }
    };
    let config = &run.manifest.config;
    let case = run.scenario.space.case();
    let end = run.records.last().expect("records checked").time;
    let explicit = !checks.is_empty() || !config.diagnostics.checks.is_empty();
    let selected: Vec<String> = if !checks.is_empty() {
        checks.to_vec()
    } else if !config.diagnostics.checks.is_empty() {
        config.diagnostics.checks.clone()
    } else {
        CHECKS
            .iter()
            .filter(|&&c| match c {
                "decay_envelope" => case == CaseTag::A && end >= 1.0,
                "weak_form_rate" => coarse.is_some(),
                _ => true,
            })
            .map(|c| c.to_string())
            .collect()
    };
    let want = |name: &str| selected.iter().any(|c| c == name);
    let mut reports = Vec::new();

    let s = &run.scenario;
    match check_classical_estimates(&run.records, &run.snapshots, &s.density, config.diagnostics.q) {
        Ok(all) => reports.extend(all.into_iter().filter(|r| want(&r.name))),
        Err(e) => reports.push(failed_report("classical_estimates", &e)),
    }
    if want("entropy_step") {
        reports.push(
            check_entropy_steps(&run.records, s.density.coercivity_lower(), s.grid.spacing())
                .unwrap_or_else(|e| failed_report("entropy_step", &e)),
        );
    }
    if want("heat_flow") {
        reports.extend(heat_flow_reports(&run));
    }
    if want("decay_envelope") {
        let window = config.diagnostics.decay_window.unwrap_or([1.0, end]);
        reports.push(decay_fit(&run.records, (window[0], window[1])).unwrap_or_else(|e| failed_report("decay_envelope", &e)));
    }
    if want("weak_form_rate") {
        let Some(coarse) = coarse else {
            eprintln!("error: weak_form_rate needs --coarse <run dir>");
            return ARGUMENT_ERROR;
        };
        let other = match io::read_manifest(&coarse.join(io::MANIFEST_FILE)) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("error: {e}");
                return MISSING_ARTIFACTS;
            }
        };
        match (other.weak_form_residual, run.manifest.weak_form_residual) {
            (Some(c), Some(f)) => reports.push(weak_form_rate(other.tau, c, run.manifest.tau, f)),
            _ => {
                eprintln!("error: a run lacks its weak-form residual");
                return MISSING_ARTIFACTS;
            }
        }
    }
    if explicit && reports.is_empty() {
        eprintln!("error: none of the selected checks produced a report");
        return ARGUMENT_ERROR;
    }
    if let Err(e) = io::write_reports(&run_dir.join(io::REPORTS_FILE), &reports) {
        eprintln!("error: {e}");
        return MISSING_ARTIFACTS;
    }
    if !quiet {
        for r in &reports {
            println!(
                "{:<28} {} lhs={:.6e} rhs={:.6e} slack={:.3e}",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.lhs,
                r.rhs,
                r.slack
            );
        }
    }
    if reports.iter().all(|r| r.passed) {
        SUCCESS
    } else {
        CHECK_FAILED
    }
}

/// Prints the distance between two snapshot files and writes `path.csv`.
pub fn cmd_distance(config_path: &Path, field_a: &Path, field_b: &Path, out_dir: &Path, quiet: bool) -> i32 {
    let config = match load(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let space = match config.value_space() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return config_exit(&e);
        }
    };
    let setup = (|| -> Result<_, String> {
        let grid = Grid1D::new(config.grid.half_length, config.grid.cells).map_err(|e| e.to_string())?;
        let pairs = config.pairs(&space).map_err(|e| e.to_string())?;
        let n = space.components();
        let a = io::read_field(field_a, grid, n).map_err(|e| e.to_string())?;
        let b = io::read_field(field_b, grid, n).map_err(|e| e.to_string())?;
        a.validate_in(&space).map_err(|e| format!("{}: {e}", field_a.display()))?;
        b.validate_in(&space).map_err(|e| format!("{}: {e}", field_b.display()))?;
        Ok((pairs, a, b))
    })();
    let (pairs, a, b) = match setup {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return CONFIG_INVALID;
        }
    };
    let opts = SolverOptions {
        tolerance: config.jko.tolerance,
        max_iterations: config.jko.max_iterations,
        method: config.jko.method,
    };
    let result = match distance(&a, &b, &pairs, config.jko.inner_steps, &opts) {
        Ok(r) => r,
        Err(e @ Error::MassMismatch { .. }) => {
            eprintln!("error: {e}");
            return MASS_MISMATCH;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return SOLVER_FAILURE;
        }
    };
    let actions = action_per_step(&result.path, &pairs).expect("pairs match the path");
    if let Err(e) = std::fs::create_dir_all(out_dir).map_err(|e| e.to_string()).and_then(|_| {
        io::write_path_summary(&out_dir.join(io::PATH_FILE), &actions).map_err(|e| e.to_string())
    }) {
        eprintln!("error: {e}");
        return CONFIG_INVALID;
    }
    println!("{}", io::float(result.value));
    if !quiet {
        eprintln!(
            "{:?}: {} iterations, residual {:.3e}",
            result.report.method, result.report.iterations, result.report.residual
        );
    }
    SUCCESS
}

/// Grid of the interpolation campaign.
pub const INEQUALITY_GRID: (f64, usize) = (8.0, 1024);

/// Sum of up to five positive Gaussians drawn from stream `index` of `seed`.
pub fn random_bump(seed: u64, index: u64, grid: Grid1D) -> GridField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let count = rng.gen_range(1..=5);
    let terms: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| (rng.gen_range(0.05..2.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.2..1.0)))
        .collect();
    GridField::from_fn(grid, 1, |_, x| {
        terms.iter().map(|(w, c, s)| w * (-((x - c) / s).powi(2)).exp()).sum()
    })
}

/// Interpolation inequalities on the Gaussian reference and `samples` random
/// bumps; writes `inequalities.csv`.
pub fn cmd_inequalities(samples: usize, seed: u64, out_dir: &Path, quiet: bool) -> i32 {
    if samples == 0 {
        eprintln!("error: --samples must be at least 1");
        return ARGUMENT_ERROR;
    }
    let grid = Grid1D::new(INEQUALITY_GRID.0, INEQUALITY_GRID.1).expect("fixed grid");
    let gaussian = GridField::from_fn(grid, 1, |_, x| (-x * x).exp());
    let mut rows: Vec<(String, Result<(EstimateReport, EstimateReport), Error>)> =
        vec![("gaussian".to_string(), interpolation_check(&gaussian))];
    let sampled: Vec<_> = (0..samples as u64)
        .into_par_iter()
        .map(|i| (i.to_string(), interpolation_check(&random_bump(seed, i, grid))))
        .collect();
    rows.extend(sampled);
    let path = out_dir.join("inequalities.csv");
    let written = std::fs::create_dir_all(out_dir).map_err(|e| e.to_string()).and_then(|_| {
        let mut w = csv::Writer::from_path(&path).map_err(|e| e.to_string())?;
        w.write_record(["sample", "l2_lhs", "l2_rhs", "l2_passed", "h1_lhs", "h1_rhs", "h1_passed"])
            .map_err(|e| e.to_string())?;
        for (name, r) in &rows {
            let row = match r {
                Ok((a, b)) => vec![
                    name.clone(),
                    io::float(a.lhs),
                    io::float(a.rhs),
                    a.passed.to_string(),
                    io::float(b.lhs),
                    io::float(b.rhs),
                    b.passed.to_string(),
                ],
                Err(e) => vec![name.clone(), e.to_string(), String::new(), "false".into(), String::new(), String::new(), "false".into()],
            };
            w.write_record(&row).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())
    });
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ARGUMENT_ERROR;
    }
    let failures = rows
        .iter()
        .filter(|(_, r)| !matches!(r, Ok((a, b)) if a.passed && b.passed))
        .count();
    if !quiet {
        if let Ok((a, b)) = &rows[0].1 {
            println!("gaussian: ‖f‖ = {:.4} ≤ {:.4}, ‖f′‖ = {:.4} ≤ {:.4}", a.lhs, a.rhs, b.lhs, b.rhs);
        }
        println!("{samples} random bumps, {failures} failures");
    }
    if failures == 0 {
        SUCCESS
    } else {
        CHECK_FAILED
    }
}
