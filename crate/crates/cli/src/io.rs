//! Artifact files: CSV tables, snapshots, the run manifest and report lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mmflow_core::diagnostics::EstimateReport;
use mmflow_core::{Grid1D, GridField, SolveReport, SolverMethod, TrajectoryRecord};
use serde::{Deserialize, Serialize};

pub const RECORDS_FILE: &str = "records.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const PATH_FILE: &str = "path.csv";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// 17 significant digits, so that parsing returns the identical double.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<File>, IoError> {
    csv::Writer::from_path(path).map_err(csv_err(path))
}

fn reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    csv::Reader::from_path(path).map_err(csv_err(path))
}

fn parse(path: &Path, field: &str) -> Result<f64, IoError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| format_err(path, format!("not a number: {field:?}")))
}

pub fn records_header(n: usize) -> Vec<String> {
    let mut header = vec!["step".to_string(), "time".into(), "energy".into(), "heat_entropy".into()];
    header.extend((1..=n).map(|j| format!("mass_{j}")));
    header.extend((1..=n).map(|j| format!("moment_{j}")));
    header.extend(["step_distance", "h2_seminorm", "solver_iters", "solver_residual"].map(String::from));
    header
}

pub fn write_records(path: &Path, records: &[TrajectoryRecord], n: usize) -> Result<(), IoError> {
    let mut w = writer(path)?;
    w.write_record(records_header(n)).map_err(csv_err(path))?;
    for r in records {
        let mut row = vec![r.step.to_string(), float(r.time), float(r.energy), float(r.heat_entropy)];
        row.extend(r.masses.iter().map(|&v| float(v)));
        row.extend(r.second_moments.iter().map(|&v| float(v)));
        row.push(float(r.step_distance));
        row.push(float(r.h2_seminorm));
        let (iters, residual) = r.solver.as_ref().map_or((0, 0.0), |s| (s.iterations, s.residual));
        row.push(iters.to_string());
        row.push(float(residual));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    let mut r = reader(path)?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    let n = header.iter().filter(|h| h.starts_with("mass_")).count();
    if header.iter().collect::<Vec<_>>() != records_header(n) {
        return Err(format_err(path, "unexpected records header"));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err(path))?;
        let num = |i: usize| parse(path, &row[i]);
        let int = |i: usize| {
            row[i]
                .trim()
                .parse::<usize>()
                .map_err(|_| format_err(path, format!("not an integer: {:?}", &row[i])))
        };
        let step = int(0)?;
        let iters = int(6 + 2 * n)?;
        let residual = num(7 + 2 * n)?;
        out.push(TrajectoryRecord {
            step,
            time: num(1)?,
            energy: num(2)?,
            heat_entropy: num(3)?,
            masses: (0..n).map(|j| num(4 + j)).collect::<Result<_, _>>()?,
            second_moments: (0..n).map(|j| num(4 + n + j)).collect::<Result<_, _>>()?,
            step_distance: num(4 + 2 * n)?,
            h2_seminorm: num(5 + 2 * n)?,
            solver: (step > 0).then_some(SolveReport {
                method: SolverMethod::Newton,
                iterations: iters,
                residual,
                constraint_residual: 0.0,
                converged: true,
            }),
        });
    }
    Ok(out)
}

pub fn snapshot_name(step: usize) -> String {
    format!("snapshot_{step}.csv")
}

pub fn write_field(path: &Path, u: &GridField) -> Result<(), IoError> {
    let mut w = writer(path)?;
    let n = u.components();
    let mut header = vec!["x".to_string()];
    header.extend((1..=n).map(|j| format!("u_{j}")));
    w.write_record(&header).map_err(csv_err(path))?;
    let grid = u.grid();
    for i in 0..grid.cells() {
        let mut row = vec![float(grid.center(i))];
        row.extend((0..n).map(|j| float(u.get(j, i))));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a snapshot and checks it against the grid.
pub fn read_field(path: &Path, grid: Grid1D, n: usize) -> Result<GridField, IoError> {
    let mut r = reader(path)?;
    let width = r.headers().map_err(csv_err(path))?.len();
    if width != n + 1 {
        return Err(format_err(path, format!("expected {} columns, found {width}", n + 1)));
    }
    let mut values = vec![0.0; n * grid.cells()];
    let mut rows = 0;
    for row in r.records() {
        let row = row.map_err(csv_err(path))?;
        if rows >= grid.cells() {
            return Err(format_err(path, format!("more than {} rows", grid.cells())));
        }
        let x = parse(path, &row[0])?;
        if (x - grid.center(rows)).abs() > 1e-9 * grid.half_length() {
            return Err(format_err(path, format!("row {rows}: x = {x} is not the cell centre {}", grid.center(rows))));
        }
        for j in 0..n {
            values[j * grid.cells() + rows] = parse(path, &row[j + 1])?;
        }
        rows += 1;
    }
    if rows != grid.cells() {
        return Err(format_err(path, format!("{rows} rows for {} cells", grid.cells())));
    }
    GridField::new(grid, n, values).map_err(|e| format_err(path, e.to_string()))
}

/// Action of every inner step of an optimal path.
pub fn write_path_summary(path: &Path, actions: &[f64]) -> Result<(), IoError> {
    let mut w = writer(path)?;
    w.write_record(["inner_step", "s_start", "s_end", "action"]).map_err(csv_err(path))?;
    let k = actions.len() as f64;
    for (l, a) in actions.iter().enumerate() {
        w.write_record([l.to_string(), float(l as f64 / k), float((l + 1) as f64 / k), float(*a)])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_reports(path: &Path, reports: &[EstimateReport]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| format_err(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub schema_version: u32,
    pub status: RunStatus,
    pub steps_completed: usize,
    pub tau: f64,
    pub wall_time_seconds: f64,
    /// Directory of the config file, for resolving relative paths.
    pub config_dir: String,
    pub config: crate::config::ScenarioConfig,
    pub initial_masses: Vec<f64>,
    pub snapshots: Vec<usize>,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub weak_form_residual: Option<f64>,
    #[serde(default)]
    pub error: Option<String>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| format_err(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_text_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid1D::new(2.0, 16).unwrap();
        let u = GridField::from_fn(grid, 2, |j, x| 0.3 + 0.1 * (j as f64 + 1.0) * x.sin() / 3.0);
        let path = dir.path().join("u.csv");
        write_field(&path, &u).unwrap();
        let back = read_field(&path, grid, 2).unwrap();
        assert_eq!(back, u);
        assert!(read_field(&path, Grid1D::new(2.0, 32).unwrap(), 2).is_err());
        assert!(read_field(&path, grid, 1).is_err());
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            TrajectoryRecord {
                step: 0,
                time: 0.0,
                energy: 0.125,
                heat_entropy: 1.0 / 3.0,
                masses: vec![0.1, 0.2],
                second_moments: vec![0.3, 0.4],
                step_distance: 0.0,
                h2_seminorm: 2.0,
                solver: None,
            },
            TrajectoryRecord {
                step: 1,
                time: 0.1,
                energy: 0.1,
                heat_entropy: 0.2,
                masses: vec![0.1, 0.2],
                second_moments: vec![0.3, 0.4],
                step_distance: 1e-3,
                h2_seminorm: 1.5,
                solver: Some(SolveReport {
                    method: SolverMethod::Newton,
                    iterations: 3,
                    residual: 1e-11,
                    constraint_residual: 0.0,
                    converged: true,
                }),
            },
        ];
        let path = dir.path().join(RECORDS_FILE);
        write_records(&path, &records, 2).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
    }
}
