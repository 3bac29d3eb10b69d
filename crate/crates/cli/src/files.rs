//! On-disk formats: dataset JSONL, trajectory and cost-history CSVs, and the
//! identification report.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use metriplectic::dynamics::{Provenance, Sample, Trajectory, TrajectoryDataset};
use metriplectic::poly::PolyRecord;
use metriplectic::sos::CertificateReport;
use metriplectic::sysid::CostRecord;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub dim: usize,
    pub records: usize,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: DatasetHeader,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// First line is `{"header": ...}`, then one `{"x": [...], "xdot": [...]}` per
/// sample.
pub fn dataset_to_string(ds: &TrajectoryDataset) -> String {
    let header = HeaderLine {
        header: DatasetHeader {
            dim: ds.dim,
            records: ds.len(),
            provenance: ds.provenance.clone(),
        },
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in &ds.samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<(), CliError> {
    std::fs::write(path, dataset_to_string(ds)).map_err(|e| io_err(path, e))
}

pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset, CliError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, e: &dyn std::fmt::Display| {
        CliError::Validation(format!("{} line {line}: {e}", path.display()))
    };
    let first = lines
        .next()
        .ok_or_else(|| bad(1, &"empty dataset file"))?
        .map_err(|e| io_err(path, e))?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
    let header = header.header;
    let mut samples = Vec::with_capacity(header.records);
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| bad(k + 2, &e))?;
        if s.x.len() != header.dim || s.xdot.len() != header.dim {
            return Err(bad(k + 2, &format!("expected dimension {}", header.dim)));
        }
        samples.push(s);
    }
    if samples.len() != header.records {
        return Err(bad(
            1,
            &format!("header announces {} records, found {}", header.records, samples.len()),
        ));
    }
    let ds = TrajectoryDataset {
        dim: header.dim,
        samples,
        provenance: header.provenance,
    };
    ds.validate().map_err(|e| bad(1, &e))?;
    Ok(ds)
}

/// `t,x1..xn,H,S,E`, keeping every `stride`-th sample and the last one.
pub fn trajectory_csv(traj: &Trajectory, stride: usize) -> String {
    let n = traj.states.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",x{i}");
    }
    out.push_str(",H,S,E\n");
    let last = traj.len().saturating_sub(1);
    for k in (0..traj.len()).filter(|&k| k % stride.max(1) == 0 || k == last) {
        let _ = write!(out, "{}", traj.times[k]);
        for v in &traj.states[k] {
            let _ = write!(out, ",{v}");
        }
        let d = traj.diagnostics[k];
        let _ = writeln!(out, ",{},{},{}", d.h, d.s, d.e);
    }
    out
}

pub fn cost_history_csv(history: &[CostRecord]) -> String {
    let mut out = String::from("iter,phase,batch_cost,full_cost\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.iter, r.phase, r.batch_cost, r.full_cost);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    Stalled,
    MaxIterations,
    SolverFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentReport {
    pub config: RunConfig,
    pub algorithm: String,
    pub dataset: DatasetHeader,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub iterations: usize,
    pub initial_full_cost: f64,
    pub final_full_cost: f64,
    pub final_cost_per_sample: f64,
    pub worst_full_cost_increase: f64,
    pub monotone: bool,
    pub rejected_steps: usize,
    pub certificate_failures: Vec<usize>,
    pub cost_history: Vec<CostRecord>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    /// Upper triangle of the identified metric, row by row.
    pub metric: Vec<Vec<PolyRecord>>,
    pub entropy: Vec<PolyRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateReport>,
    /// RMS field error against the configured system on the data box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_rms: Option<f64>,
}

pub const REPORT_FILE: &str = "report.json";
pub const HISTORY_FILE: &str = "cost_history.csv";
pub const METADATA_FILE: &str = "metadata.json";

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_report(dir: &Path) -> Result<IdentReport, CliError> {
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Wall-clock facts kept apart from the deterministic outputs.
pub fn write_metadata(dir: &Path, command: &str, elapsed_s: f64) -> Result<(), CliError> {
    let unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "finished_unix_s": unix,
        "elapsed_s": elapsed_s,
    });
    write_json(&dir.join(METADATA_FILE), &meta)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}
