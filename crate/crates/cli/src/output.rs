//! Result rows, run manifests and parameter dumps.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use intensity_rl::learn::CurvePoint;
use intensity_rl::policy::{write_params, ParamHeader};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RESULTS_FILE: &str = "manifest.csv";
pub const RUNS_FILE: &str = "runs.jsonl";

/// One line of the results manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub policy: String,
    pub instance: String,
    pub mean: f64,
    pub ci99: f64,
    pub paths: usize,
    pub seed: u64,
    pub wallclock: f64,
}

/// Provenance record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub instance: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub outputs: Vec<String>,
}

/// Output directory of a run, with the clock policy for wallclock columns.
pub struct OutDir {
    pub root: PathBuf,
    pub fixed_clock: bool,
}

impl OutDir {
    pub fn new(root: &Path, fixed_clock: bool) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            fixed_clock,
        })
    }

    pub fn clock(&self, seconds: f64) -> f64 {
        if self.fixed_clock {
            0.0
        } else {
            seconds
        }
    }

    /// Fresh subdirectory `run-NNN-<command>` numbered by the runs already recorded.
    pub fn run_dir(&self, command: &str) -> Result<PathBuf> {
        let runs = fs::read_to_string(self.root.join(RUNS_FILE)).unwrap_or_default();
        let index = runs.lines().filter(|l| !l.trim().is_empty()).count();
        let dir = self.root.join(format!("run-{index:03}-{command}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Path relative to the output root, as recorded in the run manifest.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }

    pub fn append_rows(&self, rows: &[ResultRow]) -> Result<()> {
        let path = self.root.join(RESULTS_FILE);
        let fresh = !path.exists() || fs::metadata(&path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(file);
        for row in rows {
            let mut row = row.clone();
            row.wallclock = self.clock(row.wallclock);
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn append_run(&self, run: &RunManifest) -> Result<()> {
        let path = self.root.join(RUNS_FILE);
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        serde_json::to_writer(&mut file, run)?;
        writeln!(file)?;
        Ok(())
    }

    pub fn write_curve(&self, path: &Path, curve: &[CurvePoint]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in curve {
            let mut p = *p;
            p.wallclock_s = self.clock(p.wallclock_s);
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_param_file(path: &Path, header: &ParamHeader, values: &[f64]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, header, values)?;
    w.flush()?;
    Ok(())
}

pub fn write_values(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        writeln!(w, "{v:e}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `git describe --always --dirty`, or `unknown` outside a work tree.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Formats rows with a ratio-to-reference column.
pub fn format_table(rows: &[ResultRow], reference: &ResultRow) -> String {
    let mut out = String::new();
    let width = rows
        .iter()
        .map(|r| r.policy.len())
        .max()
        .unwrap_or(6)
        .max(6);
    out.push_str(&format!(
        "{:<width$}  {:>14}  {:>10}  {:>9}  {:>10}\n",
        "policy", "mean", "ci99", "paths", "ratio (%)"
    ));
    for r in rows {
        let ratio = if reference.mean != 0.0 {
            format!("{:.2}", 100.0 * r.mean / reference.mean)
        } else {
            "-".into()
        };
        out.push_str(&format!(
            "{:<width$}  {:>14.3}  {:>10.3}  {:>9}  {:>10}\n",
            r.policy, r.mean, r.ci99, r.paths, ratio
        ));
    }
    out
}
