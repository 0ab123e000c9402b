//! Experiment reports: per-check metrics with standard errors (or an
//! explicit deterministic flag), pass/fail verdicts, provenance, and the
//! text/CSV renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        }
    }
}

/// One reported number. `se = None` flags a deterministic quantity.
#[derive(Debug, Clone)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub se: Option<f64>,
}

impl Metric {
    pub fn stochastic(name: impl Into<String>, value: f64, se: f64) -> Self {
        Metric {
            name: name.into(),
            value,
            se: Some(se),
        }
    }

    pub fn deterministic(name: impl Into<String>, value: f64) -> Self {
        Metric {
            name: name.into(),
            value,
            se: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub verdict: Verdict,
    pub metrics: Vec<Metric>,
    pub notes: Vec<String>,
    /// Rendered CSV artifact for this check, if any.
    pub csv: Option<String>,
}

impl CheckReport {
    pub fn new(name: &'static str) -> Self {
        CheckReport {
            name,
            verdict: Verdict::Pass,
            metrics: Vec::new(),
            notes: Vec::new(),
            csv: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Whether any diffusion factor fell back to finite-difference Jacobians.
    pub fd_gradients: bool,
    pub expect_fail: bool,
    pub checks: Vec<CheckReport>,
    pub wall_ms: u128,
}

impl ExperimentReport {
    pub fn n_failed(&self) -> usize {
        self.checks.iter().filter(|c| c.verdict == Verdict::Fail).count()
    }

    /// Aggregate verdict of the run: with `expect_fail` the run succeeds
    /// exactly when at least one check failed.
    pub fn success(&self) -> bool {
        if self.expect_fail {
            self.n_failed() > 0
        } else {
            self.n_failed() == 0
        }
    }

    /// Deterministic rendering of everything except the wall clock; equal
    /// configs and seeds must produce byte-identical canonical text.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", self.name);
        let _ = writeln!(s, "config-hash: {}", self.config_hash);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "version: {}", self.version);
        let _ = writeln!(s, "fd-gradients: {}", self.fd_gradients);
        let _ = writeln!(s, "expect-fail: {}", self.expect_fail);
        for check in &self.checks {
            let _ = writeln!(s, "check {}: {}", check.name, check.verdict.as_str());
            for m in &check.metrics {
                match m.se {
                    Some(se) => {
                        let _ = writeln!(s, "  {} = {} se {}", m.name, m.value, se);
                    }
                    None => {
                        let _ = writeln!(s, "  {} = {} (deterministic)", m.name, m.value);
                    }
                }
            }
            for note in &check.notes {
                let _ = writeln!(s, "  note: {note}");
            }
        }
        let _ = writeln!(
            s,
            "verdict: {} ({}/{} checks passed{})",
            if self.success() { "PASS" } else { "FAIL" },
            self.checks.len() - self.n_failed(),
            self.checks.len(),
            if self.expect_fail { ", failure expected" } else { "" },
        );
        s
    }

    pub fn render_text(&self) -> String {
        format!("{}# wall-ms: {}\n", self.canonical_text(), self.wall_ms)
    }

    /// Writes `report.txt` plus one CSV per check into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.render_text())?;
        for check in &self.checks {
            if let Some(csv) = &check.csv {
                fs::write(dir.join(format!("{}.csv", check.name)), csv)?;
            }
        }
        Ok(())
    }
}

/// CSV assembly helper that stamps the provenance header.
pub struct CsvBuilder {
    buf: String,
}

impl CsvBuilder {
    pub fn new(config_hash: &str, header: &str) -> Self {
        CsvBuilder {
            buf: format!("# config_hash={config_hash}\n{header}\n"),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }
}
