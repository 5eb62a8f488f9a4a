//! Report emission: a JSON summary of pass/fail claims plus CSV scan files.
//! Output is a pure function of (config, seed, worker count) — no
//! timestamps, no machine identifiers — so reruns are byte-identical.

use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{GkinError, Result};

/// One checked numeric statement: an artifact-internal claim id, the
/// measured value, the tolerance it was held to, and the outcome.
#[derive(Clone, Debug, Serialize)]
pub struct Claim {
    pub id: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub name: String,
    pub subcommand: String,
    pub workers: usize,
    /// The fully-resolved configuration (defaults filled in).
    pub config: serde_json::Value,
    pub claims: Vec<Claim>,
    pub failures: Vec<String>,
    pub artifacts: Vec<String>,
}

impl Summary {
    pub fn new(name: &str, subcommand: &str, workers: usize, config: serde_json::Value) -> Self {
        Summary {
            name: name.to_string(),
            subcommand: subcommand.to_string(),
            workers,
            config,
            claims: Vec::new(),
            failures: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Record a claim checked as |measured - expected| <= tolerance.
    pub fn check_close(&mut self, id: &str, measured: f64, expected: f64, tolerance: f64) -> bool {
        let pass = (measured - expected).abs() <= tolerance && measured.is_finite();
        self.push(id, measured, tolerance, pass);
        pass
    }

    /// Record a claim that was decided elsewhere (verdict matches, bound
    /// holds within sigma, ...); `measured` and `tolerance` document it.
    pub fn check(&mut self, id: &str, pass: bool, measured: f64, tolerance: f64) -> bool {
        self.push(id, measured, tolerance, pass);
        pass
    }

    fn push(&mut self, id: &str, measured: f64, tolerance: f64, pass: bool) {
        if !pass {
            self.failures.push(id.to_string());
        }
        self.claims.push(Claim { id: id.to_string(), measured, tolerance, pass });
    }

    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_passed() {
            0
        } else {
            1
        }
    }

    /// Write `<name>.summary.json` under `dir`; returns the path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)
            .map_err(|e| GkinError::Config(format!("{}: {e}", dir.display())))?;
        let path = dir.join(format!("{}.summary.json", self.name));
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| GkinError::Config(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| GkinError::Config(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Format a numeric CSV cell: 17 significant digits, '.' decimal separator.
pub fn csv_cell(x: f64) -> String {
    format!("{x:.16e}")
}

/// A CSV scan table written as `<name>.<scan>.csv` with \n line endings.
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(columns: &[&str]) -> Self {
        CsvTable { header: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len(), "csv row width mismatch");
        self.rows.push(cells);
    }

    pub fn write(&self, dir: &Path, name: &str, scan: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)
            .map_err(|e| GkinError::Config(format!("{}: {e}", dir.display())))?;
        let path = dir.join(format!("{name}.{scan}.csv"));
        let file = std::fs::File::create(&path)
            .map_err(|e| GkinError::Config(format!("{}: {e}", path.display())))?;
        let mut out = std::io::BufWriter::new(file);
        let mut emit = |cells: &[String]| -> std::io::Result<()> {
            out.write_all(cells.join(",").as_bytes())?;
            out.write_all(b"\n")
        };
        emit(&self.header).and_then(|_| self.rows.iter().try_for_each(|r| emit(r)))
            .map_err(|e| GkinError::Config(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_cells_carry_seventeen_significant_digits() {
        let cell = csv_cell(std::f64::consts::PI);
        assert_eq!(cell, "3.1415926535897931e0");
        let back: f64 = cell.parse().unwrap();
        assert_eq!(back, std::f64::consts::PI);
        // 17 significant digits round-trip any double exactly, even ones
        // whose decimal literal is not representable (like 1.5e-7).
        let cell = csv_cell(-1.5e-7);
        assert_eq!(cell.parse::<f64>().unwrap(), -1.5e-7);
        assert!(cell.ends_with("e-7"), "exponent form: {cell}");
    }

    #[test]
    fn summary_tracks_failures_and_exit_code() {
        let mut s = Summary::new("t", "unit", 1, serde_json::json!({}));
        assert!(s.check_close("a.one", 1.0, 1.0 + 1e-12, 1e-9));
        assert!(!s.check_close("a.two", 1.0, 2.0, 1e-9));
        assert!(!s.check("a.three", false, 0.0, 0.0));
        assert_eq!(s.exit_code(), 1);
        assert_eq!(s.failures, vec!["a.two".to_string(), "a.three".to_string()]);
    }

    #[test]
    fn report_files_have_stable_bytes() {
        let dir = std::env::temp_dir().join("gkin-report-test");
        let mut s = Summary::new("stable", "unit", 2, serde_json::json!({"seed": 7}));
        s.check_close("b.pi", std::f64::consts::PI, std::f64::consts::PI, 1e-12);
        let p1 = s.write(&dir).unwrap();
        let first = std::fs::read(&p1).unwrap();
        let p2 = s.write(&dir).unwrap();
        assert_eq!(first, std::fs::read(&p2).unwrap());
        assert!(String::from_utf8(first).unwrap().ends_with("}\n"));

        let mut csv = CsvTable::new(&["epsilon", "value"]);
        csv.row(vec![csv_cell(0.5), csv_cell(1.0 / 3.0)]);
        let cp = csv.write(&dir, "stable", "scan").unwrap();
        let text = std::fs::read_to_string(&cp).unwrap();
        assert_eq!(text, "epsilon,value\n5.0000000000000000e-1,3.3333333333333331e-1\n");
    }
}
