//! Versioned CSV output.
//!
//! Every file starts with a comment line
//! `# schema=v1 experiment=<name> config_sha256=<hex> seed=<seed>`
//! followed by a header row. Floats are written with 9 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Float(f64),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.8e}")
    }
}

#[derive(Clone, Debug)]
pub struct Table {
    experiment: String,
    config_hash: String,
    seed: u64,
    columns: Vec<&'static str>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(experiment: &str, config_hash: String, seed: u64, columns: &[&'static str]) -> Self {
        Table {
            experiment: experiment.to_string(),
            config_hash,
            seed,
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(
            row.len(),
            self.columns.len(),
            "row width must match the header"
        );
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn columns(&self) -> &[&'static str] {
        &self.columns
    }

    /// Float value of `column` in `row`, if that cell is numeric.
    pub fn float(&self, row: usize, column: &str) -> Option<f64> {
        let j = self.columns.iter().position(|c| *c == column)?;
        match &self.rows[row][j] {
            Cell::Float(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            Cell::Text(_) => None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# schema={SCHEMA_VERSION} experiment={} config_sha256={} seed={}",
            self.experiment, self.config_hash, self.seed
        );
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Text(s) => s.clone(),
                    Cell::Int(v) => v.to_string(),
                    Cell::Float(v) => format_float(*v),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_float(1.0), "1.00000000e0");
        assert_eq!(format_float(-0.000123456789123), "-1.23456789e-4");
        assert_eq!(format_float(f64::NAN), "nan");
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new("demo", "ab".into(), 7, &["name", "n", "value"]);
        t.push(vec!["x".into(), 3usize.into(), 0.5.into()]);
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "# schema=v1 experiment=demo config_sha256=ab seed=7"
        );
        assert_eq!(lines[1], "name,n,value");
        assert_eq!(lines[2], "x,3,5.00000000e-1");
        assert_eq!(t.float(0, "value"), Some(0.5));
    }

    proptest::proptest! {
        #[test]
        fn floats_keep_nine_significant_digits(v in -1e300f64..1e300) {
            let back: f64 = format_float(v).parse().unwrap();
            proptest::prop_assert!((back - v).abs() <= 5e-9 * v.abs());
        }
    }
}
