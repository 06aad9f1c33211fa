//! Tables and their CSV / JSON serialization with a manifest header.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::config::{write_canonical, Command, CONFIG_LINE};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::I(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::I(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::I(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            // shortest representation that round-trips
            Cell::F(v) => format!("{v:e}"),
            Cell::I(v) => v.to_string(),
            Cell::S(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::S(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::F(v) => serde_json::Number::from_f64(*v).map_or(Value::Null, Value::Number),
            Cell::I(v) => Value::from(*v),
            Cell::S(s) => Value::from(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width in table {}", self.name);
        self.rows.push(row);
    }

    /// Column header plus rows: the data section of a CSV file.
    pub fn csv_body(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::csv).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    fn json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Array(r.iter().map(Cell::json).collect()))
            .collect();
        serde_json::json!({ "columns": self.columns, "rows": rows })
    }

    /// Values of a numeric column.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(
            self.rows
                .iter()
                .map(|r| match &r[j] {
                    Cell::F(v) => *v,
                    Cell::I(v) => *v as f64,
                    Cell::S(_) => f64::NAN,
                })
                .collect(),
        )
    }
}

/// Everything a command produces besides the files' metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    /// The first table is the primary one.
    pub tables: Vec<Table>,
    pub results: Map<String, Value>,
    /// Per-point failures that did not abort the run.
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn result(&mut self, key: &str, value: impl Into<Value>) {
        self.results.insert(key.to_string(), value.into());
    }

    pub fn status(&self) -> String {
        if self.failures.is_empty() {
            "ok".into()
        } else {
            format!("partial: {} failed points", self.failures.len())
        }
    }
}

pub fn float_value(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// Run metadata written ahead of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: Command,
    /// Canonical JSON of the executed config.
    pub config: String,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_s: f64,
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

impl Manifest {
    fn header(&self, outcome: &Outcome, table: &Table) -> String {
        let mut h = format!("# optochaos {VERSION}\n# command: {}\n", self.command);
        h.push_str(CONFIG_LINE);
        h.push_str(&self.config);
        h.push('\n');
        let overrides = if self.overrides.is_empty() {
            "none".to_string()
        } else {
            self.overrides.join(" ")
        };
        h.push_str(&format!("# overrides: {overrides}\n"));
        h.push_str(&format!("# seed: {}\n", self.seed));
        h.push_str(&format!("# threads: {}\n", self.threads));
        h.push_str(&format!("# wall_time_s: {:.3}\n", self.wall_time_s));
        h.push_str(&format!("# status: {}\n", outcome.status()));
        for f in &outcome.failures {
            h.push_str(&format!("# failed: {f}\n"));
        }
        let mut results = String::new();
        write_canonical(&Value::Object(outcome.results.clone()), &mut results);
        h.push_str(&format!("# results: {results}\n"));
        h.push_str(&format!("# table: {}\n", table.name));
        h
    }

    fn json(&self, outcome: &Outcome) -> Value {
        let config: Value = serde_json::from_str(&self.config).expect("canonical config is JSON");
        serde_json::json!({
            "software": "optochaos",
            "version": VERSION,
            "command": self.command.name(),
            "config": config,
            "overrides": self.overrides,
            "seed": self.seed,
            "threads": self.threads,
            "wall_time_s": self.wall_time_s,
            "status": outcome.status(),
            "failures": outcome.failures,
        })
    }
}

/// Path of a table's CSV file: `<base>.csv` for the primary table and
/// `<base>.<name>.csv` for the others.
pub fn csv_path(base: &str, table: &Table, primary: bool) -> PathBuf {
    if primary {
        PathBuf::from(format!("{base}.csv"))
    } else {
        PathBuf::from(format!("{base}.{}.csv", table.name))
    }
}

pub fn json_path(base: &str) -> PathBuf {
    PathBuf::from(format!("{base}.json"))
}

fn ensure_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

pub fn write_csv(base: &str, manifest: &Manifest, outcome: &Outcome) -> io::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (k, table) in outcome.tables.iter().enumerate() {
        let path = csv_path(base, table, k == 0);
        ensure_parent(&path)?;
        fs::write(&path, manifest.header(outcome, table) + &table.csv_body())?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_json(base: &str, manifest: &Manifest, outcome: &Outcome) -> io::Result<PathBuf> {
    let tables: Map<String, Value> = outcome.tables.iter().map(|t| (t.name.clone(), t.json())).collect();
    let doc = serde_json::json!({
        "manifest": manifest.json(outcome),
        "results": Value::Object(outcome.results.clone()),
        "tables": tables,
    });
    let path = json_path(base);
    ensure_parent(&path)?;
    fs::write(&path, serde_json::to_string_pretty(&doc).expect("json serializes") + "\n")?;
    Ok(path)
}

/// Non-comment lines of a CSV output.
pub fn data_section(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .fold(String::new(), |mut s, l| {
            s.push_str(l);
            s.push('\n');
            s
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_quoting() {
        let mut t = Table::new("main", &["a", "msg"]);
        t.push(vec![Cell::F(0.5), Cell::S("x, \"y\"".into())]);
        assert_eq!(t.csv_body(), "a,msg\n5e-1,\"x, \"\"y\"\"\"\n");
    }

    proptest! {
        #[test]
        fn float_cells_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = Cell::F(v).csv();
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn data_section_drops_header() {
        assert_eq!(data_section("# a\n# b\nx,y\n1,2\n"), "x,y\n1,2\n");
    }
}
