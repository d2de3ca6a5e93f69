use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde_json::{json, Value};
use spinloc::scenario::ScenarioOutput;
use spinloc::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(v) if v.is_finite() => json!(v),
            Cell::Num(_) | Cell::Empty => Value::Null,
            Cell::Text(s) => json!(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_owned())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

/// Result of one subcommand: a table plus scalar summary values.
#[derive(Debug, Clone)]
pub struct Table {
    /// Default file stem when writing into the output directory.
    pub stem: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub summary: BTreeMap<String, f64>,
}

impl Table {
    pub fn new(stem: &str, columns: &[&str]) -> Self {
        Table {
            stem: stem.to_owned(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn set(&mut self, key: &str, value: f64) {
        self.summary.insert(key.to_owned(), value);
    }

    fn csv(&self) -> Result<String, Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Io(io::Error::other(e));
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn json(&self) -> String {
        let rows: Vec<Value> = self.rows.iter().map(|r| Value::Array(r.iter().map(Cell::json).collect())).collect();
        let mut s = serde_json::to_string_pretty(&json!({
            "columns": self.columns,
            "rows": rows,
            "summary": self.summary,
        }))
        .expect("table serializes");
        s.push('\n');
        s
    }

    fn summary_lines(&self) -> String {
        self.summary.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Where results go: an explicit file, a directory, or stdout.
#[derive(Debug, Clone)]
pub struct Sink {
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub format: Format,
}

impl Sink {
    fn target(&self, stem: &str) -> Option<PathBuf> {
        self.out
            .clone()
            .or_else(|| self.out_dir.as_ref().map(|d| d.join(format!("{stem}.{}", self.format.extension()))))
    }

    /// Writes a table; in CSV mode the summary goes to stderr.
    pub fn emit(&self, table: &Table) -> Result<(), Error> {
        let body = match self.format {
            Format::Csv => table.csv()?,
            Format::Json => table.json(),
        };
        match self.target(&table.stem) {
            Some(path) => write_file(&path, &body)?,
            None => io::stdout().write_all(body.as_bytes())?,
        }
        if self.format == Format::Csv && !table.summary.is_empty() {
            io::stderr().write_all(table.summary_lines().as_bytes())?;
        }
        Ok(())
    }

    /// Scenario results: CSV plus a sibling summary JSON, or one JSON document.
    pub fn emit_scenario(&self, output: &ScenarioOutput) -> Result<(), Error> {
        let target = self.target(&output.name);
        match (self.format, target) {
            (Format::Json, Some(path)) => write_file(&path, &output.to_json()),
            (Format::Json, None) => Ok(io::stdout().write_all(output.to_json().as_bytes())?),
            (Format::Csv, Some(path)) => {
                write_file(&path, &output.csv_string()?)?;
                write_file(&summary_path(&path), &output.summary_json())
            }
            (Format::Csv, None) => {
                io::stdout().write_all(output.csv_string()?.as_bytes())?;
                Ok(io::stderr().write_all(output.summary_json().as_bytes())?)
            }
        }
    }
}

/// `run.csv` -> `run.json`; a JSON output path gets `.summary.json`.
fn summary_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => path.with_extension("summary.json"),
        _ => path.with_extension("json"),
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_context(e, dir))?;
    }
    fs::write(path, body).map_err(|e| io_context(e, path))
}

pub fn io_context(e: io::Error, path: &Path) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_render_cells() {
        let mut t = Table::new("t", &["a", "b"]);
        t.push(vec![1.5.into(), "x".into()]);
        t.push(vec![Cell::Empty, Cell::Num(f64::NAN)]);
        t.set("k", 2.0);
        assert_eq!(t.csv().unwrap(), "a,b\n1.5,x\n,NaN\n");
        let v: Value = serde_json::from_str(&t.json()).unwrap();
        assert_eq!(v["rows"][0][1], "x");
        assert!(v["rows"][1][0].is_null());
        assert_eq!(v["summary"]["k"], 2.0);
    }

    #[test]
    fn summary_sits_next_to_the_table() {
        assert_eq!(summary_path(Path::new("d/run.csv")), PathBuf::from("d/run.json"));
        assert_eq!(summary_path(Path::new("run")), PathBuf::from("run.json"));
        assert_eq!(summary_path(Path::new("run.json")), PathBuf::from("run.summary.json"));
    }

    #[test]
    fn explicit_out_beats_directory() {
        let sink = Sink {
            out: Some("a.csv".into()),
            out_dir: Some("dir".into()),
            format: Format::Csv,
        };
        assert_eq!(sink.target("s"), Some(PathBuf::from("a.csv")));
        let sink = Sink { out: None, ..sink };
        assert_eq!(sink.target("s"), Some(PathBuf::from("dir/s.csv")));
    }
}
