//! `metrics.jsonl` and `report_*.csv` writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::train::MetricsRecord;
use crate::error::{Error, Result};

/// Float with 6 significant digits, `%g` style.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp).max(0) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// Streams one JSON object per line.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    lines: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            lines: 0,
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::contract(format!("metrics encoding: {e}")))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.lines)
    }
}

pub fn save_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish().map(|_| ())
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::contract(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// One CSV cell.
pub enum Cell {
    Float(f64),
    Int(usize),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl<C: Into<Cell>> From<Option<C>> for Cell {
    fn from(x: Option<C>) -> Self {
        x.map_or(Cell::Empty, Into::into)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(x) => sig6(*x),
            Cell::Int(x) => x.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

/// Write `report_<name>.csv` under `dir` and return its path.
pub fn write_csv(dir: &Path, name: &str, header: &[&str], rows: Vec<Vec<Cell>>) -> Result<PathBuf> {
    let path = dir.join(format!("report_{name}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::contract(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::contract(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::contract(format!("CSV row has {} cells, header {}", row.len(), header.len())));
        }
        w.write_record(row.iter().map(Cell::render)).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
