//! File formats: numeric CSV matrices (one sample per row) and the
//! plain-text model file written by `trex fit`.
//!
//! Model file layout, one item per line, tokens separated by whitespace:
//!
//! ```text
//! trex-model 1
//! kind factor            # or `scatter` for a dense n×n matrix
//! estimator trex
//! n 3
//! r 2                    # factor models only
//! iterations 12
//! termination tolerance-met
//! loadings               # n rows of r values (scatter: `scatter`, n rows of n)
//! ...
//! diag                   # factor models only, one line of n values
//! ...
//! objective 12           # count, then one value per line
//! ...
//! ```
//!
//! Floating-point values use 17 significant digits so they round-trip.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::Termination;
use crate::factor_model::{DataMatrix, FactorModel};

pub const MODEL_MAGIC: &str = "trex-model";
pub const MODEL_VERSION: u32 = 1;

/// Formats `value` with 17 significant digits.
pub fn fmt_f64(value: f64) -> String {
    format!("{value:.16e}")
}

/// Parses a CSV matrix with one sample per row into an `m × n` matrix.
///
/// A first line containing any non-numeric field is treated as a header.
/// All rows must have the same number of fields.
pub fn parse_matrix_csv<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (index, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(index + 1, |p| p.line() as usize),
            column: 1,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(index + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> =
            record.iter().map(str::parse::<f64>).collect();
        if index == 0 && parsed.iter().any(|p| p.is_err()) {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Parse {
                line,
                column: expected.min(record.len()) + 1,
                message: format!(
                    "row {line} has {} fields, expected {expected}",
                    record.len()
                ),
            });
        }
        for (col, value) in parsed.into_iter().enumerate() {
            let value = value.map_err(|_| Error::Parse {
                line,
                column: col + 1,
                message: format!("`{}` is not a number", &record[col]),
            })?;
            values.push(value);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Parse {
        line: 1,
        column: 1,
        message: "no numeric rows".into(),
    })?;
    Ok(DMatrix::from_row_slice(rows, width, &values))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads samples stored one per row.
pub fn read_samples(path: &Path) -> Result<DataMatrix> {
    let rows = parse_matrix_csv(open(path)?)?;
    DataMatrix::from_rows(rows)
}

/// Writes `matrix` row by row, optionally preceded by a header line.
pub fn write_matrix_csv<W: Write>(
    out: &mut W,
    matrix: &DMatrix<f64>,
    header: Option<&[String]>,
) -> std::io::Result<()> {
    if let Some(names) = header {
        writeln!(out, "{}", names.join(","))?;
    }
    for row in matrix.row_iter() {
        let fields: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Writes samples one per row with an `x1,…,xn` header.
pub fn write_samples(path: &Path, data: &DataMatrix) -> Result<()> {
    let header: Vec<String> = (1..=data.dim()).map(|j| format!("x{j}")).collect();
    let mut out = create(path)?;
    write_matrix_csv(&mut out, &data.samples().transpose(), Some(&header))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes an arbitrary matrix with a generated `{prefix}1,…` header.
pub fn write_matrix_file(path: &Path, matrix: &DMatrix<f64>, prefix: &str) -> Result<()> {
    let header: Vec<String> = (1..=matrix.ncols())
        .map(|j| format!("{prefix}{j}"))
        .collect();
    let mut out = create(path)?;
    write_matrix_csv(&mut out, matrix, Some(&header))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes one column per named series; all series must have equal length.
pub fn write_columns(path: &Path, names: &[String], columns: &[Vec<f64>]) -> Result<()> {
    let len = columns.first().map_or(0, Vec::len);
    if names.len() != columns.len() || columns.iter().any(|c| c.len() != len) {
        return Err(Error::InvalidInput("column table is ragged".into()));
    }
    let table = DMatrix::from_fn(len, columns.len(), |i, j| columns[j][i]);
    let mut out = create(path)?;
    write_matrix_csv(&mut out, &table, Some(names))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// One row of a benchmark result CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub estimator: String,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub mean_seconds: f64,
    pub failures: usize,
}

/// Reads a table written by [`crate::synthetic::write_bench_csv`].
pub fn parse_bench_csv<R: Read>(reader: R) -> Result<Vec<BenchRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            column: 1,
            message: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != crate::synthetic::BENCH_CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!("unexpected header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (index, record) in rdr.records().enumerate() {
        let line = index + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            column: 1,
            message: e.to_string(),
        })?;
        if record.len() != 6 {
            return Err(Error::Parse {
                line,
                column: record.len().min(6) + 1,
                message: format!("expected 6 fields, found {}", record.len()),
            });
        }
        let number = |col: usize| {
            record[col].parse::<f64>().map_err(|_| Error::Parse {
                line,
                column: col + 1,
                message: format!("`{}` is not a number", &record[col]),
            })
        };
        rows.push(BenchRow {
            scenario: record[0].to_string(),
            estimator: record[1].to_string(),
            mean_mse: number(2)?,
            std_mse: number(3)?,
            mean_seconds: number(4)?,
            failures: record[5].parse().map_err(|_| Error::Parse {
                line,
                column: 6,
                message: format!("`{}` is not a count", &record[5]),
            })?,
        });
    }
    Ok(rows)
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRow>> {
    parse_bench_csv(open(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fitted {
    Factor(FactorModel),
    /// Dense scatter from estimators without factor structure.
    Scatter(DMatrix<f64>),
}

impl Fitted {
    pub fn dim(&self) -> usize {
        match self {
            Fitted::Factor(m) => m.dim(),
            Fitted::Scatter(s) => s.nrows(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            Fitted::Factor(m) => m.covariance(),
            Fitted::Scatter(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub estimator: String,
    pub fitted: Fitted,
    pub iterations: usize,
    pub termination: Termination,
    pub objective_trace: Vec<f64>,
}

fn write_row<W: Write>(out: &mut W, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    let fields: Vec<String> = values.map(fmt_f64).collect();
    writeln!(out, "{}", fields.join(" "))
}

pub fn write_model<W: Write>(out: &mut W, record: &ModelRecord) -> std::io::Result<()> {
    writeln!(out, "{MODEL_MAGIC} {MODEL_VERSION}")?;
    match &record.fitted {
        Fitted::Factor(model) => {
            writeln!(out, "kind factor")?;
            writeln!(out, "estimator {}", record.estimator)?;
            writeln!(out, "n {}", model.dim())?;
            writeln!(out, "r {}", model.rank())?;
            writeln!(out, "iterations {}", record.iterations)?;
            writeln!(out, "termination {}", record.termination.as_str())?;
            writeln!(out, "loadings")?;
            for row in model.loadings().row_iter() {
                write_row(out, row.iter().copied())?;
            }
            writeln!(out, "diag")?;
            write_row(out, model.diag().iter().copied())?;
        }
        Fitted::Scatter(scatter) => {
            writeln!(out, "kind scatter")?;
            writeln!(out, "estimator {}", record.estimator)?;
            writeln!(out, "n {}", scatter.nrows())?;
            writeln!(out, "iterations {}", record.iterations)?;
            writeln!(out, "termination {}", record.termination.as_str())?;
            writeln!(out, "scatter")?;
            for row in scatter.row_iter() {
                write_row(out, row.iter().copied())?;
            }
        }
    }
    writeln!(out, "objective {}", record.objective_trace.len())?;
    for &v in &record.objective_trace {
        writeln!(out, "{}", fmt_f64(v))?;
    }
    Ok(())
}

pub fn save_model(path: &Path, record: &ModelRecord) -> Result<()> {
    let mut out = create(path)?;
    write_model(&mut out, record)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn err(&self, column: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<String> {
        loop {
            self.line += 1;
            let text = self
                .inner
                .next()
                .ok_or_else(|| self.err(1, "unexpected end of model file"))?
                .map_err(|e| self.err(1, e.to_string()))?;
            if !text.trim().is_empty() {
                return Ok(text);
            }
        }
    }

    /// Reads `key value` and returns `value`.
    fn field(&mut self, key: &str) -> Result<String> {
        let text = self.next_line()?;
        let mut parts = text.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(v), None) if k == key => Ok(v.to_string()),
            _ => Err(self.err(1, format!("expected `{key} <value>`, found `{text}`"))),
        }
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let value = self.field(key)?;
        value
            .parse()
            .map_err(|_| self.err(key.len() + 2, format!("`{value}` is not a count")))
    }

    fn marker(&mut self, key: &str) -> Result<()> {
        let text = self.next_line()?;
        if text.trim() == key {
            Ok(())
        } else {
            Err(self.err(1, format!("expected `{key}`, found `{text}`")))
        }
    }

    fn row(&mut self, width: usize) -> Result<Vec<f64>> {
        let text = self.next_line()?;
        let values: Vec<&str> = text.split_whitespace().collect();
        if values.len() != width {
            return Err(self.err(
                values.len().min(width) + 1,
                format!("expected {width} values, found {}", values.len()),
            ));
        }
        values
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.parse::<f64>()
                    .map_err(|_| self.err(j + 1, format!("`{v}` is not a number")))
            })
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            values.extend(self.row(cols)?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    }
}

pub fn read_model<R: BufRead>(reader: R) -> Result<ModelRecord> {
    let mut lines = Lines {
        inner: reader.lines(),
        line: 0,
    };
    let version = lines.field(MODEL_MAGIC)?;
    if version != MODEL_VERSION.to_string() {
        return Err(lines.err(
            MODEL_MAGIC.len() + 2,
            format!("unsupported version {version}"),
        ));
    }
    let kind = lines.field("kind")?;
    let estimator = lines.field("estimator")?;
    let n = lines.count("n")?;
    let fitted = match kind.as_str() {
        "factor" => {
            let r = lines.count("r")?;
            let iterations = lines.count("iterations")?;
            let termination = lines.field("termination")?;
            lines.marker("loadings")?;
            let loadings = lines.matrix(n, r)?;
            lines.marker("diag")?;
            let diag = DVector::from_vec(lines.row(n)?);
            let model = FactorModel::new(loadings, diag)?;
            (Fitted::Factor(model), iterations, termination)
        }
        "scatter" => {
            let iterations = lines.count("iterations")?;
            let termination = lines.field("termination")?;
            lines.marker("scatter")?;
            (
                Fitted::Scatter(lines.matrix(n, n)?),
                iterations,
                termination,
            )
        }
        other => return Err(lines.err(6, format!("unknown model kind `{other}`"))),
    };
    let (fitted, iterations, termination) = fitted;
    let termination = termination
        .parse::<Termination>()
        .map_err(|e| lines.err(13, e.to_string()))?;
    let len = lines.count("objective")?;
    let mut objective_trace = Vec::with_capacity(len);
    for _ in 0..len {
        objective_trace.push(lines.row(1)?[0]);
    }
    Ok(ModelRecord {
        estimator,
        fitted,
        iterations,
        termination,
        objective_trace,
    })
}

pub fn load_model(path: &Path) -> Result<ModelRecord> {
    read_model(BufReader::new(open(path)?))
}
