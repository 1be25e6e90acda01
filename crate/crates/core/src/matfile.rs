//! Line-oriented matrix files.
//!
//! One record per line: `sample_id T v_0 ... v_{T*d-1}`, space separated, with
//! every value written in scientific notation with 17 significant digits so
//! that parsing reproduces the original `f64` bit pattern. The column count
//! `d` is not stored per record; readers supply it from the manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Formats a value with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `(sample_id, T×d matrix)` records.
pub fn write_records<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (usize, &'a Array2<f64>)>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = String::new();
    for (id, m) in records {
        line.clear();
        write!(line, "{} {}", id, m.nrows()).unwrap();
        for v in m.iter() {
            line.push(' ');
            line.push_str(&fmt_f64(*v));
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads records whose rows have `dim` columns.
pub fn read_records(path: &Path, dim: usize) -> Result<Vec<(usize, Array2<f64>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), lineno + 1);
        let mut fields = line.split_ascii_whitespace();
        let id: usize = parse_field(fields.next(), "sample id", &at)?;
        let rows: usize = parse_field(fields.next(), "row count", &at)?;
        if rows == 0 {
            return Err(Error::Format(format!("{}: record with zero rows", at())));
        }
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("{}: bad number {f:?}", at())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != rows * dim {
            return Err(Error::DimensionMismatch(format!(
                "{}: expected {} values ({} rows x {} cols), found {}",
                at(),
                rows * dim,
                rows,
                dim,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{}: non-finite value {v}", at())));
        }
        let m = Array2::from_shape_vec((rows, dim), values).expect("shape checked above");
        records.push((id, m));
    }
    Ok(records)
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    what: &str,
    at: &dyn Fn() -> String,
) -> Result<T> {
    let field = field.ok_or_else(|| Error::Format(format!("{}: missing {what}", at())))?;
    field
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad {what} {field:?}", at())))
}

/// Writes a square matrix as one single-row record per matrix row.
pub fn write_square(path: &Path, m: &Array2<f64>) -> Result<()> {
    let rows: Vec<Array2<f64>> = m
        .rows()
        .into_iter()
        .map(|r| r.to_owned().insert_axis(ndarray::Axis(0)))
        .collect();
    write_records(path, rows.iter().enumerate())
}

/// Reads a matrix written by [`write_square`]; rows must be `0..n` in order.
pub fn read_square(path: &Path) -> Result<Array2<f64>> {
    let n = infer_square_size(path)?;
    let records = read_records(path, n)?;
    if records.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} rows for a {n}x{n} matrix",
            path.display(),
            records.len()
        )));
    }
    let mut out = Array2::zeros((n, n));
    for (row, (id, rec)) in records.iter().enumerate() {
        if *id != row || rec.nrows() != 1 {
            return Err(Error::Format(format!(
                "{}: row {row} has id {id} and {} sub-rows",
                path.display(),
                rec.nrows()
            )));
        }
        out.row_mut(row).assign(&rec.row(0));
    }
    Ok(out)
}

fn infer_square_size(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = text.lines().filter(|l| !l.trim().is_empty()).count();
    Ok(rows)
}
