//! Plain-text matrix and vector files.
//!
//! Matrices are stored as triplets, one `i j value` per line with 0-based
//! indices, after a `# dims R C` header. Entries that are exactly `+0.0` are
//! omitted. Vectors hold one value per line after a `# dims K` header. Values
//! are written with 17 significant digits so that reading them back is
//! bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A dense row-major matrix as read from a triplet file.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_matrix<W: Write>(mut w: W, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            what: "matrix entries",
            expected: rows * cols,
            got: data.len(),
        });
    }
    writeln!(w, "# dims {rows} {cols}")?;
    for i in 0..rows {
        for j in 0..cols {
            let v = data[i * cols + j];
            if v.to_bits() != 0 {
                writeln!(w, "{i} {j} {}", fmt_value(v))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: BufRead>(r: R) -> Result<DenseMatrix> {
    let mut dims: Option<(usize, usize)> = None;
    let mut data = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            if parts.next() == Some("dims") {
                let rows = parse_usize(parts.next(), lineno)?;
                let cols = parse_usize(parts.next(), lineno)?;
                dims = Some((rows, cols));
                data = vec![0.0; rows * cols];
            }
            continue;
        }
        let (rows, cols) = dims.ok_or(Error::Parse {
            line: lineno,
            msg: "entry before '# dims' header".into(),
        })?;
        let mut parts = line.split_whitespace();
        let i = parse_usize(parts.next(), lineno)?;
        let j = parse_usize(parts.next(), lineno)?;
        let v = parse_f64(parts.next(), lineno)?;
        if i >= rows || j >= cols {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("index ({i}, {j}) outside {rows}x{cols}"),
            });
        }
        data[i * cols + j] = v;
    }
    let (rows, cols) = dims.ok_or(Error::Parse {
        line: 0,
        msg: "missing '# dims' header".into(),
    })?;
    Ok(DenseMatrix { rows, cols, data })
}

pub fn write_vector<W: Write>(mut w: W, values: &[f64]) -> Result<()> {
    writeln!(w, "# dims {}", values.len())?;
    for v in values {
        writeln!(w, "{}", fmt_value(*v))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vector<R: BufRead>(r: R) -> Result<Vec<f64>> {
    let mut expected = None;
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            if parts.next() == Some("dims") {
                expected = Some(parse_usize(parts.next(), n + 1)?);
            }
            continue;
        }
        out.push(parse_f64(Some(line), n + 1)?);
    }
    if let Some(k) = expected {
        if k != out.len() {
            return Err(Error::DimensionMismatch {
                what: "vector entries",
                expected: k,
                got: out.len(),
            });
        }
    }
    Ok(out)
}

pub fn save_matrix(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix(BufWriter::new(f), rows, cols, data)
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix(BufReader::new(f))
}

pub fn save_vector(path: &Path, values: &[f64]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_vector(BufWriter::new(f), values)
}

pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_vector(BufReader::new(f))
}

fn parse_usize(tok: Option<&str>, line: usize) -> Result<usize> {
    let tok = tok.ok_or(Error::Parse {
        line,
        msg: "missing integer field".into(),
    })?;
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad integer {tok:?}"),
    })
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64> {
    let tok = tok.ok_or(Error::Parse {
        line,
        msg: "missing value field".into(),
    })?;
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad number {tok:?}"),
    })
}
