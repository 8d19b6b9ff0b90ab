//! Versioned plain-text matrix container used for world files and model
//! checkpoints.
//!
//! ```text
//! cpr-matrix v1
//! meta kind bpr-mf
//! meta users 600
//! matrix user 600 16
//! 0.0123 -0.4411 ...
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so save/load is lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mathcore::Matrix;

pub const MAGIC: &str = "cpr-matrix";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatrixFile {
    meta: Vec<(String, String)>,
    matrices: Vec<(String, Matrix)>,
}

impl MatrixFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        assert!(
            !key.contains(char::is_whitespace) && !value.contains('\n'),
            "meta keys must be single tokens"
        );
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
        self
    }

    pub fn push_matrix(&mut self, name: &str, matrix: Matrix) -> &mut Self {
        self.matrices.push((name.to_string(), matrix));
        self
    }

    /// Stores a vector as a single-row matrix.
    pub fn push_vector(&mut self, name: &str, values: &[f64]) -> &mut Self {
        let m = Matrix::from_vec(1, values.len(), values.to_vec()).expect("row vector shape");
        self.push_matrix(name, m)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::parse(0, format!("matrix file lacks meta key `{key}`")))
    }

    pub fn require_meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require_meta(key)?;
        raw.parse()
            .map_err(|_| Error::parse(0, format!("meta `{key}` has unparsable value `{raw}`")))
    }

    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn require_matrix(&self, name: &str) -> Result<&Matrix> {
        self.matrix(name)
            .ok_or_else(|| Error::parse(0, format!("matrix file lacks matrix `{name}`")))
    }

    pub fn require_vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.require_matrix(name)?.as_slice().to_vec())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{MAGIC} v{VERSION}")?;
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}")?;
        }
        for (name, m) in &self.matrices {
            writeln!(out, "matrix {name} {} {}", m.rows(), m.cols())?;
            for r in 0..m.rows() {
                let mut first = true;
                for x in m.row(r) {
                    if !first {
                        out.write_all(b" ")?;
                    }
                    first = false;
                    write!(out, "{x}")?;
                }
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => return Err(Error::parse(1, "empty matrix file")),
        };
        let expected = format!("{MAGIC} v{VERSION}");
        if header.trim() != expected {
            return Err(Error::parse(
                1,
                format!("expected header `{expected}`, found `{header}`"),
            ));
        }
        let mut file = MatrixFile::new();
        while let Some((idx, line)) = lines.next() {
            let line = line?;
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| Error::parse(lineno, "meta line without key"))?;
                    let value = parts.next().unwrap_or("");
                    file.meta.push((key.to_string(), value.to_string()));
                }
                Some("matrix") => {
                    let fields: Vec<&str> = line.split_whitespace().collect();
                    if fields.len() != 4 {
                        return Err(Error::parse(
                            lineno,
                            "matrix line must read `matrix NAME ROWS COLS`",
                        ));
                    }
                    let rows: usize = fields[2]
                        .parse()
                        .map_err(|_| Error::parse(lineno, "bad row count"))?;
                    let cols: usize = fields[3]
                        .parse()
                        .map_err(|_| Error::parse(lineno, "bad column count"))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (ridx, row) = lines.next().ok_or_else(|| {
                            Error::parse(lineno, format!("matrix `{}` is truncated", fields[1]))
                        })?;
                        let row = row?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            let v: f64 = tok.parse().map_err(|_| {
                                Error::parse(ridx + 1, format!("bad number `{tok}`"))
                            })?;
                            data.push(v);
                        }
                        if data.len() - before != cols {
                            return Err(Error::parse(
                                ridx + 1,
                                format!("expected {cols} values, found {}", data.len() - before),
                            ));
                        }
                    }
                    file.matrices
                        .push((fields[1].to_string(), Matrix::from_vec(rows, cols, data)?));
                }
                _ => return Err(Error::parse(lineno, format!("unrecognized line `{line}`"))),
            }
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "matrix file not found".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_foreign_header() {
        let err = MatrixFile::read_from("not-a-matrix v9\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn reports_short_rows() {
        let text = "cpr-matrix v1\nmatrix w 2 2\n1 2\n3\n";
        let err = MatrixFile::read_from(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn lossless_round_trip(
            values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap();
            let mut f = MatrixFile::new();
            f.set_meta("kind", "test").set_meta("rows", rows);
            f.push_matrix("m", m.clone()).push_vector("v", &values);
            let mut buf = Vec::new();
            f.write_to(&mut buf).unwrap();
            let back = MatrixFile::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
