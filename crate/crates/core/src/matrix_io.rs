//! Plain-text dense matrix files.
//!
//! Line 1 is `rows cols`; each following line holds one row of `cols`
//! space-separated decimals. Values are written with Rust's shortest
//! round-trip formatting, so reading a written file reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::Real;
use crate::error::{Result, TgmnError};

pub fn render_matrix<T: Real>(matrix: &Array2<T>) -> String {
    let mut out = String::with_capacity(matrix.len() * 12 + 16);
    writeln!(out, "{} {}", matrix.nrows(), matrix.ncols()).unwrap();
    for row in matrix.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix<T: Real>(matrix: &Array2<T>, path: &Path) -> Result<()> {
    fs::write(path, render_matrix(matrix)).map_err(|e| TgmnError::io(path, e))
}

pub fn read_matrix<T: Real>(path: &Path) -> Result<Array2<T>> {
    let text = fs::read_to_string(path).map_err(|e| TgmnError::io(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let matrix = parse_matrix(&mut lines, path)?;
    if let Some((line, rest)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(TgmnError::format(
            path,
            line,
            format!("trailing content after matrix body: `{}`", truncate(rest)),
        ));
    }
    Ok(matrix)
}

/// Parses one matrix from a stream of `(line_number, line)` pairs, consuming
/// exactly the header and `rows` body lines.
pub(crate) fn parse_matrix<'a, T: Real>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    source: &Path,
) -> Result<Array2<T>> {
    let (header_line, header) = lines
        .next()
        .ok_or_else(|| TgmnError::format(source, 0, "missing `rows cols` header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| TgmnError::format(source, header_line, format!("bad dimension `{s}`")))
    };
    if dims.len() != 2 {
        return Err(TgmnError::format(
            source,
            header_line,
            format!("header must be `rows cols`, got `{}`", truncate(header)),
        ));
    }
    let rows = parse_dim(dims[0])?;
    let cols = parse_dim(dims[1])?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (line_no, line) = lines.next().ok_or_else(|| {
            TgmnError::format(
                source,
                header_line + r + 1,
                format!("expected {rows} rows, file ends after {r}"),
            )
        })?;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v = tok
                .parse::<T>()
                .map_err(|_| TgmnError::format(source, line_no, format!("bad number `{tok}`")))?;
            data.push(v);
        }
        let found = data.len() - before;
        if found != cols {
            return Err(TgmnError::format(
                source,
                line_no,
                format!("expected {cols} values, found {found}"),
            ));
        }
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("row count checked"))
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(60) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bitwise(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() * 1e3 - 5e2 + rng.gen::<f64>() * 1e-9);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.txt");
            write_matrix(&m, &p).unwrap();
            let back: Array2<f64> = read_matrix(&p).unwrap();
            prop_assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn f32_round_trip_is_bitwise() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| (i as f32 + 0.1) / (j as f32 + 3.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        write_matrix(&m, &p).unwrap();
        let back: Array2<f32> = read_matrix(&p).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn inconsistent_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "2 3\n1 2 3\n4 5\n").unwrap();
        let err = read_matrix::<f64>(&p).unwrap_err();
        assert!(matches!(err, TgmnError::Format { line: 3, .. }), "{err}");
        fs::write(&p, "3 2\n1 2\n3 4\n").unwrap();
        assert!(matches!(read_matrix::<f64>(&p), Err(TgmnError::Format { .. })));
        fs::write(&p, "1 2\n1 2\n9 9\n").unwrap();
        assert!(matches!(read_matrix::<f64>(&p), Err(TgmnError::Format { line: 3, .. })));
    }
}
