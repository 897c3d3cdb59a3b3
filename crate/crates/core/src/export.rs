//! Image and matrix dumps: binary PGM (P5) and full-precision CSV.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Matrix;

/// 8-bit grayscale P5 bytes, min–max scaled. A constant matrix maps to all zeros.
pub fn pgm_bytes(matrix: &Matrix) -> Vec<u8> {
    let (lo, hi) = matrix
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", matrix.cols(), matrix.rows()).into_bytes();
    out.extend(matrix.as_slice().iter().map(|&v| {
        if range > 0.0 {
            (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, matrix: &Matrix) -> Result<()> {
    fs::write(path, pgm_bytes(matrix)).map_err(|e| Error::io(path, e))
}

/// Parses a P5 image written by [`pgm_bytes`] into (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt("incomplete PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(fmt("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| fmt("bad PGM header field"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes[pos + 1..].to_vec();
    if pixels.len() != w * h {
        return Err(fmt("pixel count does not match header"));
    }
    Ok((w, h, pixels))
}

/// Row-major CSV with 17 significant digits per value.
pub fn matrix_csv(matrix: &Matrix) -> String {
    let mut out = String::with_capacity(matrix.rows() * matrix.cols() * 24);
    for r in 0..matrix.rows() {
        let line: Vec<String> = matrix.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, matrix: &Matrix) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(matrix_csv(matrix).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = 0;
    let mut cols = None;
    let mut data = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: bad number {field:?}", line_no + 1),
            })?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {width} columns, expected {c}", line_no + 1),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}
