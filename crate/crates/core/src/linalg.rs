//! Small dense helpers plus the plain-text matrix format shared by result
//! files.
//!
//! [`jacobi_eigen`] is a deliberately separate eigensolver. Verification paths
//! use it so that they never share numerics with the projection loop, which
//! relies on nalgebra's `SymmetricEigen`.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::fmt::Write as _;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Largest eigenvalue of a symmetric matrix via [`jacobi_eigen`].
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    *jacobi_eigen(m).0.last().expect("non-empty matrix")
}

/// Smallest eigenvalue of a symmetric matrix via [`jacobi_eigen`].
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    jacobi_eigen(m).0[0]
}

/// Largest real part over the eigenvalues of a general square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn symmetry_residual(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Writes `name rows cols` followed by one row per line at 17 significant
/// digits.
pub fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{} {} {}", name, m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.16e}", m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

/// Reads a matrix written by [`write_matrix`] from a line iterator positioned
/// at its header.
pub fn read_matrix<'a, I>(lines: &mut I, expect: &str) -> Result<DMatrix<f64>>
where
    I: Iterator<Item = &'a str>,
{
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("missing matrix {expect}")))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != expect {
        return Err(Error::Parse(format!("expected header for {expect}, got '{header}'")));
    }
    let rows: usize = parts[1].parse().map_err(|_| Error::Parse(header.to_string()))?;
    let cols: usize = parts[2].parse().map_err(|_| Error::Parse(header.to_string()))?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{expect}: missing row {r}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Parse(format!("{expect}: bad number '{s}'"))))
            .collect::<Result<_>>()?;
        if vals.len() != cols {
            return Err(Error::Parse(format!("{expect}: row {r} has {} entries, expected {cols}", vals.len())));
        }
        data.extend(vals);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_reassembles_input() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, -2.0, 1.0, 3.0, 0.5, -2.0, 0.5, 1.0]);
        let (w, v) = jacobi_eigen(&m);
        let back = &v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(w.clone())) * v.transpose();
        assert!((back - &m).amax() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn spectral_abscissa_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-3.0, -0.5, -2.0]));
        assert!((spectral_abscissa(&m) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn matrix_text_roundtrip_is_exact() {
        let m = DMatrix::from_fn(3, 5, |r, c| (r as f64 + 1.0).sqrt() * (c as f64 - 2.3).exp());
        let mut s = String::new();
        write_matrix(&mut s, "M", &m);
        let back = read_matrix(&mut s.lines(), "M").unwrap();
        assert_eq!(back, m);
    }
}
