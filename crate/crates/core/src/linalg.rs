//! Resolvent solves `(I - A / theta) h = b` on sparse sub-kernels.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Systems up to this size are solved by dense LU.
pub const DENSE_SOLVE_LIMIT: usize = 256;

const SERIES_TOL: f64 = 1e-14;
const SERIES_CAP: usize = 1_000_000;

type Rows = [Vec<(usize, f64)>];

/// Solves `h = b + A h / theta` (column orientation).
pub fn resolvent_right(rows: &Rows, theta: f64, b: &[f64]) -> Result<Vec<f64>> {
    solve(rows, theta, b, false)
}

/// Solves `t = b + t A / theta` (row orientation).
pub fn resolvent_left(rows: &Rows, theta: f64, b: &[f64]) -> Result<Vec<f64>> {
    solve(rows, theta, b, true)
}

fn solve(rows: &Rows, theta: f64, b: &[f64], left: bool) -> Result<Vec<f64>> {
    let n = rows.len();
    if b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.len() });
    }
    if !(theta > 0.0) {
        return Err(Error::NonFinite(format!("resolvent at theta={theta}")));
    }
    if n == 0 || b.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let nonneg = b.iter().all(|&v| v >= 0.0);
    if n <= DENSE_SOLVE_LIMIT {
        if let Some(x) = dense(rows, theta, b, left) {
            let scale = x.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            if !nonneg || x.iter().all(|&v| v >= -1e-12 * scale) {
                return Ok(if nonneg { x.into_iter().map(|v| v.max(0.0)).collect() } else { x });
            }
        }
    }
    series(rows, theta, b, left)
}

fn dense(rows: &Rows, theta: f64, b: &[f64], left: bool) -> Option<Vec<f64>> {
    let n = rows.len();
    let mut m = DMatrix::<f64>::identity(n, n);
    for (x, row) in rows.iter().enumerate() {
        for &(y, p) in row {
            if left {
                m[(y, x)] -= p / theta;
            } else {
                m[(x, y)] -= p / theta;
            }
        }
    }
    let sol = m.lu().solve(&DVector::from_column_slice(b))?;
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
}

/// Truncated Neumann series, stopped once a term is negligible against the sum.
fn series(rows: &Rows, theta: f64, b: &[f64], left: bool) -> Result<Vec<f64>> {
    let n = rows.len();
    let mut sum = b.to_vec();
    let mut term = b.to_vec();
    for k in 0..SERIES_CAP {
        let mut next = vec![0.0; n];
        if left {
            for (x, row) in rows.iter().enumerate() {
                if term[x] != 0.0 {
                    for &(y, p) in row {
                        next[y] += term[x] * p / theta;
                    }
                }
            }
        } else {
            for (x, row) in rows.iter().enumerate() {
                next[x] = row.iter().map(|&(y, p)| p * term[y]).sum::<f64>() / theta;
            }
        }
        sum.iter_mut().zip(&next).for_each(|(s, t)| *s += t);
        let size = next.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        let total = sum.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        if !total.is_finite() {
            return Err(Error::NoConvergence { iterations: k, residual: f64::INFINITY });
        }
        if size <= SERIES_TOL * total {
            return Ok(sum);
        }
        term = next;
    }
    Err(Error::NoConvergence { iterations: SERIES_CAP, residual: term.iter().fold(0.0, |m: f64, v| m.max(v.abs())) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_geometric_series() {
        // t = 0.4 + t * 0.2 / 0.5  =>  t = 0.4 / 0.6
        let rows = vec![vec![(0, 0.2)]];
        let t = resolvent_left(&rows, 0.5, &[0.4]).unwrap();
        assert!((t[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dense_and_series_agree() {
        let n = 40;
        let rows: Vec<Vec<(usize, f64)>> =
            (0..n).map(|x| vec![(x, 0.2), ((x + 1) % n, 0.1), ((x * 7 + 3) % n, 0.15)]).collect();
        let b: Vec<f64> = (0..n).map(|x| 1.0 + (x % 3) as f64).collect();
        for left in [false, true] {
            let d = dense(&rows, 0.9, &b, left).unwrap();
            let s = series(&rows, 0.9, &b, left).unwrap();
            for (a, c) in d.iter().zip(&s) {
                assert!((a - c).abs() < 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn large_system_uses_series() {
        let n = 600;
        let rows: Vec<Vec<(usize, f64)>> = (0..n).map(|x| if x > 0 { vec![(x - 1, 0.5)] } else { vec![] }).collect();
        let b = vec![1.0; n];
        let h = resolvent_right(&rows, 1.0, &b).unwrap();
        assert!((h[n - 1] - 2.0).abs() < 1e-12);
    }
}
