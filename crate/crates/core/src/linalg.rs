//! Tiny dense routines for the oracle-scale matrices (single digits of
//! rows) that the posterior oracle and analytic scores need. Nothing here
//! is meant for large d.

use crate::error::{Error, Result};

/// Gauss-Jordan inverse with partial pivoting; O(d³).
pub fn invert(a: &[f64], d: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    let mut m = a.to_vec();
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        inv[i * d + i] = 1.0;
    }
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if m[r * d + col].abs() > m[piv * d + col].abs() {
                piv = r;
            }
        }
        if m[piv * d + col].abs() < 1e-12 {
            return Err(Error::Degenerate("singular matrix".into()));
        }
        if piv != col {
            for j in 0..d {
                m.swap(col * d + j, piv * d + j);
                inv.swap(col * d + j, piv * d + j);
            }
        }
        let p = m[col * d + col];
        for j in 0..d {
            m[col * d + j] /= p;
            inv[col * d + j] /= p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = m[r * d + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..d {
                m[r * d + j] -= f * m[col * d + j];
                inv[r * d + j] -= f * inv[col * d + j];
            }
        }
    }
    Ok(inv)
}

/// Lower-triangular Cholesky factor; errors unless symmetric positive
/// definite.
pub fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    for i in 0..d {
        for j in 0..i {
            if (a[i * d + j] - a[j * d + i]).abs() > 1e-9 {
                return Err(Error::Degenerate("matrix is not symmetric".into()));
            }
        }
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Degenerate("matrix is not positive definite".into()));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}
