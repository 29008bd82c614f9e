//! Small dense linear solves for the flow estimators.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Solve `A x = b` for a small dense system, Gaussian elimination with
/// partial pivoting. `a` is row-major `dim * dim`.
pub fn solve_dense(a: &[f64], b: &[f64], dim: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), dim * dim);
    debug_assert_eq!(b.len(), dim);
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..dim {
        let mut pivot = col;
        let mut best = math::abs(m[col * dim + col]);
        for row in col + 1..dim {
            let mag = math::abs(m[row * dim + col]);
            if mag > best {
                best = mag;
                pivot = row;
            }
        }
        if best < 1e-300 {
            return Err(Error::Domain("singular linear system".into()));
        }
        if pivot != col {
            for k in 0..dim {
                m.swap(col * dim + k, pivot * dim + k);
            }
            rhs.swap(col, pivot);
        }
        let diag = m[col * dim + col];
        for row in col + 1..dim {
            let factor = m[row * dim + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..dim {
                m[row * dim + k] -= factor * m[col * dim + k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; dim];
    for col in (0..dim).rev() {
        let mut acc = rhs[col];
        for k in col + 1..dim {
            acc -= m[col * dim + k] * x[k];
        }
        x[col] = acc / m[col * dim + col];
    }
    Ok(x)
}

/// Symmetric 2x2 system `[[a, b], [b, c]] d = rhs`. Returns `None` when the
/// (regularized) system is ill-conditioned beyond `cond_limit`.
pub fn solve_sym2(a: f64, b: f64, c: f64, rhs: (f64, f64), cond_limit: f64) -> Option<(f64, f64)> {
    // eigenvalues of a symmetric 2x2
    let tr = a + c;
    let det = a * c - b * b;
    let disc = math::sqrt((tr * tr / 4.0 - det).max(0.0));
    let lmax = tr / 2.0 + disc;
    let lmin = tr / 2.0 - disc;
    if lmin <= 0.0 || lmax / lmin > cond_limit {
        return None;
    }
    Some((
        (c * rhs.0 - b * rhs.1) / det,
        (a * rhs.1 - b * rhs.0) / det,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_random_system_against_residual() {
        let dim = 6;
        let mut state = 42u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let a: Vec<f64> = (0..dim * dim).map(|_| next()).collect();
        // diagonally dominate to guarantee solvability
        let mut a = a;
        for i in 0..dim {
            a[i * dim + i] += 4.0;
        }
        let b: Vec<f64> = (0..dim).map(|_| next()).collect();
        let x = solve_dense(&a, &b, dim).unwrap();
        for i in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += a[i * dim + k] * x[k];
            }
            assert!((acc - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_system_is_an_error() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(solve_dense(&a, &[1.0, 1.0], 2).is_err());
    }

    #[test]
    fn sym2_identity() {
        let d = solve_sym2(1.0, 0.0, 1.0, (1.0, -1.0), 1e8).unwrap();
        assert!((d.0 - 1.0).abs() < 1e-12 && (d.1 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sym2_degenerate_returns_none() {
        assert!(solve_sym2(0.0, 0.0, 0.0, (1.0, 1.0), 1e8).is_none());
        // rank-1
        assert!(solve_sym2(1.0, 1.0, 1.0, (1.0, 1.0), 1e8).is_none());
    }
}
