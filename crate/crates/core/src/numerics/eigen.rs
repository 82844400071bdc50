//! Eigenvalues of symmetric matrices via the cyclic Jacobi method.
//!
//! Each sweep visits every upper-triangle pair `(p, q)` and applies a
//! rotation that zeroes `a[p][q]`. Convergence is declared when the
//! off-diagonal Frobenius norm drops below `1e-10`; more than 100 sweeps is
//! reported as a numeric failure rather than returning a half-converged
//! spectrum.

use super::Matrix;
use crate::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-9;

/// Full eigenvalue list of a symmetric matrix, sorted descending.
///
/// The input must be square and symmetric to within `1e-9`; asymmetry is a
/// shape error, not silently symmetrized.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::Shape(format!(
            "eigenvalues of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(i, j) - m.get(j, i)).abs() > SYMMETRY_TOL {
                return Err(Error::Shape(format!(
                    "matrix is not symmetric at ({i},{j}): {} vs {}",
                    m.get(i, j),
                    m.get(j, i)
                )));
            }
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut a = m.clone();
    // Enforce exact symmetry so rotations keep both triangles in lockstep.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) < OFF_DIAGONAL_TOL {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, p, q);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) >= OFF_DIAGONAL_TOL {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver failed to converge in {MAX_SWEEPS} sweeps \
             (off-diagonal norm {:.3e})",
            off_diagonal_norm(&a)
        )));
    }

    let mut eigs: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eigs.sort_by(|x, y| y.partial_cmp(x).expect("finite eigenvalues"));
    Ok(eigs)
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = a.get(i, j);
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}

/// One Jacobi rotation zeroing `a[p][q]` (and `a[q][p]`).
fn rotate(a: &mut Matrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    let n = a.rows();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(p, k, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
        a.set(q, k, s * akp + c * akq);
    }
    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
}
