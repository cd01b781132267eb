//! Small dense k x k kernels used by the row solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Smallest admissible squared Cholesky pivot, relative to the largest diagonal entry.
const PIVOT_FLOOR: f64 = 1e-13;

/// Threshold on `|1 + w yᵀA⁻¹y|` below which a rank-one inverse update is refused.
pub const SINGULAR_UPDATE_EPS: f64 = 1e-10;

fn factor(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("system matrix".into()));
    }
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, &d| m.max(d.abs()));
    if max_diag == 0.0 {
        return Err(Error::SingularSubproblem);
    }
    let chol = a.clone().cholesky().ok_or(Error::SingularSubproblem)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d * d));
    if min_pivot < PIVOT_FLOOR * max_diag {
        return Err(Error::SingularSubproblem);
    }
    Ok(chol)
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(factor(a)?.solve(b))
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = factor(a)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for r in 0..k {
        for c in r + 1..k {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Outcome of a conjugate-gradient run.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: DVector<f64>,
    /// Euclidean residual norm before the first and after each iteration.
    pub residual_norms: Vec<f64>,
}

/// Residual norm, relative to `‖b‖`, at which CG stops.
const CG_RESIDUAL_FLOOR: f64 = 1e-15;

/// Runs at most `iters` conjugate-gradient iterations on `a x = b` from `x0`.
///
/// Each new search direction is A-orthogonalized against the earlier ones of
/// its cycle, and after `k` iterations the method restarts from the true
/// residual. In exact arithmetic this is plain CG; in floating point it keeps
/// the finite-termination property on ill-conditioned rows. Stops early once
/// the residual reaches rounding level.
pub fn conjugate_gradient(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: DVector<f64>,
    iters: usize,
) -> Result<CgSolution> {
    let k = b.len();
    let floor = CG_RESIDUAL_FLOOR * b.norm();
    let mut x = x0;
    let mut r = b - a * &x;
    let mut residual_norms = vec![r.norm()];
    let mut done = 0;
    'restart: while done < iters {
        if done > 0 {
            r = b - a * &x;
        }
        let mut rs_old = r.dot(&r);
        if rs_old == 0.0 || rs_old.sqrt() <= floor {
            break;
        }
        let mut p = r.clone();
        // (direction, A·direction, curvature) of the current cycle
        let mut basis: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::with_capacity(k);
        for _ in 0..k.max(1).min(iters - done) {
            done += 1;
            let ap = a * &p;
            let curvature = p.dot(&ap);
            if !curvature.is_finite() {
                return Err(Error::NonFinite("conjugate gradient curvature".into()));
            }
            if curvature <= 0.0 {
                break 'restart;
            }
            let step = r.dot(&p) / curvature;
            x.axpy(step, &p, 1.0);
            r.axpy(-step, &ap, 1.0);
            let rs_new = r.dot(&r);
            if !rs_new.is_finite() {
                return Err(Error::NonFinite("conjugate gradient residual".into()));
            }
            residual_norms.push(rs_new.sqrt());
            if rs_new == 0.0 || rs_new.sqrt() <= floor {
                break 'restart;
            }
            basis.push((p.clone(), ap, curvature));
            p *= rs_new / rs_old;
            p += &r;
            for (d, ad, c) in &basis {
                let coef = p.dot(ad) / c;
                p.axpy(-coef, d, 1.0);
            }
            rs_old = rs_new;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conjugate gradient iterate".into()));
    }
    Ok(CgSolution { x, residual_norms })
}

/// Given `inv = A⁻¹`, returns `(A + w·y yᵀ)⁻¹` by the Sherman-Morrison identity
/// `A⁻¹ - w (A⁻¹y)(A⁻¹y)ᵀ / (1 + w yᵀA⁻¹y)`.
///
/// Negative `w` is a downdate. Fails when the denominator is within
/// [`SINGULAR_UPDATE_EPS`] of zero.
pub fn rank_one_inverse_update(inv: &DMatrix<f64>, y: &[f64], w: f64) -> Result<DMatrix<f64>> {
    let mut out = inv.clone();
    rank_one_inverse_update_in_place(&mut out, y, w)?;
    Ok(out)
}

pub(crate) fn rank_one_inverse_update_in_place(inv: &mut DMatrix<f64>, y: &[f64], w: f64) -> Result<()> {
    let k = inv.nrows();
    if y.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "update vector has length {}, inverse is {k}x{k}",
            y.len()
        )));
    }
    if w == 0.0 {
        return Ok(());
    }
    let y = DVector::from_column_slice(y);
    let z = &*inv * &y;
    let denom = 1.0 + w * y.dot(&z);
    if !denom.is_finite() {
        return Err(Error::NonFinite("rank-one update denominator".into()));
    }
    if denom.abs() <= SINGULAR_UPDATE_EPS {
        return Err(Error::SingularDowndate { gap: denom.abs() });
    }
    let scale = -w / denom;
    // symmetric rank-one correction, written to both triangles from one product
    for c in 0..k {
        let zc = scale * z[c];
        for r in 0..k {
            inv[(r, c)] += z[r] * zc;
        }
    }
    Ok(())
}
