//! Dense symmetric positive-definite helpers shared by every module.
//!
//! All inversions go through [`spd_cholesky`], which symmetrizes its input and
//! escalates a diagonal jitter when the plain factorization fails. The jitter
//! is relative to the mean diagonal, starting at `1e-10` and growing tenfold up
//! to `1e-4` before giving up with [`Error::SingularCovariance`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn symmetrize_in_place(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Cholesky factor of the symmetrized matrix under the jitter policy.
pub fn spd_cholesky(a: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::SingularCovariance(what));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance(what));
    }
    let sym = symmetrize(a);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok(c);
    }
    let dim = sym.nrows() as f64;
    let scale = sym.trace() / dim;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::SingularCovariance(what));
    }
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let mut jittered = sym.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += rel * scale;
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
        rel *= 10.0;
    }
    Err(Error::SingularCovariance(what))
}

/// Inverse of an SPD matrix, returned exactly symmetric.
pub fn spd_inverse(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let mut inv = spd_cholesky(a, what)?.inverse();
    symmetrize_in_place(&mut inv);
    Ok(inv)
}

/// `ln det A` from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Strict Cholesky solve without jitter; used where singularity must surface.
pub fn strict_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let c = Cholesky::new(symmetrize(a)).ok_or(Error::SingularCovariance(what))?;
    let x = c.solve(b);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularCovariance(what))
    }
}

/// Keeps the `block`×`block` diagonal blocks of `a` and zeroes the rest.
pub fn block_diagonal(a: &DMatrix<f64>, block: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for start in (0..n).step_by(block) {
        let len = block.min(n - start);
        out.view_mut((start, start), (len, len)).copy_from(&a.view((start, start), (len, len)));
    }
    out
}

/// `v vᵀ`.
pub fn outer(v: &DVector<f64>) -> DMatrix<f64> {
    v * v.transpose()
}

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}
