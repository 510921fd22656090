//! Small dense linear-algebra helpers shared by the pipeline.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative eigenvalue floor used when clipping a covariance to PSD.
pub const PSD_CLIP_RELATIVE: f64 = 1e-12;
/// Largest relative Frobenius mass the repair may add before the input is rejected.
pub const PSD_REPAIR_MAX_MASS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error(
        "covariance repair would change the matrix by {removed:.3e} relative Frobenius mass \
         (min eigenvalue {min_eigenvalue:.3e}, max {max_eigenvalue:.3e})"
    )]
    NotPositiveSemidefinite {
        removed: f64,
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("matrix is not positive definite (min eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),
    #[error("non-finite entries in matrix")]
    NonFinite,
}

/// Outcome of [`repair_psd`].
#[derive(Debug, Clone)]
pub struct PsdRepair {
    pub matrix: Mat,
    /// Frobenius norm of the applied correction divided by the norm of the input.
    pub removed_fraction: f64,
    pub min_eigenvalue: f64,
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &Mat) -> Result<(), LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(())
}

/// Symmetrizes `m` and clips its eigenvalues from below at
/// `1e-12 * max(lambda_max, 1e-30)`.
///
/// Fails when the clipping would alter more than `1e-6` of the matrix's
/// Frobenius mass, which indicates an invalid covariance rather than
/// round-off.
pub fn repair_psd(m: &Mat) -> Result<PsdRepair, LinalgError> {
    check_square(m)?;
    let sym = symmetrize(m);
    let norm = sym.norm();
    if sym.nrows() == 0 || norm == 0.0 {
        return Ok(PsdRepair {
            matrix: sym,
            removed_fraction: 0.0,
            min_eigenvalue: 0.0,
        });
    }
    let eig = SymmetricEigen::new(sym.clone());
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    let floor = PSD_CLIP_RELATIVE * max_ev.max(1e-30);
    if min_ev >= floor {
        return Ok(PsdRepair {
            matrix: sym,
            removed_fraction: 0.0,
            min_eigenvalue: min_ev,
        });
    }
    let mut removed_sq = 0.0;
    let clipped = eig.eigenvalues.map(|l| {
        if l < floor {
            removed_sq += (floor - l) * (floor - l);
            floor
        } else {
            l
        }
    });
    let removed = removed_sq.sqrt() / norm;
    if removed > PSD_REPAIR_MAX_MASS {
        return Err(LinalgError::NotPositiveSemidefinite {
            removed,
            min_eigenvalue: min_ev,
            max_eigenvalue: max_ev,
        });
    }
    let q = &eig.eigenvectors;
    let repaired = q * Mat::from_diagonal(&clipped) * q.transpose();
    Ok(PsdRepair {
        matrix: symmetrize(&repaired),
        removed_fraction: removed,
        min_eigenvalue: min_ev,
    })
}

/// Returns `F` with `m = Fᵀ F` for a symmetric PSD `m`.
///
/// Rows belonging to eigenvalues below `rel_tol * lambda_max` are dropped, so
/// `F` may have fewer rows than `m`. Negative eigenvalues are treated as zero.
pub fn psd_factor(m: &Mat, rel_tol: f64) -> Result<Mat, LinalgError> {
    check_square(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let max_ev = eig.eigenvalues.max().max(0.0);
    if max_ev == 0.0 {
        return Ok(Mat::zeros(0, n));
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > rel_tol * max_ev)
        .collect();
    let mut f = Mat::zeros(keep.len(), n);
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for j in 0..n {
            f[(row, j)] = s * eig.eigenvectors[(j, i)];
        }
    }
    Ok(f)
}

/// [`psd_factor`] of the diagonally equilibrated matrix, scaled back.
///
/// The eigenvalue cut is applied to `D⁻¹ m D⁻¹` with `D = diag(√m_ii)`, so
/// directions are kept or dropped independently of the units of each
/// coordinate. Coordinates with a zero diagonal get zero columns.
pub fn psd_factor_equilibrated(m: &Mat, rel_tol: f64) -> Result<Mat, LinalgError> {
    check_square(m)?;
    let n = m.nrows();
    let d: Vec<f64> = (0..n).map(|i| m[(i, i)].max(0.0).sqrt()).collect();
    let live: Vec<usize> = (0..n).filter(|&i| d[i] > 0.0).collect();
    let scaled = Mat::from_fn(live.len(), live.len(), |a, b| {
        m[(live[a], live[b])] / (d[live[a]] * d[live[b]])
    });
    let f_hat = psd_factor(&scaled, rel_tol)?;
    let mut f = Mat::zeros(f_hat.nrows(), n);
    for (a, &i) in live.iter().enumerate() {
        for r in 0..f_hat.nrows() {
            f[(r, i)] = f_hat[(r, a)] * d[i];
        }
    }
    Ok(f)
}

/// Symmetric square root `m^{1/2}` of a PSD matrix (negative eigenvalues clipped to 0).
pub fn sym_sqrt(m: &Mat) -> Result<Mat, LinalgError> {
    check_square(m)?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * Mat::from_diagonal(&d) * q.transpose())
}

/// Symmetric inverse square root of a positive-definite matrix.
pub fn sym_inv_sqrt(m: &Mat) -> Result<Mat, LinalgError> {
    check_square(m)?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let min_ev = eig.eigenvalues.min();
    if min_ev <= 0.0 {
        return Err(LinalgError::NotPositiveDefinite(min_ev));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let q = &eig.eigenvectors;
    Ok(q * Mat::from_diagonal(&d) * q.transpose())
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn max_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    let denom = b.norm();
    if denom == 0.0 {
        a.norm()
    } else {
        (a - b).norm() / denom
    }
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Mat {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    Mat::from_fn(nr, nc, |i, j| rows[i][j])
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrated_factor_keeps_small_scale_directions() {
        // variances 1e10 and 1e-6: a plain relative cut at 1e-12 drops the second
        let m = Mat::from_row_slice(2, 2, &[1e10, 0.5e2, 0.5e2, 1e-6]);
        let f = psd_factor_equilibrated(&m, 1e-12).unwrap();
        assert_eq!(f.nrows(), 2);
        assert!(rel_frobenius(&(f.transpose() * &f), &m) < 1e-12);
        assert_eq!(psd_factor(&m, 1e-12).unwrap().nrows(), 1);
        let z = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 4.0]);
        let fz = psd_factor_equilibrated(&z, 1e-12).unwrap();
        assert_eq!(fz.nrows(), 1);
        assert_eq!(fz[(0, 0)], 0.0);
    }

    #[test]
    fn repair_leaves_pd_matrix_untouched() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = repair_psd(&m).unwrap();
        assert_eq!(r.matrix, m);
        assert_eq!(r.removed_fraction, 0.0);
    }

    #[test]
    fn repair_clips_roundoff_negative() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-15]);
        let r = repair_psd(&m).unwrap();
        assert!(min_eigenvalue(&r.matrix) >= -1e-15);
        assert!(r.removed_fraction < 1e-11);
    }

    #[test]
    fn repair_rejects_indefinite() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(
            repair_psd(&m),
            Err(LinalgError::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn factor_reconstructs_singular_matrix() {
        let v = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let m = &v * v.transpose();
        let f = psd_factor(&m, 1e-12).unwrap();
        assert_eq!(f.nrows(), 1);
        assert!((f.transpose() * &f - &m).norm() < 1e-12);
    }

    #[test]
    fn zero_matrix_factor_has_no_rows() {
        let f = psd_factor(&Mat::zeros(3, 3), 1e-12).unwrap();
        assert_eq!(f.shape(), (0, 3));
    }

    #[test]
    fn inverse_sqrt_rejects_singular() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(sym_inv_sqrt(&m).is_err());
        let p = Mat::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let s = sym_inv_sqrt(&p).unwrap();
        assert!((s[(0, 0)] - 0.5).abs() < 1e-14 && (s[(1, 1)] - 1.0 / 3.0).abs() < 1e-14);
    }
}
