//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrized(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// PSD test with tolerance relative to the largest absolute entry.
pub fn is_psd(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = m.amax().max(1e-300);
    min_eigenvalue(m) >= -rel_tol * scale
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clamped.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Factor `F` (n × r) with `m = F Fᵀ`, keeping eigenvalues above
/// `rel_tol · λ_max`.
pub fn psd_factor(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrized(m));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if lmax <= 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > rel_tol * lmax)
        .collect();
    let mut f = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for r in 0..n {
            f[(r, c)] = eig.eigenvectors[(r, i)] * s;
        }
    }
    f
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

pub fn mat_pow(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

/// Inverse of a symmetric positive definite matrix through Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrized(m)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// log det of an SPD matrix.
pub fn spd_logdet(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = symmetrized(m)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let eps = smax * 1e-12 * (m.nrows().max(m.ncols()) as f64);
    svd.pseudo_inverse(eps.max(1e-300))
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

/// Numerical rank with a relative singular-value threshold.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// `[C; CA; …; CA^{n-1}]`.
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ny = c.nrows();
    let mut obs = DMatrix::zeros(ny * n, n);
    let mut block = c.clone();
    for i in 0..n {
        obs.view_mut((i * ny, 0), (ny, n)).copy_from(&block);
        block = &block * a;
    }
    obs
}

/// Orthonormal basis (as columns) of the column space of a symmetric PSD
/// matrix, followed by a basis of its null space.
pub fn range_and_null(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrized(m));
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let (mut range, mut null) = (Vec::new(), Vec::new());
    for i in 0..n {
        if lmax > 0.0 && eig.eigenvalues[i] > rel_tol * lmax {
            range.push(eig.eigenvectors.column(i).into_owned());
        } else {
            null.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    let to_mat = |cols: Vec<DVector<f64>>| {
        if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        }
    };
    (to_mat(range), to_mat(null))
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_unvec_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = vec_of(&m);
        assert_eq!(v.as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(unvec(&v, 2, 3), m);
    }

    #[test]
    fn kronecker_vec_identity() {
        // (φᵀ ⊗ I) vec(G) = G φ
        let g = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        let phi = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let lhs = kron(&DMatrix::from_row_slice(1, 3, phi.as_slice()), &DMatrix::identity(2, 2)) * vec_of(&g);
        let rhs = &g * &phi;
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 0.0, 3.0]);
        let m = &a * a.transpose();
        let f = psd_factor(&m, 1e-12);
        assert_eq!(f.ncols(), 2);
        assert!((&f * f.transpose() - &m).norm() < 1e-12);
        let s = sym_sqrt(&m);
        assert!((&s * &s - &m).norm() < 1e-10);
    }
}
