//! Small dense linear-algebra helpers shared by the geometry and low-rank code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GeomError, Result};

/// Condition-number ceiling for Gram-matrix solves.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Relative eigenvalue floor below which a PSD matrix is treated as rank deficient.
pub const PSD_RANK_FLOOR: f64 = 1e-12;

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Flips the sign of `v` so that its first non-negligible entry is positive.
/// Returns the sign that was applied.
pub fn canonical_sign(v: &mut DVector<f64>) -> f64 {
    let scale = v.amax();
    if scale == 0.0 {
        return 1.0;
    }
    let first = v
        .iter()
        .copied()
        .find(|x| x.abs() > 1e-12 * scale)
        .unwrap_or(0.0);
    if first < 0.0 {
        v.neg_mut();
        -1.0
    } else {
        1.0
    }
}

/// Square-root factor `R` (r x n) of a symmetric PSD matrix with `RᵀR = M`.
///
/// Eigenvalues below `PSD_RANK_FLOOR * λ_max` are dropped, so `r` is the
/// numerical rank. Rows come in descending eigenvalue order.
pub fn psd_sqrt_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if lmax <= 0.0 {
        return DMatrix::zeros(0, n);
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > PSD_RANK_FLOOR * lmax)
        .collect();
    let mut r = DMatrix::zeros(kept.len(), n);
    for (row, &i) in kept.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        canonical_sign(&mut v);
        let s = eig.eigenvalues[i].sqrt();
        for c in 0..n {
            r[(row, c)] = s * v[c];
        }
    }
    r
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Solves `G X = rhs` for a symmetric positive-definite Gram matrix `G`.
///
/// Fails with `SingularGram` when the spectral condition number exceeds
/// `GRAM_CONDITION_LIMIT`.
pub fn spd_solve(gram: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmax > 0.0) || lmin <= 0.0 || lmax / lmin > GRAM_CONDITION_LIMIT {
        let condition = if lmin > 0.0 {
            lmax / lmin
        } else {
            f64::INFINITY
        };
        return Err(GeomError::SingularGram { condition });
    }
    let chol = sym.cholesky().ok_or(GeomError::SingularGram {
        condition: lmax / lmin,
    })?;
    Ok(chol.solve(rhs))
}

/// Orthonormal basis (as rows) of the row space of `a`.
pub fn row_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(0, a.ncols());
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(0, a.ncols());
    }
    let tol = smax * 1e-10 * (a.nrows().max(a.ncols()) as f64);
    let idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    DMatrix::from_fn(idx.len(), a.ncols(), |r, c| v_t[(idx[r], c)])
}

/// Principal angles (radians, ascending) between the row spaces of `a` and `b`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = row_space_basis(a);
    let qb = row_space_basis(b);
    if qa.nrows() == 0 || qb.nrows() == 0 {
        return Vec::new();
    }
    let overlap = &qa * qb.transpose();
    let mut cosines: Vec<f64> = overlap
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    cosines
        .into_iter()
        .map(|c| c.clamp(-1.0, 1.0).acos())
        .collect()
}

/// Largest principal angle between the row spaces, in degrees.
pub fn max_principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    principal_angles(a, b)
        .into_iter()
        .fold(0.0, f64::max)
        .to_degrees()
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(GeomError::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
