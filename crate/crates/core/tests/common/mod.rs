//! Independent reference implementations used as test oracles. Nothing here
//! calls into nalgebra's factorizations.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Gaussian elimination with partial pivoting, `a x = b` for a matrix rhs.
pub fn gauss_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| a[(i, j)])
                .chain((0..m).map(|j| b[(i, j)]))
                .collect()
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| aug[r][col].abs().total_cmp(&aug[s][col].abs()))
            .unwrap();
        aug.swap(col, pivot);
        for row in col + 1..n {
            let factor = aug[row][col] / aug[col][col];
            for k in col..n + m {
                aug[row][k] -= factor * aug[col][k];
            }
        }
    }
    let mut x = DMatrix::zeros(n, m);
    for c in 0..m {
        for row in (0..n).rev() {
            let mut acc = aug[row][n + c];
            for k in row + 1..n {
                acc -= aug[row][k] * x[(k, c)];
            }
            x[(row, c)] = acc / aug[row][row];
        }
    }
    x
}

/// `argmin_X ‖target − X·f‖_F` via the normal equations `X (f fᵀ) = target fᵀ`.
pub fn lstsq_right(target: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = f * f.transpose();
    let rhs = f * target.transpose();
    gauss_solve(&gram, &rhs).transpose()
}

/// `argmin_F ‖target − w·F‖_F` via the normal equations `(wᵀw) F = wᵀ target`.
pub fn lstsq_left(target: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    gauss_solve(&(w.transpose() * w), &(w.transpose() * target))
}

/// Singular values by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    // orthogonalize the columns of the taller orientation
    let a = if m.nrows() >= m.ncols() {
        m.clone()
    } else {
        m.transpose()
    };
    let rows = a.nrows();
    let cols = a.ncols();
    let mut u: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a[(i, j)]).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|v| v * v).sum();
                let beta: f64 = u[q].iter().map(|v| v * v).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let up = u[p][i];
                    let uq = u[q][i];
                    u[p][i] = c * up - s * uq;
                    u[q][i] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = u
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `½‖b − w f‖_F²`.
pub fn half_frobenius(b: &DMatrix<f64>, w: &DMatrix<f64>, f: &DMatrix<f64>) -> f64 {
    0.5 * (b - w * f).norm_squared()
}

/// Central-difference gradient of a matrix function.
pub fn numeric_matrix_gradient(x: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let h = 1e-6 * x[(i, j)].abs().max(1.0);
            let mut up = x.clone();
            let mut dn = x.clone();
            up[(i, j)] += h;
            dn[(i, j)] -= h;
            g[(i, j)] = (f(&up) - f(&dn)) / (2.0 * h);
        }
    }
    g
}

/// Central-difference gradient of a vector function.
pub fn numeric_gradient(x: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> DVector<f64> {
    let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let g = numeric_matrix_gradient(&m, |v| f(&v.column(0).into_owned()));
    g.column(0).into_owned()
}
