//! Per-layer local geometry: the centered feature matrix `Ξ_f`, the Bayes-action
//! matrix `B`, the loss-whitened `B̃ = R_L B`, the activation Jacobian `J` at
//! the reference bias `b̃`, and the exact and quadratic-surrogate objectives.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::activations::{auto_certify, Activation, GradientCertificate};
use crate::dist::JointDistribution;
use crate::error::{GeomError, Result};
use crate::linalg::{self, frobenius_sq};
use crate::losses::{BayesSolution, LossModel};

/// Probes used when certifying the activation slope at `b̃`.
const CERTIFICATE_PROBES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryBundle {
    pub p_x: DVector<f64>,
    pub sqrt_px: DVector<f64>,
    /// k×|X| centered, √P_X-scaled features.
    pub xi_f: DMatrix<f64>,
    pub mu_f: DVector<f64>,
    /// n×|X| Bayes actions `a_{P_{Y|X=x}}`, one column per x.
    pub cond_actions: DMatrix<f64>,
    /// n×|X| matrix `B` with columns `√P_X(x)(a_{P_{Y|X=x}} − μ_a)`.
    pub b_mat: DMatrix<f64>,
    pub mu_a: DVector<f64>,
    pub a_py: DVector<f64>,
    /// `b̃` with `h(b̃) = a_{P_Y}`.
    pub b_tilde_vec: DVector<f64>,
    pub m_l: DMatrix<f64>,
    /// r×n with `R_Lᵀ R_L = M_L`, r the numerical rank.
    pub r_l: DMatrix<f64>,
    pub j_mat: DMatrix<f64>,
    /// r×|X| matrix `R_L B`.
    pub b_tilde_mat: DMatrix<f64>,
    pub activation: Activation,
    pub certificates: Vec<GradientCertificate>,
}

/// `(Ξ_f, μ_f)` from a k×|X| feature table.
pub fn feature_matrix(p_x: &DVector<f64>, f: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mu = f * p_x;
    let xi = DMatrix::from_fn(f.nrows(), f.ncols(), |i, x| {
        p_x[x].sqrt() * (f[(i, x)] - mu[i])
    });
    (xi, mu)
}

/// Inverse of [`feature_matrix`]: `f(x) = μ_f + ξ_f(x)/√P_X(x)`.
pub fn feature_table(p_x: &DVector<f64>, xi_f: &DMatrix<f64>, mu_f: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(xi_f.nrows(), xi_f.ncols(), |i, x| {
        mu_f[i] + xi_f[(i, x)] / p_x[x].sqrt()
    })
}

/// Exact Bayes solutions for every conditional `P_{Y|X=x}`.
pub fn conditional_bayes(j: &JointDistribution, model: &LossModel) -> Result<Vec<BayesSolution>> {
    (0..j.nx())
        .map(|x| model.bayes_action(&j.conditional(x)))
        .collect()
}

pub fn build_bundle(
    j: &JointDistribution,
    model: &LossModel,
    act: Activation,
    f: &DMatrix<f64>,
) -> Result<GeometryBundle> {
    let a_py = model.bayes_action(j.p_y())?.action;
    let conds = conditional_bayes(j, model)?;
    let cols: Vec<DVector<f64>> = conds.into_iter().map(|s| s.action).collect();
    let cond_actions = DMatrix::from_columns(&cols);
    let m_l = model.hessian_ml_at(j.p_y(), &a_py)?;
    GeometryBundle::from_parts(j.p_x(), a_py, cond_actions, m_l, act, f)
}

impl GeometryBundle {
    /// Assembles a bundle from already solved Bayes actions and `M_L`.
    pub fn from_parts(
        p_x: &DVector<f64>,
        a_py: DVector<f64>,
        cond_actions: DMatrix<f64>,
        m_l: DMatrix<f64>,
        act: Activation,
        f: &DMatrix<f64>,
    ) -> Result<Self> {
        let n = a_py.len();
        if cond_actions.shape() != (n, p_x.len()) {
            return Err(GeomError::DimensionMismatch(format!(
                "conditional actions are {:?}, expected ({n}, {})",
                cond_actions.shape(),
                p_x.len()
            )));
        }
        if m_l.shape() != (n, n) {
            return Err(GeomError::DimensionMismatch(
                "M_L shape differs from action dimension".into(),
            ));
        }
        if f.ncols() != p_x.len() {
            return Err(GeomError::DimensionMismatch(format!(
                "feature table has {} columns, |X| = {}",
                f.ncols(),
                p_x.len()
            )));
        }
        let sqrt_px = p_x.map(f64::sqrt);
        let (xi_f, mu_f) = feature_matrix(p_x, f);
        let mu_a = &cond_actions * p_x;
        let b_mat = DMatrix::from_fn(n, p_x.len(), |i, x| {
            sqrt_px[x] * (cond_actions[(i, x)] - mu_a[i])
        });
        let b_tilde_vec = act.inverse_vec(&a_py)?;
        let j_mat = act.jacobian(&b_tilde_vec);
        let certificates = b_tilde_vec
            .iter()
            .map(|&c| auto_certify(&act, c, CERTIFICATE_PROBES))
            .collect();
        let r_l = linalg::psd_sqrt_factor(&m_l);
        let b_tilde_mat = &r_l * &b_mat;
        Ok(Self {
            p_x: p_x.clone(),
            sqrt_px,
            xi_f,
            mu_f,
            cond_actions,
            b_mat,
            mu_a,
            a_py,
            b_tilde_vec,
            m_l,
            r_l,
            j_mat,
            b_tilde_mat,
            activation: act,
            certificates,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.a_py.len()
    }

    pub fn nx(&self) -> usize {
        self.p_x.len()
    }

    /// Numerical rank of `M_L`, the row count of `R_L` and `B̃`.
    pub fn whitened_dim(&self) -> usize {
        self.r_l.nrows()
    }

    pub fn assumption1_certified(&self) -> bool {
        self.certificates.iter().all(|c| c.verified)
    }

    /// `Ξ_W = R_L J Wᵀ` for an output weight `W` of shape k×n.
    pub fn xi_w(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        &self.r_l * &self.j_mat * w.transpose()
    }

    /// `R_L (a_{P_Y} − μ_a + J d)`, the part of the η residual not driven by `μ_f`.
    pub fn eta_offset(&self, d: &DVector<f64>) -> DVector<f64> {
        &self.r_l * (&self.a_py - &self.mu_a + &self.j_mat * d)
    }

    /// `η = ‖R_L(a_{P_Y} − μ_a + J d) + Ξ_W μ_f‖²`.
    pub fn eta(&self, xi_w: &DMatrix<f64>, d: &DVector<f64>, mu_f: &DVector<f64>) -> f64 {
        (self.eta_offset(d) + xi_w * mu_f).norm_squared()
    }

    /// Recovers a k×n weight `W` with `R_L J Wᵀ = Ξ_W` (minimum norm; unique
    /// only modulo the nullspace of `M_L`).
    pub fn weight_from_xi(&self, xi_w: &DMatrix<f64>) -> DMatrix<f64> {
        // rows of R_L are orthogonal with squared norms equal to the kept eigenvalues
        let gram = &self.r_l * self.r_l.transpose();
        let r_pinv = DMatrix::from_fn(self.r_l.ncols(), self.r_l.nrows(), |i, j| {
            self.r_l[(j, i)] / gram[(j, j)]
        });
        let j_inv = DMatrix::from_diagonal(&self.j_mat.diagonal().map(|v| 1.0 / v));
        (j_inv * r_pinv * xi_w).transpose()
    }

    pub fn to_json(&self) -> BundleJson {
        BundleJson {
            activation: self.activation.to_string(),
            assumption1_certified: self.assumption1_certified(),
            p_x: self.p_x.iter().copied().collect(),
            sqrt_px: self.sqrt_px.iter().copied().collect(),
            a_py: self.a_py.iter().copied().collect(),
            mu_a: self.mu_a.iter().copied().collect(),
            mu_f: self.mu_f.iter().copied().collect(),
            b_tilde_vec: self.b_tilde_vec.iter().copied().collect(),
            xi_f: MatrixJson::from(&self.xi_f),
            b_mat: MatrixJson::from(&self.b_mat),
            m_l: MatrixJson::from(&self.m_l),
            r_l: MatrixJson::from(&self.r_l),
            j_mat: MatrixJson::from(&self.j_mat),
            b_tilde_mat: MatrixJson::from(&self.b_tilde_mat),
        }
    }
}

/// Row-major matrix with an explicit shape header.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixJson {
    pub shape: [usize; 2],
    pub data: Vec<Vec<f64>>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            shape: [m.nrows(), m.ncols()],
            data: linalg::to_rows(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BundleJson {
    pub activation: String,
    pub assumption1_certified: bool,
    pub p_x: Vec<f64>,
    pub sqrt_px: Vec<f64>,
    pub a_py: Vec<f64>,
    pub mu_a: Vec<f64>,
    pub mu_f: Vec<f64>,
    pub b_tilde_vec: Vec<f64>,
    pub xi_f: MatrixJson,
    pub b_mat: MatrixJson,
    pub m_l: MatrixJson,
    pub r_l: MatrixJson,
    pub j_mat: MatrixJson,
    pub b_tilde_mat: MatrixJson,
}

/// `Σ_x P_X(x) D_L(a_{P_{Y|X=x}} ‖ h(Wᵀ f(x) + b))`, exact.
pub fn true_objective(
    j: &JointDistribution,
    model: &LossModel,
    act: Activation,
    f: &DMatrix<f64>,
    w: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<f64> {
    let conds = conditional_bayes(j, model)?;
    true_objective_with(j, model, &conds, act, f, w, b)
}

/// [`true_objective`] with the conditional Bayes solutions supplied.
pub fn true_objective_with(
    j: &JointDistribution,
    model: &LossModel,
    conds: &[BayesSolution],
    act: Activation,
    f: &DMatrix<f64>,
    w: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<f64> {
    if f.ncols() != j.nx() || w.nrows() != f.nrows() || w.ncols() != b.len() {
        return Err(GeomError::DimensionMismatch(format!(
            "f {:?}, W {:?}, b {} incompatible",
            f.shape(),
            w.shape(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for x in 0..j.nx() {
        let a = act.eval_vec(&(w.tr_mul(&f.column(x)) + b));
        total += j.p_x()[x] * model.divergence_from(&j.conditional(x), &conds[x], &a)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurrogateTerms {
    pub total: f64,
    /// `½‖B̃ − Ξ_W Ξ_f‖_F²`.
    pub frobenius_term: f64,
    /// `½η(d, f)`.
    pub eta_term: f64,
}

/// Quadratic surrogate `½‖B̃ − Ξ_W Ξ_f‖_F² + ½η(d, f)` at `(W, b, f)`.
pub fn surrogate_objective(
    bundle: &GeometryBundle,
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    f: &DMatrix<f64>,
) -> SurrogateTerms {
    let (xi_f, mu_f) = feature_matrix(&bundle.p_x, f);
    let xi_w = bundle.xi_w(w);
    let frobenius_term = 0.5 * frobenius_sq(&(&bundle.b_tilde_mat - &xi_w * &xi_f));
    let d = b - &bundle.b_tilde_vec;
    let eta_term = 0.5 * bundle.eta(&xi_w, &d, &mu_f);
    SurrogateTerms {
        total: frobenius_term + eta_term,
        frobenius_term,
        eta_term,
    }
}

/// Largest pre-activation deviation `max_{i,x} |w_iᵀ f(x) + b_i − b̃_i|`.
pub fn local_regime_deviation(
    bundle: &GeometryBundle,
    w: &DMatrix<f64>,
    b: &DVector<f64>,
    f: &DMatrix<f64>,
) -> f64 {
    let z = w.tr_mul(f);
    let mut worst: f64 = 0.0;
    for x in 0..f.ncols() {
        for i in 0..b.len() {
            worst = worst.max((z[(i, x)] + b[i] - bundle.b_tilde_vec[i]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{make_direction, perturb, uniform};

    fn fixture(eps: f64) -> JointDistribution {
        let p = uniform(2);
        let raw = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let dir = make_direction(&p, &p, &raw).unwrap();
        perturb(&p, &p, &dir, eps).unwrap()
    }

    #[test]
    fn independent_joint_has_zero_b() {
        let j = fixture(0.0);
        let f = DMatrix::from_row_slice(1, 2, &[0.3, -0.1]);
        let bundle = build_bundle(&j, &LossModel::log(2), Activation::Sigmoid, &f).unwrap();
        assert_eq!(bundle.b_mat, DMatrix::zeros(2, 2));
    }

    #[test]
    fn hand_fixture_b_and_r() {
        let j = fixture(0.2);
        let f = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let bundle = build_bundle(&j, &LossModel::log(2), Activation::Sigmoid, &f).unwrap();
        let v = 0.5f64.sqrt() * 0.1;
        // (B)_{y,x} = √P_X(x)(P_{Y|X=x}(y) − P_Y(y)); P_{Y|X=0} = (0.6, 0.4)
        let expected = DMatrix::from_row_slice(2, 2, &[v, -v, -v, v]);
        assert!((&bundle.b_mat - expected).amax() < 1e-15);
        assert_eq!(bundle.r_l.nrows(), 1);
        assert!((bundle.r_l[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((bundle.r_l[(0, 1)] + 1.0).abs() < 1e-12);
        assert!((&bundle.b_tilde_mat * &bundle.sqrt_px).amax() < 1e-12);
        assert!((bundle.r_l.transpose() * &bundle.r_l - &bundle.m_l).norm() < 1e-10);
        assert!(bundle.assumption1_certified());
    }

    #[test]
    fn sigmoid_cannot_represent_out_of_image_bayes_action() {
        let j = fixture(0.1);
        let model = LossModel::squared_scalar(&[-1.0, 3.0]);
        let f = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        // E[Y] = 1 lies outside (0, 1)
        assert!(matches!(
            build_bundle(&j, &model, Activation::Sigmoid, &f),
            Err(GeomError::OutOfImage { .. })
        ));
    }

    #[test]
    fn constant_action_baseline() {
        let j = fixture(0.2);
        let model = LossModel::log(2);
        let f = DMatrix::from_row_slice(1, 2, &[0.4, -0.4]);
        let w = DMatrix::zeros(1, 2);
        let b_tilde = Activation::Sigmoid.inverse_vec(j.p_y()).unwrap();
        let obj = true_objective(&j, &model, Activation::Sigmoid, &f, &w, &b_tilde).unwrap();
        let baseline: f64 = (0..2)
            .map(|x| j.p_x()[x] * model.divergence(&j.conditional(x), j.p_y()).unwrap())
            .sum();
        assert!((obj - baseline).abs() < 1e-15);
        let j0 = fixture(0.0);
        let obj0 = true_objective(&j0, &model, Activation::Sigmoid, &f, &w, &b_tilde).unwrap();
        assert!(obj0.abs() < 1e-15);
    }

    #[test]
    fn surrogate_at_reference_point() {
        let j = fixture(0.2);
        let model = LossModel::log(2);
        // μ_f = 0 under uniform P_X
        let f = DMatrix::from_row_slice(1, 2, &[0.4, -0.4]);
        let bundle = build_bundle(&j, &model, Activation::Sigmoid, &f).unwrap();
        let w = DMatrix::zeros(1, 2);
        let terms = surrogate_objective(&bundle, &w, &bundle.b_tilde_vec.clone(), &f);
        let v = &bundle.a_py - &bundle.mu_a;
        let expected = 0.5 * frobenius_sq(&bundle.b_tilde_mat)
            + 0.5 * (v.transpose() * &bundle.m_l * &v)[(0, 0)];
        assert!((terms.total - expected).abs() < 1e-15);
        assert!(terms.eta_term >= -1e-12);
    }

    #[test]
    fn weight_recovery_reproduces_xi_w() {
        let j = fixture(0.2);
        let f = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let bundle = build_bundle(&j, &LossModel::log(2), Activation::Softplus, &f).unwrap();
        let xi_w = DMatrix::from_row_slice(1, 1, &[0.7]);
        let w = bundle.weight_from_xi(&xi_w);
        assert!((bundle.xi_w(&w) - xi_w).amax() < 1e-14);
    }
}
