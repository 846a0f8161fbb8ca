//! Loss functions, Bayes actions, the excess-risk divergence `D_L` and the
//! Hessian `M_L` of the expected loss at the Bayes action.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{GeomError, Result};
use crate::layerwise::DownstreamStack;

#[derive(Debug, Clone, PartialEq)]
pub enum LossModel {
    /// `−log(a_y / Σ a)`, actions in the open positive orthant of ℝ^|Y|.
    Log { n: usize },
    /// `½‖y_vec − a‖²`; `y_values` is |Y|×n, one embedded label per row.
    Squared { y_values: DMatrix<f64> },
    /// Base loss pre-composed with fixed downstream layers.
    Composite(Arc<DownstreamStack>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveMethod {
    ClosedForm,
    Numeric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesSolution {
    pub action: DVector<f64>,
    pub risk: f64,
    pub gradient_norm: f64,
    pub method: SolveMethod,
    pub iterations: usize,
}

/// Settings for the numeric Bayes-action solver used by composite losses.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    /// Starting point; zeros when absent.
    pub init: Option<DVector<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iter: 100_000,
            armijo_c: 1e-4,
            shrink: 0.5,
            init: None,
        }
    }
}

/// Largest gradient norm accepted for a numeric Bayes solution.
pub const NUMERIC_GRADIENT_CEILING: f64 = 1e-9;

impl LossModel {
    pub fn log(n: usize) -> Self {
        LossModel::Log { n }
    }

    /// Squared error with scalar labels.
    pub fn squared_scalar(values: &[f64]) -> Self {
        LossModel::Squared {
            y_values: DMatrix::from_column_slice(values.len(), 1, values),
        }
    }

    pub fn squared(y_values: DMatrix<f64>) -> Self {
        LossModel::Squared { y_values }
    }

    pub fn composite(stack: DownstreamStack) -> Self {
        LossModel::Composite(Arc::new(stack))
    }

    /// Dimension n of the action space.
    pub fn action_dim(&self) -> usize {
        match self {
            LossModel::Log { n } => *n,
            LossModel::Squared { y_values } => y_values.ncols(),
            LossModel::Composite(stack) => stack.input_dim(),
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            LossModel::Log { n } => *n,
            LossModel::Squared { y_values } => y_values.nrows(),
            LossModel::Composite(stack) => stack.base().num_labels(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossModel::Log { .. } => "log",
            LossModel::Squared { .. } => "l2",
            LossModel::Composite(_) => "composite",
        }
    }

    fn check_dims(&self, a: &DVector<f64>) -> Result<()> {
        if a.len() != self.action_dim() {
            return Err(GeomError::DimensionMismatch(format!(
                "action has length {}, loss expects {}",
                a.len(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    fn check_label_dist(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.num_labels() {
            return Err(GeomError::DimensionMismatch(format!(
                "distribution over {} labels, loss has {}",
                q.len(),
                self.num_labels()
            )));
        }
        Ok(())
    }

    pub fn loss(&self, y: usize, a: &DVector<f64>) -> Result<f64> {
        self.check_dims(a)?;
        if y >= self.num_labels() {
            return Err(GeomError::DimensionMismatch(format!(
                "label {y} out of range"
            )));
        }
        match self {
            LossModel::Log { .. } => {
                check_positive(a)?;
                Ok(-(a[y] / a.sum()).ln())
            }
            LossModel::Squared { y_values } => {
                let diff = y_values.row(y).transpose() - a;
                Ok(0.5 * diff.norm_squared())
            }
            LossModel::Composite(stack) => stack.loss(y, a),
        }
    }

    /// `E_{Y~q}[L(Y, a)]`.
    pub fn expected_loss(&self, q: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
        self.check_dims(a)?;
        self.check_label_dist(q)?;
        match self {
            LossModel::Log { .. } => {
                check_positive(a)?;
                let total = a.sum();
                Ok(q.iter()
                    .zip(a.iter())
                    .map(|(qy, ay)| -qy * (ay / total).ln())
                    .sum())
            }
            LossModel::Squared { y_values } => Ok((0..y_values.nrows())
                .map(|y| q[y] * 0.5 * (y_values.row(y).transpose() - a).norm_squared())
                .sum()),
            LossModel::Composite(stack) => stack.expected_loss(q, a),
        }
    }

    /// Gradient of `a ↦ E_{Y~q}[L(Y, a)]`.
    pub fn expected_gradient(&self, q: &DVector<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(a)?;
        self.check_label_dist(q)?;
        match self {
            LossModel::Log { .. } => {
                check_positive(a)?;
                let mass = q.sum() / a.sum();
                Ok(DVector::from_fn(a.len(), |j, _| mass - q[j] / a[j]))
            }
            LossModel::Squared { y_values } => Ok(q.sum() * a - y_values.transpose() * q),
            LossModel::Composite(stack) => stack.expected_gradient(q, a),
        }
    }

    /// Hessian of `a ↦ E_{Y~q}[L(Y, a)]` at an arbitrary admissible `a`.
    pub fn expected_hessian(&self, q: &DVector<f64>, a: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dims(a)?;
        self.check_label_dist(q)?;
        match self {
            LossModel::Log { .. } => {
                check_positive(a)?;
                let total = a.sum();
                let mass = q.sum();
                Ok(DMatrix::from_fn(a.len(), a.len(), |i, j| {
                    let diag = if i == j { q[i] / (a[i] * a[i]) } else { 0.0 };
                    diag - mass / (total * total)
                }))
            }
            LossModel::Squared { .. } => Ok(DMatrix::identity(a.len(), a.len()) * q.sum()),
            LossModel::Composite(_) => finite_difference_hessian(self, q, a),
        }
    }

    pub fn bayes_action(&self, q: &DVector<f64>) -> Result<BayesSolution> {
        self.bayes_action_with(q, &SolverConfig::default())
    }

    pub fn bayes_action_with(&self, q: &DVector<f64>, cfg: &SolverConfig) -> Result<BayesSolution> {
        self.check_label_dist(q)?;
        if let Some(bad) = q.iter().find(|v| !(**v > 0.0)) {
            return Err(GeomError::InvalidDistribution(format!(
                "Bayes action needs a strictly positive distribution, found {bad}"
            )));
        }
        match self {
            LossModel::Log { .. } => {
                let action = q.clone();
                let risk = self.expected_loss(q, &action)?;
                Ok(BayesSolution {
                    action,
                    risk,
                    gradient_norm: 0.0,
                    method: SolveMethod::ClosedForm,
                    iterations: 0,
                })
            }
            LossModel::Squared { y_values } => {
                let action = y_values.transpose() * q;
                let risk = self.expected_loss(q, &action)?;
                Ok(BayesSolution {
                    action,
                    risk,
                    gradient_norm: 0.0,
                    method: SolveMethod::ClosedForm,
                    iterations: 0,
                })
            }
            LossModel::Composite(_) => minimize_expected_loss(self, q, cfg),
        }
    }

    /// `D_L(a_q ‖ a) = E_q[L(Y, a)] − E_q[L(Y, a_q)]`.
    pub fn divergence(&self, q: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
        let bayes = self.bayes_action(q)?;
        self.divergence_from(q, &bayes, a)
    }

    /// Divergence against an already computed Bayes solution for `q`.
    pub fn divergence_from(
        &self,
        q: &DVector<f64>,
        bayes: &BayesSolution,
        a: &DVector<f64>,
    ) -> Result<f64> {
        Ok(self.expected_loss(q, a)? - bayes.risk)
    }

    /// `M_L`: Hessian of the expected loss at the Bayes action for `q`.
    pub fn hessian_ml(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let bayes = self.bayes_action(q)?;
        self.hessian_ml_at(q, &bayes.action)
    }

    /// `M_L` at a given Bayes representative.
    pub fn hessian_ml_at(
        &self,
        q: &DVector<f64>,
        bayes_action: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        match self {
            // δ(y,y')/q(y) − 1 at the representative a = q
            LossModel::Log { .. } => self.expected_hessian(q, bayes_action),
            LossModel::Squared { .. } => {
                Ok(DMatrix::identity(self.action_dim(), self.action_dim()))
            }
            LossModel::Composite(_) => finite_difference_hessian(self, q, bayes_action),
        }
    }
}

fn check_positive(a: &DVector<f64>) -> Result<()> {
    match a.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        Some(v) => Err(GeomError::InadmissibleAction(format!(
            "log loss needs every coordinate > 0, found {v}"
        ))),
        None => Ok(()),
    }
}

/// Central differences of the analytic gradient, step `ε_mach^{1/3}·max(1, |a_i|)`,
/// symmetrized.
pub fn finite_difference_hessian(
    model: &LossModel,
    q: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.len();
    let base_step = f64::EPSILON.cbrt();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let step = base_step * a[i].abs().max(1.0);
        let mut up = a.clone();
        let mut dn = a.clone();
        up[i] += step;
        dn[i] -= step;
        let col =
            (model.expected_gradient(q, &up)? - model.expected_gradient(q, &dn)?) / (up[i] - dn[i]);
        h.set_column(i, &col);
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Gradient descent with Armijo backtracking on `a ↦ E_q[L(Y, a)]`.
///
/// The first trial step of each iteration is the Barzilai–Borwein step
/// (falling back to twice the last accepted step). Near the optimum, where
/// the Armijo decrease drops below rounding, a step that leaves the value
/// unchanged to rounding and reduces the gradient norm is accepted.
fn minimize_expected_loss(
    model: &LossModel,
    q: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<BayesSolution> {
    let n = model.action_dim();
    let mut a = cfg.init.clone().unwrap_or_else(|| DVector::zeros(n));
    let mut f = model.expected_loss(q, &a)?;
    let mut g = model.expected_gradient(q, &a)?;
    let mut last_step = 1.0;
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;

    for iter in 0..cfg.max_iter {
        let gn = g.norm();
        if gn <= cfg.grad_tol {
            return Ok(BayesSolution {
                action: a,
                risk: f,
                gradient_norm: gn,
                method: SolveMethod::Numeric,
                iterations: iter,
            });
        }
        let mut t = match &prev {
            Some((s, yv)) => {
                let sy = s.dot(yv);
                if sy > 0.0 {
                    s.norm_squared() / sy
                } else {
                    2.0 * last_step
                }
            }
            None => 1.0 / gn.max(1.0),
        };
        let mut accepted = None;
        for _ in 0..80 {
            let cand = &a - t * &g;
            if let Ok(fc) = model.expected_loss(q, &cand) {
                if fc <= f - cfg.armijo_c * t * gn * gn {
                    accepted = Some((cand, fc, None));
                    break;
                }
                if (fc - f).abs() <= 1e-14 * f.abs().max(1.0) {
                    let gc = model.expected_gradient(q, &cand)?;
                    if gc.norm() < gn {
                        accepted = Some((cand, fc, Some(gc)));
                        break;
                    }
                }
            }
            t *= cfg.shrink;
        }
        let Some((cand, fc, gc)) = accepted else {
            return Err(GeomError::NonConvergence {
                context: "Bayes action line search".into(),
                iterations: iter,
                residual: gn,
            });
        };
        let gc = match gc {
            Some(gc) => gc,
            None => model.expected_gradient(q, &cand)?,
        };
        prev = Some((&cand - &a, &gc - &g));
        last_step = t;
        a = cand;
        f = fc;
        g = gc;
    }
    let gn = g.norm();
    if gn <= NUMERIC_GRADIENT_CEILING {
        return Ok(BayesSolution {
            action: a,
            risk: f,
            gradient_norm: gn,
            method: SolveMethod::Numeric,
            iterations: cfg.max_iter,
        });
    }
    Err(GeomError::NonConvergence {
        context: "Bayes action".into(),
        iterations: cfg.max_iter,
        residual: gn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    fn random_simplex(n: usize, rng: &mut impl Rng) -> DVector<f64> {
        let v = DVector::from_fn(n, |_, _| rng.random_range(0.2..1.0));
        let s = v.sum();
        v / s
    }

    #[test]
    fn named_loss_values() {
        let log = LossModel::log(2);
        let half = DVector::from_vec(vec![0.5, 0.5]);
        assert!((log.loss(1, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
        let two = DVector::from_vec(vec![2.0, 2.0]);
        let one = DVector::from_vec(vec![1.0, 1.0]);
        for y in 0..2 {
            assert_eq!(log.loss(y, &two).unwrap(), log.loss(y, &one).unwrap());
        }
        let sq = LossModel::squared(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(sq.loss(0, &DVector::from_vec(vec![1.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn log_loss_rejects_nonpositive_action() {
        let log = LossModel::log(2);
        let bad = DVector::from_vec(vec![0.0, 1.0]);
        assert!(matches!(
            log.loss(0, &bad),
            Err(GeomError::InadmissibleAction(_))
        ));
    }

    #[test]
    fn closed_form_bayes_actions() {
        let q = DVector::from_vec(vec![0.3, 0.7]);
        let sol = LossModel::log(2).bayes_action(&q).unwrap();
        assert_eq!(sol.action, q);
        assert_eq!(sol.method, SolveMethod::ClosedForm);
        assert_eq!(sol.gradient_norm, 0.0);

        let bern = LossModel::squared_scalar(&[0.0, 1.0]);
        let q = DVector::from_vec(vec![0.7, 0.3]);
        assert!((bern.bayes_action(&q).unwrap().action[0] - 0.3).abs() < 1e-15);

        let pm = LossModel::squared_scalar(&[-1.0, 1.0]);
        let q = DVector::from_vec(vec![0.5, 0.5]);
        assert_eq!(pm.bayes_action(&q).unwrap().action[0], 0.0);
    }

    #[test]
    fn log_divergence_is_kl_to_normalized_action() {
        let mut rng = seeded_rng(21);
        let log = LossModel::log(4);
        for _ in 0..5 {
            let q = random_simplex(4, &mut rng);
            let a = DVector::from_fn(4, |_, _| rng.random_range(0.1..3.0));
            let r = &a / a.sum();
            let kl: f64 = (0..4).map(|y| q[y] * (q[y] / r[y]).ln()).sum();
            assert!((log.divergence(&q, &a).unwrap() - kl).abs() < 1e-13);
        }
    }

    #[test]
    fn squared_divergence_is_half_distance_to_mean() {
        let mut rng = seeded_rng(22);
        let y_values = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-2.0..2.0));
        let sq = LossModel::squared(y_values.clone());
        for _ in 0..5 {
            let q = random_simplex(3, &mut rng);
            let a = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let mean = y_values.transpose() * &q;
            // direct expectation oracle
            let direct: f64 = (0..3)
                .map(|y| q[y] * 0.5 * (y_values.row(y).transpose() - &a).norm_squared())
                .sum::<f64>()
                - (0..3)
                    .map(|y| q[y] * 0.5 * (y_values.row(y).transpose() - &mean).norm_squared())
                    .sum::<f64>();
            let d = sq.divergence(&q, &a).unwrap();
            assert!((d - 0.5 * (&a - mean).norm_squared()).abs() < 1e-13);
            assert!((d - direct).abs() < 1e-13);
        }
    }

    #[test]
    fn divergence_zero_at_bayes_action() {
        let q = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let log = LossModel::log(3);
        assert_eq!(log.divergence(&q, &q).unwrap(), 0.0);
        assert!(log.divergence(&q, &(&q * 3.0)).unwrap().abs() < 1e-15);
    }

    #[test]
    fn hessians() {
        let q = DVector::from_vec(vec![0.5, 0.5]);
        let m = LossModel::log(2).hessian_ml(&q).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((m - &expected).amax() < 1e-14);

        let sq = LossModel::squared(DMatrix::identity(4, 3));
        let q4 = DVector::from_element(4, 0.25);
        assert_eq!(sq.hessian_ml(&q4).unwrap(), DMatrix::identity(3, 3));

        // second differences of the expected loss, independent of the gradient code
        let log = LossModel::log(2);
        let h = 1e-4;
        let f = |a: &DVector<f64>| log.expected_loss(&q, a).unwrap();
        let mut fd = DMatrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut e_i = DVector::zeros(2);
                let mut e_j = DVector::zeros(2);
                e_i[i] = h;
                e_j[j] = h;
                fd[(i, j)] =
                    (f(&(&q + &e_i + &e_j)) - f(&(&q + &e_i - &e_j)) - f(&(&q - &e_i + &e_j))
                        + f(&(&q - &e_i - &e_j)))
                        / (4.0 * h * h);
            }
        }
        assert!((fd - expected).amax() < 1e-5);
    }

    #[test]
    fn log_hessian_annihilates_q() {
        let q = DVector::from_vec(vec![0.1, 0.6, 0.3]);
        let m = LossModel::log(3).hessian_ml(&q).unwrap();
        assert!((m * &q).amax() < 1e-10);
    }
}
