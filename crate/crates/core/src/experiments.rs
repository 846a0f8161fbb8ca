//! Reusable experiment drivers: ε-sweeps of the surrogate residual, the
//! Bayes-action spread, free-feature training in the local regime, and
//! trained-network comparison against the rank-k floor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::dist::{
    chi2_mutual_information, perturb, random_direction, random_marginal, JointDistribution,
    PerturbationDirection,
};
use crate::error::Result;
use crate::geometry::{
    build_bundle, conditional_bayes, feature_matrix, local_regime_deviation, surrogate_objective,
    true_objective_with, GeometryBundle, SurrogateTerms,
};
use crate::linalg;
use crate::losses::LossModel;
use crate::lowrank::{spectrum, truncated_svd};
use crate::netlab::{
    empirical_risk, risk_lower_bound, train, DenseLayer, NetworkParams, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Log,
    Squared,
}

/// Marginals, a normalized dependence direction, a loss and an output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub p_x: DVector<f64>,
    pub p_y: DVector<f64>,
    pub direction: PerturbationDirection,
    pub model: LossModel,
    pub activation: Activation,
}

impl Problem {
    /// Random marginals and direction. Log loss uses a softplus output;
    /// squared loss embeds labels in `[−1, 1]^n` and uses tanh.
    pub fn random(
        nx: usize,
        ny: usize,
        kind: LossKind,
        n_squared: usize,
        seed: u64,
    ) -> Result<Self> {
        let p_x = random_marginal(nx, seed);
        let p_y = random_marginal(ny, seed.wrapping_add(1));
        let direction = random_direction(&p_x, &p_y, seed.wrapping_add(2))?;
        let (model, activation) = match kind {
            LossKind::Log => (LossModel::log(ny), Activation::Softplus),
            LossKind::Squared => {
                let mut rng = crate::seeded_rng(seed.wrapping_add(3));
                let y_values = DMatrix::from_fn(ny, n_squared, |_, _| rng.random_range(-1.0..1.0));
                (LossModel::squared(y_values), Activation::Tanh)
            }
        };
        Ok(Self {
            p_x,
            p_y,
            direction,
            model,
            activation,
        })
    }

    pub fn joint(&self, eps: f64) -> Result<JointDistribution> {
        perturb(&self.p_x, &self.p_y, &self.direction, eps)
    }

    pub fn nx(&self) -> usize {
        self.p_x.len()
    }

    pub fn action_dim(&self) -> usize {
        self.model.action_dim()
    }
}

/// Fixed feature table and unit-scale weight/bias directions; at level ε
/// the analysis point is `W = ε W₀`, `b = b̃ + ε d₀`, which keeps every
/// pre-activation within `O(ε)` of `b̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisPoint {
    pub f: DMatrix<f64>,
    pub w0: DMatrix<f64>,
    pub d0: DVector<f64>,
}

impl AnalysisPoint {
    pub fn random(k: usize, nx: usize, n: usize, seed: u64) -> Self {
        let mut rng = crate::seeded_rng(seed);
        Self {
            f: DMatrix::from_fn(k, nx, |_, _| rng.random_range(-1.0..1.0)),
            w0: DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0)),
            d0: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    pub fn at(&self, bundle: &GeometryBundle, eps: f64) -> (DMatrix<f64>, DVector<f64>) {
        (&self.w0 * eps, &bundle.b_tilde_vec + &self.d0 * eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub eps: f64,
    pub chi2: f64,
    pub true_objective: f64,
    pub surrogate: SurrogateTerms,
    /// `|true objective − surrogate|`.
    pub residual: f64,
    pub ey_bound: f64,
    pub local_deviation: f64,
    /// `max_x ‖a_{P_{Y|X=x}} − a_{P_Y}‖`.
    pub bayes_spread: f64,
    pub singular_values: Vec<f64>,
}

/// Surrogate residual and related quantities at one ε level.
pub fn residual_row(
    problem: &Problem,
    point: &AnalysisPoint,
    eps: f64,
    k: usize,
) -> Result<ResidualRow> {
    let j = problem.joint(eps)?;
    let bundle = build_bundle(&j, &problem.model, problem.activation, &point.f)?;
    let (w, b) = point.at(&bundle, eps);
    let conds = conditional_bayes(&j, &problem.model)?;
    let true_objective = true_objective_with(
        &j,
        &problem.model,
        &conds,
        problem.activation,
        &point.f,
        &w,
        &b,
    )?;
    let surrogate = surrogate_objective(&bundle, &w, &b, &point.f);
    let singular_values = spectrum(&bundle);
    let ey_bound = singular_values.iter().skip(k).map(|s| s * s).sum();
    Ok(ResidualRow {
        eps,
        chi2: chi2_mutual_information(&j),
        true_objective,
        residual: (true_objective - surrogate.total).abs(),
        surrogate,
        ey_bound,
        local_deviation: local_regime_deviation(&bundle, &w, &b, &point.f),
        bayes_spread: bayes_spread(&bundle),
        singular_values,
    })
}

/// `max_x ‖a_{P_{Y|X=x}} − a_{P_Y}‖`.
pub fn bayes_spread(bundle: &GeometryBundle) -> f64 {
    (0..bundle.nx())
        .map(|x| (bundle.cond_actions.column(x) - &bundle.a_py).norm())
        .fold(0.0, f64::max)
}

/// Least-squares slope of `log y` against `log x`; `None` with fewer than
/// two usable points.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// `values[i+1] / values[i]`.
pub fn consecutive_ratios(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] / w[0]).collect()
}

/// Free-feature model: a tabular feature layer (identity activation on a
/// one-hot input) followed by the output layer, started at `b = b̃` with
/// weights and features of size `√ε`.
pub fn free_feature_net(
    bundle: &GeometryBundle,
    k: usize,
    eps: f64,
    seed: u64,
) -> Result<NetworkParams> {
    let mut rng = crate::seeded_rng(seed);
    let s = eps.sqrt();
    let nx = bundle.nx();
    let n = bundle.action_dim();
    let hidden = DenseLayer::new(
        DMatrix::from_fn(nx, k, |_, _| s * rng.random_range(-1.0..1.0)),
        DVector::zeros(k),
        Activation::Identity,
    )?;
    let output = DenseLayer::new(
        DMatrix::from_fn(k, n, |_, _| s * rng.random_range(-1.0..1.0)),
        bundle.b_tilde_vec.clone(),
        bundle.activation,
    )?;
    NetworkParams::new(vec![hidden], output)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalRegimeRow {
    pub eps: f64,
    /// `max_{i,x} |w_iᵀ f(x) + b_i − b̃_i|` at the trained point.
    pub deviation: f64,
    pub excess_risk: f64,
    pub ey_half: f64,
    pub final_gradient_norm: f64,
    pub steps: usize,
}

/// Trains the free-feature model at level ε and measures how far its
/// pre-activations sit from `b̃`.
pub fn local_regime_row(
    problem: &Problem,
    eps: f64,
    k: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LocalRegimeRow> {
    let j = problem.joint(eps)?;
    let placeholder = DMatrix::zeros(k, problem.nx());
    let bundle = build_bundle(&j, &problem.model, problem.activation, &placeholder)?;
    let net = free_feature_net(&bundle, k, eps, seed)?;
    let outcome = train(&net, &j, &problem.model, cfg)?;
    let f = outcome.net.feature_table(1);
    let deviation =
        local_regime_deviation(&bundle, &outcome.net.output.w, &outcome.net.output.b, &f);
    let excess_risk =
        empirical_risk(&outcome.net, &j, &problem.model)? - risk_lower_bound(&j, &problem.model)?;
    let ey_half = 0.5 * spectrum(&bundle).iter().skip(k).map(|s| s * s).sum::<f64>();
    Ok(LocalRegimeRow {
        eps,
        deviation,
        excess_risk,
        ey_half,
        final_gradient_norm: outcome.final_gradient_norm,
        steps: outcome.risk_trace.len() - 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainComparison {
    pub eps: f64,
    pub rank_k: usize,
    pub initial_excess_risk: f64,
    pub trained_excess_risk: f64,
    /// `½ Σ_{i>k} σ_i²`.
    pub ey_half: f64,
    /// `trained_excess_risk / ey_half`; absent when the floor is zero.
    pub ratio: Option<f64>,
    /// Largest `|risk − (lower bound + true objective)|` over all checkpoints.
    pub max_decomposition_error: f64,
    /// Principal angles (degrees) between trained `Ξ_f` and `V_kᵀ`.
    pub principal_angles_deg: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub risk_trace: Vec<f64>,
    pub final_gradient_norm: f64,
}

/// Trains `net` on `j` in chunks of `checkpoint_every` steps, checking the
/// risk decomposition at every checkpoint, then compares the excess risk
/// with the rank-k floor of the last hidden layer's width.
pub fn train_compare(
    j: &JointDistribution,
    model: &LossModel,
    net: &NetworkParams,
    cfg: &TrainConfig,
    checkpoint_every: usize,
    eps: f64,
) -> Result<TrainComparison> {
    let m = net.hidden.len();
    let k = net.output.in_dim();
    let conds = conditional_bayes(j, model)?;
    let lower = risk_lower_bound(j, model)?;
    let act = net.output.act;

    let decomposition_error = |n: &NetworkParams| -> Result<(f64, f64)> {
        let risk = empirical_risk(n, j, model)?;
        let objective = true_objective_with(
            j,
            model,
            &conds,
            act,
            &n.feature_table(m),
            &n.output.w,
            &n.output.b,
        )?;
        Ok(((risk - (lower + objective)).abs(), risk - lower))
    };

    let (mut max_err, initial_excess_risk) = decomposition_error(net)?;
    let mut current = net.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut remaining = cfg.steps;
    let mut final_gradient_norm;
    let chunk = checkpoint_every.max(1);
    loop {
        let steps = remaining.min(chunk);
        let outcome = train(&current, j, model, &TrainConfig { steps, ..*cfg })?;
        let done = outcome.risk_trace.len() - 1;
        if trace.is_empty() {
            trace.extend_from_slice(&outcome.risk_trace);
        } else {
            trace.extend_from_slice(&outcome.risk_trace[1..]);
        }
        current = outcome.net;
        final_gradient_norm = outcome.final_gradient_norm;
        max_err = max_err.max(decomposition_error(&current)?.0);
        remaining -= steps;
        if remaining == 0 || done < steps {
            break;
        }
    }
    let trained_excess_risk = decomposition_error(&current)?.1;

    let f = current.feature_table(m);
    let bundle = build_bundle(j, model, act, &f)?;
    let singular_values = spectrum(&bundle);
    let ey_half = 0.5 * singular_values.iter().skip(k).map(|s| s * s).sum::<f64>();
    let (xi_f, _) = feature_matrix(j.p_x(), &f);
    let k_svd = k.min(bundle.whitened_dim()).min(bundle.nx());
    let principal_angles_deg = if k_svd > 0 && singular_values[0] > 0.0 {
        let top = truncated_svd(&bundle.b_tilde_mat, k_svd)?;
        linalg::principal_angles(&xi_f, &top.v.transpose())
            .into_iter()
            .map(f64::to_degrees)
            .collect()
    } else {
        Vec::new()
    };
    Ok(TrainComparison {
        eps,
        rank_k: k,
        initial_excess_risk,
        trained_excess_risk,
        ey_half,
        ratio: (ey_half > 0.0).then(|| trained_excess_risk / ey_half),
        max_decomposition_error: max_err,
        principal_angles_deg,
        singular_values,
        risk_trace: trace,
        final_gradient_norm,
    })
}

/// One-hidden-layer network for train-compare: tabular tanh features of
/// width `k` and an output layer started at `b = b̃` with weights of size
/// `scale`.
pub fn warm_start_net(
    bundle: &GeometryBundle,
    k: usize,
    hidden: Activation,
    scale: f64,
    seed: u64,
) -> Result<NetworkParams> {
    NetworkParams::warm_start(
        &[bundle.nx(), k, bundle.action_dim()],
        &[hidden],
        bundle.activation,
        &bundle.b_tilde_vec,
        scale,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [0.2, 0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(3)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 3.0).abs() < 1e-12);
        assert!(loglog_slope(&[0.1], &[1.0]).is_none());
    }

    #[test]
    fn residual_is_small_at_small_eps() {
        let problem = Problem::random(4, 3, LossKind::Log, 0, 21).unwrap();
        let point = AnalysisPoint::random(2, 4, 3, 5);
        let row = residual_row(&problem, &point, 0.05, 2).unwrap();
        assert!(row.residual < 0.1 * row.true_objective.abs().max(1e-12));
        assert!((row.chi2 - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn independent_problem_has_no_excess_risk() {
        let problem = Problem::random(4, 3, LossKind::Log, 0, 2).unwrap();
        let j = problem.joint(0.0).unwrap();
        let bundle = build_bundle(
            &j,
            &problem.model,
            problem.activation,
            &DMatrix::zeros(1, 4),
        )
        .unwrap();
        let net = warm_start_net(&bundle, 1, Activation::Tanh, 0.0, 3).unwrap();
        let cmp = train_compare(
            &j,
            &problem.model,
            &net,
            &TrainConfig {
                lr: 1.0,
                steps: 10,
                grad_tol: 0.0,
            },
            5,
            0.0,
        )
        .unwrap();
        assert!(cmp.trained_excess_risk.abs() < 1e-10);
        assert!(cmp.ey_half < 1e-20);
    }
}
