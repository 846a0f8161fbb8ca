//! Closed-form optima of the quadratic surrogate: least-squares weight and
//! feature updates, the truncated SVD of `B̃`, the alternating (power
//! iteration) solver and the direct rank-k solution.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{GeomError, Result};
use crate::geometry::{feature_table, GeometryBundle, MatrixJson};
use crate::linalg::{self, frobenius_sq, spd_solve};

/// Minimum spectral gap `σ_k − σ_{k+1}`, relative to `σ_1`, for [`alternate`].
pub const GAP_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAnalysis {
    /// r×k.
    pub xi_w_star: DMatrix<f64>,
    /// k×|X|.
    pub xi_f_star: DMatrix<f64>,
    /// k×n weight with `R_L J Wᵀ = Ξ_W*` (minimum-norm representative).
    pub w_star: DMatrix<f64>,
    pub d_star: DVector<f64>,
    pub mu_f_star: DVector<f64>,
    /// `σ_1 ≥ ... ≥ σ_K`, `K = min(n, |X|)`, zero-padded past the rank of `R_L`.
    pub singular_values: Vec<f64>,
    pub rank_k: usize,
    /// `Σ_{i>k} σ_i²`.
    pub ey_bound: f64,
    /// `‖B̃ − Ξ_W* Ξ_f*‖_F²`.
    pub achieved_frobenius: f64,
    pub iterations: usize,
    /// Frobenius error after each alternating iteration; empty for the direct route.
    pub frobenius_trace: Vec<f64>,
}

impl LayerAnalysis {
    pub fn product(&self) -> DMatrix<f64> {
        &self.xi_w_star * &self.xi_f_star
    }

    /// Optimal feature table `f*(x) = μ_f* + ξ_f*(x)/√P_X(x)`.
    pub fn feature_table(&self, p_x: &DVector<f64>) -> DMatrix<f64> {
        feature_table(p_x, &self.xi_f_star, &self.mu_f_star)
    }

    pub fn to_json(&self) -> LayerAnalysisJson {
        LayerAnalysisJson {
            rank_k: self.rank_k,
            singular_values: self.singular_values.clone(),
            ey_bound: self.ey_bound,
            achieved_frobenius: self.achieved_frobenius,
            iterations: self.iterations,
            xi_w_star: MatrixJson::from(&self.xi_w_star),
            xi_f_star: MatrixJson::from(&self.xi_f_star),
            w_star: MatrixJson::from(&self.w_star),
            d_star: self.d_star.iter().copied().collect(),
            mu_f_star: self.mu_f_star.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAnalysisJson {
    pub rank_k: usize,
    pub singular_values: Vec<f64>,
    pub ey_bound: f64,
    pub achieved_frobenius: f64,
    pub iterations: usize,
    pub xi_w_star: MatrixJson,
    pub xi_f_star: MatrixJson,
    pub w_star: MatrixJson,
    pub d_star: Vec<f64>,
    pub mu_f_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub xi_w: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub d: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSolution {
    pub xi_f: DMatrix<f64>,
    pub mu_f: DVector<f64>,
}

/// Best weights for fixed features: `Ξ_W* = B̃ Ξ_fᵀ (Ξ_f Ξ_fᵀ)⁻¹` and
/// `d* = −W*ᵀ μ_f + J⁻¹(μ_a − a_{P_Y})`.
pub fn optimal_weight(
    bundle: &GeometryBundle,
    xi_f: &DMatrix<f64>,
    mu_f: &DVector<f64>,
) -> Result<WeightSolution> {
    if xi_f.ncols() != bundle.nx() || mu_f.len() != xi_f.nrows() {
        return Err(GeomError::DimensionMismatch(format!(
            "Ξ_f {:?} with μ_f of length {}",
            xi_f.shape(),
            mu_f.len()
        )));
    }
    let gram = xi_f * xi_f.transpose();
    let xi_w = spd_solve(&gram, &(xi_f * bundle.b_tilde_mat.transpose()))?.transpose();
    let w = bundle.weight_from_xi(&xi_w);
    let d = bias_for_mean(bundle, &w, mu_f);
    Ok(WeightSolution { xi_w, w, d })
}

/// `d` with `J(d + Wᵀμ_f) = μ_a − a_{P_Y}`.
fn bias_for_mean(bundle: &GeometryBundle, w: &DMatrix<f64>, mu_f: &DVector<f64>) -> DVector<f64> {
    let shift = (&bundle.mu_a - &bundle.a_py).component_div(&bundle.j_mat.diagonal());
    shift - w.tr_mul(mu_f)
}

/// Best features for fixed weights: `Ξ_f* = (Ξ_WᵀΞ_W)⁻¹ Ξ_Wᵀ B̃` and
/// `μ_f* = −(Ξ_WᵀΞ_W)⁻¹ Ξ_Wᵀ R_L (a_{P_Y} − μ_a + J d)`.
pub fn optimal_feature(
    bundle: &GeometryBundle,
    xi_w: &DMatrix<f64>,
    d: &DVector<f64>,
) -> Result<FeatureSolution> {
    if xi_w.nrows() != bundle.whitened_dim() || d.len() != bundle.action_dim() {
        return Err(GeomError::DimensionMismatch(format!(
            "Ξ_W {:?} against whitened dimension {}",
            xi_w.shape(),
            bundle.whitened_dim()
        )));
    }
    let gram = xi_w.transpose() * xi_w;
    let xi_f = spd_solve(&gram, &(xi_w.transpose() * &bundle.b_tilde_mat))?;
    let offset =
        DMatrix::from_column_slice(bundle.whitened_dim(), 1, bundle.eta_offset(d).as_slice());
    let mu_f = -spd_solve(&gram, &(xi_w.transpose() * offset))?
        .column(0)
        .into_owned();
    Ok(FeatureSolution { xi_f, mu_f })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// rows×k left singular vectors.
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    /// cols×k right singular vectors.
    pub v: DMatrix<f64>,
    /// Every singular value of the thin decomposition, descending.
    pub all_singular_values: Vec<f64>,
}

impl TruncatedSvd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.sigma) * self.v.transpose()
    }
}

/// Leading `k` singular triplets, descending, each right vector signed so
/// its first non-negligible entry is positive.
pub fn truncated_svd(m: &DMatrix<f64>, k: usize) -> Result<TruncatedSvd> {
    let kmax = m.nrows().min(m.ncols());
    if k > kmax {
        return Err(GeomError::RankTooLarge { k, max: kmax });
    }
    let svd = m.clone().svd(true, true);
    let u_full = svd.u.expect("requested u");
    let v_t = svd.v_t.expect("requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let all_singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let mut u = DMatrix::zeros(m.nrows(), k);
    let mut v = DMatrix::zeros(m.ncols(), k);
    let mut sigma = DVector::zeros(k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut vc = v_t.row(i).transpose();
        let sign = linalg::canonical_sign(&mut vc);
        v.set_column(c, &vc);
        u.set_column(c, &(u_full.column(i) * sign));
        sigma[c] = svd.singular_values[i];
    }
    Ok(TruncatedSvd {
        u,
        sigma,
        v,
        all_singular_values,
    })
}

/// Singular values of `B̃` padded with zeros to `K = min(n, |X|)`.
pub fn spectrum(bundle: &GeometryBundle) -> Vec<f64> {
    let big_k = bundle.action_dim().min(bundle.nx());
    let mut s = if bundle.whitened_dim() == 0 {
        Vec::new()
    } else {
        bundle
            .b_tilde_mat
            .singular_values()
            .iter()
            .copied()
            .collect::<Vec<_>>()
    };
    s.sort_by(|a, b| b.total_cmp(a));
    s.resize(big_k.max(s.len()), 0.0);
    s.truncate(big_k);
    s
}

fn tail_energy(singular_values: &[f64], k: usize) -> f64 {
    singular_values.iter().skip(k).map(|s| s * s).sum()
}

fn check_rank(bundle: &GeometryBundle, k: usize) -> Result<()> {
    let max = bundle.action_dim().min(bundle.nx());
    if k == 0 || k > max {
        return Err(GeomError::RankTooLarge { k, max });
    }
    Ok(())
}

/// Direct rank-k optimum: `Ξ_W* Ξ_f* = U_k Σ_k V_kᵀ` with the balanced
/// factorization `Ξ_W* = U_k Σ_k^{1/2}`, `Ξ_f* = Σ_k^{1/2} V_kᵀ`, `μ_f* = 0`
/// and `d* = J⁻¹(μ_a − a_{P_Y})`.
pub fn solve_layer(bundle: &GeometryBundle, k: usize) -> Result<LayerAnalysis> {
    check_rank(bundle, k)?;
    let r = bundle.whitened_dim();
    let nx = bundle.nx();
    let singular_values = spectrum(bundle);
    let k_eff = k.min(r.min(nx));

    let mut xi_w = DMatrix::zeros(r, k);
    let mut xi_f = DMatrix::zeros(k, nx);
    if k_eff > 0 {
        let svd = truncated_svd(&bundle.b_tilde_mat, k_eff)?;
        for c in 0..k_eff {
            let root = svd.sigma[c].sqrt();
            xi_w.set_column(c, &(svd.u.column(c) * root));
            xi_f.set_row(c, &(svd.v.column(c).transpose() * root));
        }
    }
    let w_star = bundle.weight_from_xi(&xi_w);
    let mu_f_star = DVector::zeros(k);
    let d_star = bias_for_mean(bundle, &w_star, &mu_f_star);
    let achieved_frobenius = frobenius_sq(&(&bundle.b_tilde_mat - &xi_w * &xi_f));
    Ok(LayerAnalysis {
        xi_w_star: xi_w,
        xi_f_star: xi_f,
        w_star,
        d_star,
        mu_f_star,
        ey_bound: tail_energy(&singular_values, k),
        singular_values,
        rank_k: k,
        achieved_frobenius,
        iterations: 0,
        frobenius_trace: Vec::new(),
    })
}

/// Alternates the weight and feature least-squares updates from `init_xi_f`
/// until the product moves by at most `tol` in Frobenius norm.
///
/// The feature rows are re-orthonormalized before every weight update; the
/// product is unaffected. A fixed point whose error exceeds the rank-k
/// floor is reported as non-convergence.
pub fn alternate(
    bundle: &GeometryBundle,
    k: usize,
    init_xi_f: &DMatrix<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<LayerAnalysis> {
    check_rank(bundle, k)?;
    if init_xi_f.shape() != (k, bundle.nx()) {
        return Err(GeomError::DimensionMismatch(format!(
            "initial features {:?}, expected ({k}, {})",
            init_xi_f.shape(),
            bundle.nx()
        )));
    }
    let singular_values = spectrum(bundle);
    let ey_bound = tail_energy(&singular_values, k);
    let sigma1 = singular_values.first().copied().unwrap_or(0.0);
    if sigma1 == 0.0 {
        let mut trivial = solve_layer(bundle, k)?;
        trivial.frobenius_trace = vec![0.0];
        return Ok(trivial);
    }
    let sk = singular_values[k - 1];
    let sk1 = singular_values.get(k).copied().unwrap_or(0.0);
    let required = GAP_FRACTION * sigma1;
    if sk - sk1 < required {
        return Err(GeomError::NoGap {
            k,
            gap: sk - sk1,
            required,
        });
    }

    let top = truncated_svd(&bundle.b_tilde_mat, k)?;
    let overlap = init_xi_f * &top.v;
    let overlap_min = overlap.singular_values().min();
    if overlap_min <= 1e-10 * init_xi_f.norm().max(f64::MIN_POSITIVE) {
        return Err(GeomError::NonConvergence {
            context: "alternating solve: initial features orthogonal to the leading right singular subspace".into(),
            iterations: 0,
            residual: overlap_min,
        });
    }

    let zero_mean = DVector::zeros(k);
    let mut xi_f = orthonormal_rows(init_xi_f);
    let mut previous: Option<DMatrix<f64>> = None;
    let mut trace = Vec::new();
    for iter in 1..=max_iter {
        let ws = optimal_weight(bundle, &xi_f, &zero_mean)?;
        let fs = optimal_feature(bundle, &ws.xi_w, &ws.d)?;
        let product = &ws.xi_w * &fs.xi_f;
        trace.push(frobenius_sq(&(&bundle.b_tilde_mat - &product)));
        let change = previous.as_ref().map(|p| (p - &product).norm());
        previous = Some(product);
        if change.is_some_and(|c| c <= tol) {
            let achieved_frobenius = *trace.last().expect("trace is non-empty");
            let slack = 1e-8 * (1.0 + frobenius_sq(&bundle.b_tilde_mat));
            if achieved_frobenius > ey_bound + slack {
                return Err(GeomError::NonConvergence {
                    context: "alternating solve stalled above the rank-k floor".into(),
                    iterations: iter,
                    residual: achieved_frobenius - ey_bound,
                });
            }
            let w_star = bundle.weight_from_xi(&ws.xi_w);
            return Ok(LayerAnalysis {
                xi_w_star: ws.xi_w,
                xi_f_star: fs.xi_f,
                w_star,
                d_star: ws.d,
                mu_f_star: fs.mu_f,
                singular_values,
                rank_k: k,
                ey_bound,
                achieved_frobenius,
                iterations: iter,
                frobenius_trace: trace,
            });
        }
        xi_f = orthonormal_rows(&fs.xi_f);
    }
    Err(GeomError::NonConvergence {
        context: "alternating solve".into(),
        iterations: max_iter,
        residual: trace.last().copied().unwrap_or(f64::NAN) - ey_bound,
    })
}

fn orthonormal_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.transpose().qr().q().transpose()
}
