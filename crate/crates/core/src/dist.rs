//! Finite joint distributions and the ε-dependent family used by every sweep.
//!
//! The ε-dependent joints are built multiplicatively,
//! `P_XY(x, y) = P_X(x) P_Y(y) (1 + ε φ(x, y))`, with `φ` double-centered under
//! the marginals and normalized so that `Σ P_X P_Y φ² = 1`. The marginals are
//! preserved and the χ²-mutual information equals `ε²` exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GeomError, Result};
use crate::linalg;

/// Smallest marginal probability accepted at construction.
pub const MARGINAL_FLOOR: f64 = 1e-6;

const SUM_TOLERANCE: f64 = 1e-12;

/// A finite joint distribution `P_{X,Y}` with cached marginals and conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    p_xy: DMatrix<f64>,
    p_x: DVector<f64>,
    p_y: DVector<f64>,
    cond: DMatrix<f64>,
    labels_x: Vec<String>,
    labels_y: Vec<String>,
}

impl JointDistribution {
    pub fn new(p_xy: DMatrix<f64>) -> Result<Self> {
        let labels_x = (0..p_xy.nrows()).map(|i| i.to_string()).collect();
        let labels_y = (0..p_xy.ncols()).map(|i| i.to_string()).collect();
        Self::with_labels(p_xy, labels_x, labels_y)
    }

    pub fn with_labels(
        p_xy: DMatrix<f64>,
        labels_x: Vec<String>,
        labels_y: Vec<String>,
    ) -> Result<Self> {
        let (nx, ny) = p_xy.shape();
        if nx == 0 || ny == 0 {
            return Err(GeomError::InvalidDistribution("empty support".into()));
        }
        if labels_x.len() != nx || labels_y.len() != ny {
            return Err(GeomError::InvalidDistribution(format!(
                "label counts ({}, {}) do not match table shape ({nx}, {ny})",
                labels_x.len(),
                labels_y.len()
            )));
        }
        if let Some(bad) = p_xy.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(GeomError::InvalidDistribution(format!(
                "entry {bad} is not a probability"
            )));
        }
        let total: f64 = p_xy.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(GeomError::InvalidDistribution(format!(
                "entries sum to {total}, not 1"
            )));
        }
        let p_x = DVector::from_fn(nx, |i, _| p_xy.row(i).sum());
        let p_y = DVector::from_fn(ny, |j, _| p_xy.column(j).sum());
        if let Some(m) = p_x.iter().chain(p_y.iter()).find(|m| **m < MARGINAL_FLOOR) {
            return Err(GeomError::InvalidDistribution(format!(
                "marginal probability {m} below floor {MARGINAL_FLOOR}"
            )));
        }
        let cond = DMatrix::from_fn(nx, ny, |i, j| p_xy[(i, j)] / p_x[i]);
        Ok(Self {
            p_xy,
            p_x,
            p_y,
            cond,
            labels_x,
            labels_y,
        })
    }

    /// The product distribution `P_X ⊗ P_Y`.
    pub fn product(p_x: &DVector<f64>, p_y: &DVector<f64>) -> Result<Self> {
        check_marginal(p_x, "P_X")?;
        check_marginal(p_y, "P_Y")?;
        Self::new(p_x * p_y.transpose())
    }

    pub fn nx(&self) -> usize {
        self.p_xy.nrows()
    }

    pub fn ny(&self) -> usize {
        self.p_xy.ncols()
    }

    pub fn p_xy(&self) -> &DMatrix<f64> {
        &self.p_xy
    }

    pub fn p_x(&self) -> &DVector<f64> {
        &self.p_x
    }

    pub fn p_y(&self) -> &DVector<f64> {
        &self.p_y
    }

    /// `P_{Y|X=x}` as a column vector.
    pub fn conditional(&self, x: usize) -> DVector<f64> {
        self.cond.row(x).transpose()
    }

    /// Conditionals as an |X|×|Y| matrix, one row per x.
    pub fn conditionals(&self) -> &DMatrix<f64> {
        &self.cond
    }

    pub fn labels_x(&self) -> &[String] {
        &self.labels_x
    }

    pub fn labels_y(&self) -> &[String] {
        &self.labels_y
    }

    /// `√p_X` as a unit vector.
    pub fn sqrt_px(&self) -> DVector<f64> {
        self.p_x.map(f64::sqrt)
    }

    pub fn to_json(&self) -> DistributionJson {
        DistributionJson {
            p_xy: linalg::to_rows(&self.p_xy),
            labels_x: self.labels_x.clone(),
            labels_y: self.labels_y.clone(),
        }
    }

    pub fn from_json(json: &DistributionJson) -> Result<Self> {
        let p_xy = linalg::from_rows(&json.p_xy)?;
        Self::with_labels(p_xy, json.labels_x.clone(), json.labels_y.clone())
    }
}

/// On-disk form of a joint distribution: row-major `p_xy` plus labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionJson {
    pub p_xy: Vec<Vec<f64>>,
    pub labels_x: Vec<String>,
    pub labels_y: Vec<String>,
}

fn check_marginal(p: &DVector<f64>, name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(GeomError::InvalidDistribution(format!("{name} is empty")));
    }
    if let Some(m) = p.iter().find(|m| !m.is_finite() || **m < MARGINAL_FLOOR) {
        return Err(GeomError::InvalidDistribution(format!(
            "{name} entry {m} below floor {MARGINAL_FLOOR}"
        )));
    }
    let total = p.sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(GeomError::InvalidDistribution(format!(
            "{name} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// χ²-mutual information `Σ (P_XY − P_X P_Y)² / (P_X P_Y)`.
pub fn chi2_mutual_information(j: &JointDistribution) -> f64 {
    let mut acc = 0.0;
    for x in 0..j.nx() {
        for y in 0..j.ny() {
            let prod = j.p_x[x] * j.p_y[y];
            let diff = j.p_xy[(x, y)] - prod;
            acc += diff * diff / prod;
        }
    }
    acc
}

/// A double-centered, unit-normalized direction `φ` for the ε-dependent family.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDirection {
    phi: DMatrix<f64>,
    normalization: f64,
}

impl PerturbationDirection {
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `Σ P_X P_Y φ²`; equals 1 for directions built by [`make_direction`].
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn max_abs(&self) -> f64 {
        self.phi.amax()
    }

    /// Largest ε for which `perturb` keeps every entry strictly positive.
    pub fn eps_limit(&self) -> f64 {
        let most_negative = self.phi.min();
        if most_negative >= 0.0 {
            f64::INFINITY
        } else {
            -1.0 / most_negative
        }
    }
}

/// Double-centers `raw` under the weights `(P_X, P_Y)` and rescales it so that
/// `Σ P_X P_Y φ² = 1`.
pub fn make_direction(
    p_x: &DVector<f64>,
    p_y: &DVector<f64>,
    raw: &DMatrix<f64>,
) -> Result<PerturbationDirection> {
    check_marginal(p_x, "P_X")?;
    check_marginal(p_y, "P_Y")?;
    if raw.shape() != (p_x.len(), p_y.len()) {
        return Err(GeomError::DimensionMismatch(format!(
            "direction is {:?}, marginals imply ({}, {})",
            raw.shape(),
            p_x.len(),
            p_y.len()
        )));
    }
    let (nx, ny) = raw.shape();
    let row_mean = DVector::from_fn(nx, |x, _| {
        (0..ny).map(|y| p_y[y] * raw[(x, y)]).sum::<f64>()
    });
    let col_mean = DVector::from_fn(ny, |y, _| {
        (0..nx).map(|x| p_x[x] * raw[(x, y)]).sum::<f64>()
    });
    let grand: f64 = (0..nx).map(|x| p_x[x] * row_mean[x]).sum();
    let mut phi = DMatrix::from_fn(nx, ny, |x, y| {
        raw[(x, y)] - row_mean[x] - col_mean[y] + grand
    });

    let norm = weighted_norm_sq(p_x, p_y, &phi);
    let scale = raw.amax().max(1.0);
    if !(norm.sqrt() > 1e-12 * scale) {
        return Err(GeomError::DegenerateDirection);
    }
    phi /= norm.sqrt();
    let normalization = weighted_norm_sq(p_x, p_y, &phi);
    Ok(PerturbationDirection { phi, normalization })
}

/// Random direction: uniform entries in [−1, 1] from the seeded generator,
/// then centered and normalized.
pub fn random_direction(
    p_x: &DVector<f64>,
    p_y: &DVector<f64>,
    seed: u64,
) -> Result<PerturbationDirection> {
    let mut rng = crate::seeded_rng(seed);
    let raw = DMatrix::from_fn(p_x.len(), p_y.len(), |_, _| rng.random_range(-1.0..=1.0));
    make_direction(p_x, p_y, &raw)
}

fn weighted_norm_sq(p_x: &DVector<f64>, p_y: &DVector<f64>, phi: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for x in 0..phi.nrows() {
        for y in 0..phi.ncols() {
            acc += p_x[x] * p_y[y] * phi[(x, y)] * phi[(x, y)];
        }
    }
    acc
}

/// `P_XY = P_X P_Y (1 + ε φ)`.
pub fn perturb(
    p_x: &DVector<f64>,
    p_y: &DVector<f64>,
    dir: &PerturbationDirection,
    eps: f64,
) -> Result<JointDistribution> {
    if dir.phi.shape() != (p_x.len(), p_y.len()) {
        return Err(GeomError::DimensionMismatch(
            "direction shape does not match marginals".into(),
        ));
    }
    let limit = dir.eps_limit();
    if !(eps >= 0.0) || !eps.is_finite() || eps >= limit {
        return Err(GeomError::EpsilonTooLarge { eps, limit });
    }
    let p_xy = DMatrix::from_fn(p_x.len(), p_y.len(), |x, y| {
        p_x[x] * p_y[y] * (1.0 + eps * dir.phi[(x, y)])
    });
    JointDistribution::new(p_xy)
}

/// Uniform marginal of size `n`.
pub fn uniform(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// Random strictly positive marginal with entries bounded away from zero.
pub fn random_marginal(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = crate::seeded_rng(seed);
    let raw = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    let total = raw.sum();
    raw / total
}
