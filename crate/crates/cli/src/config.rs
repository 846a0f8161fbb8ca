use std::path::Path;

use geomlens::activations::Activation;
use geomlens::dist::{make_direction, random_direction, random_marginal};
use geomlens::experiments::Problem;
use geomlens::losses::LossModel;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "GEOMLENS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    /// Output layer first, then hidden layers from the top down.
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub train: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Used when `p_x` is absent.
    #[serde(default)]
    pub nx: Option<usize>,
    #[serde(default)]
    pub ny: Option<usize>,
    #[serde(default)]
    pub p_x: Option<Vec<f64>>,
    #[serde(default)]
    pub p_y: Option<Vec<f64>>,
    #[serde(default)]
    pub direction: DirectionConfig,
    pub loss: LossName,
    /// One row per label; required for `l2`.
    #[serde(default)]
    pub y_values: Option<Vec<Vec<f64>>>,
    /// Output activation; softplus for `log` and tanh for `l2` when absent.
    #[serde(default)]
    pub activation: Option<Activation>,
    #[serde(default)]
    pub hidden_activations: Vec<Activation>,
    /// Hidden widths, input side first.
    #[serde(default)]
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossName {
    #[serde(rename = "log")]
    Log,
    #[serde(rename = "l2")]
    L2,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub phi: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub residual_slope_min: f64,
    pub spread_ratio_min: f64,
    pub spread_ratio_max: f64,
    pub train_ratio_min: f64,
    pub train_ratio_max: f64,
    pub decomposition: f64,
    /// Band for the free-feature deviation ratios; gated for `l2` only.
    pub local_ratio_min: f64,
    pub local_ratio_max: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual_slope_min: 2.5,
            spread_ratio_min: 0.4,
            spread_ratio_max: 0.6,
            train_ratio_min: 0.5,
            train_ratio_max: 2.0,
            decomposition: 1e-12,
            local_ratio_min: 0.35,
            local_ratio_max: 0.65,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Warm,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub init: InitKind,
    /// Output-weight scale of the warm start; ε when absent.
    pub init_scale: Option<f64>,
    /// Also train the free-feature model at every sweep level.
    pub in_sweep: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 50.0,
            steps: 20_000,
            checkpoint_every: 500,
            init: InitKind::Warm,
            init_scale: None,
            in_sweep: false,
        }
    }
}

fn default_eps() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}

fn default_ranks() -> Vec<usize> {
    vec![1]
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub eps: Option<f64>,
    pub seed: Option<u64>,
    pub rank: Option<usize>,
}

impl ExperimentConfig {
    /// Reads the file, applies `GEOMLENS_SEED`, then the flags, then validates.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?;
        if let Ok(value) = std::env::var(SEED_ENV) {
            cfg.seed = value
                .trim()
                .parse()
                .map_err(|e| CliError::Config(format!("{SEED_ENV}={value}: {e}")))?;
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: Overrides) {
        if let Some(eps) = overrides.eps {
            self.eps = vec![eps];
        }
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(rank) = overrides.rank {
            if self.ranks.is_empty() {
                self.ranks.push(rank);
            } else {
                self.ranks[0] = rank;
            }
        }
    }

    pub fn output_activation(&self) -> Activation {
        self.problem.activation.unwrap_or(match self.problem.loss {
            LossName::Log => Activation::Softplus,
            LossName::L2 => Activation::Tanh,
        })
    }

    /// Checks every precondition that can be decided before any solve.
    pub fn validate(&self) -> Result<(), CliError> {
        let problem = self.build_problem()?;
        if self.eps.is_empty() {
            return Err(CliError::Config("eps list is empty".into()));
        }
        let limit = problem.direction.eps_limit();
        for &eps in &self.eps {
            if !(eps >= 0.0) || !eps.is_finite() {
                return Err(CliError::Config(format!(
                    "eps {eps} must be finite and ≥ 0"
                )));
            }
            if eps >= limit {
                return Err(geomlens::GeomError::EpsilonTooLarge { eps, limit }.into());
            }
        }
        let p = &self.problem;
        if p.hidden_activations.len() != p.widths.len() {
            return Err(CliError::Config(format!(
                "{} hidden widths but {} hidden activations",
                p.widths.len(),
                p.hidden_activations.len()
            )));
        }
        if p.widths.contains(&0) {
            return Err(CliError::Config("hidden widths must be positive".into()));
        }
        if self.ranks.is_empty() {
            return Err(CliError::Config("ranks list is empty".into()));
        }
        if !p.widths.is_empty() && self.ranks.len() != p.widths.len() + 1 {
            return Err(CliError::Config(format!(
                "{} ranks for {} layers",
                self.ranks.len(),
                p.widths.len() + 1
            )));
        }
        // rank caps: output layer sees n actions, hidden layer i sees its width
        let nx = problem.nx();
        let mut dims = vec![problem.action_dim()];
        dims.extend(
            p.widths
                .iter()
                .rev()
                .take(self.ranks.len().saturating_sub(1)),
        );
        for (&k, &dim) in self.ranks.iter().zip(&dims) {
            let max = dim.min(nx);
            if k == 0 || k > max {
                return Err(geomlens::GeomError::RankTooLarge { k, max }.into());
            }
        }
        let t = &self.train;
        if !(t.lr > 0.0) || t.checkpoint_every == 0 {
            return Err(CliError::Config(
                "train.lr must be positive and train.checkpoint_every nonzero".into(),
            ));
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<Problem, CliError> {
        let p = &self.problem;
        let p_x = marginal(p.p_x.as_deref(), p.nx, "x", self.seed)?;
        let p_y = marginal(p.p_y.as_deref(), p.ny, "y", self.seed.wrapping_add(1))?;
        let direction = match (&p.direction.phi, p.direction.seed) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "direction takes either a seed or an explicit phi, not both".into(),
                ))
            }
            (Some(rows), None) => make_direction(&p_x, &p_y, &rows_to_matrix(rows, "phi")?)?,
            (None, seed) => {
                random_direction(&p_x, &p_y, seed.unwrap_or(self.seed.wrapping_add(2)))?
            }
        };
        let model = match p.loss {
            LossName::Log => {
                if p.y_values.is_some() {
                    return Err(CliError::Config("y_values only apply to l2 loss".into()));
                }
                LossModel::log(p_y.len())
            }
            LossName::L2 => {
                let rows = p
                    .y_values
                    .as_ref()
                    .ok_or_else(|| CliError::Config("l2 loss needs y_values".into()))?;
                let y = rows_to_matrix(rows, "y_values")?;
                if y.nrows() != p_y.len() {
                    return Err(CliError::Config(format!(
                        "y_values has {} rows for {} labels",
                        y.nrows(),
                        p_y.len()
                    )));
                }
                LossModel::squared(y)
            }
        };
        Ok(Problem {
            p_x,
            p_y,
            direction,
            model,
            activation: self.output_activation(),
        })
    }
}

fn marginal(
    explicit: Option<&[f64]>,
    size: Option<usize>,
    name: &str,
    seed: u64,
) -> Result<DVector<f64>, CliError> {
    match (explicit, size) {
        (Some(p), Some(n)) if p.len() != n => Err(CliError::Config(format!(
            "p_{name} has {} entries but n{name} = {n}",
            p.len()
        ))),
        (Some(p), _) => Ok(DVector::from_column_slice(p)),
        (None, Some(n)) if n >= 2 => Ok(random_marginal(n, seed)),
        (None, Some(n)) => Err(CliError::Config(format!("n{name} = {n} must be ≥ 2"))),
        (None, None) => Err(CliError::Config(format!("need p_{name} or n{name}"))),
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, CliError> {
    geomlens::linalg::from_rows(rows).map_err(|e| CliError::Config(format!("{name}: {e}")))
}
