use std::path::Path;

use geomlens::activations::{auto_certify, certify_assumption1, Activation, GradientCertificate};
use geomlens::dist::{DistributionJson, JointDistribution};
use geomlens::experiments::{
    consecutive_ratios, local_regime_row, loglog_slope, residual_row, train_compare, AnalysisPoint,
    LocalRegimeRow, Problem, ResidualRow, TrainComparison,
};
use geomlens::geometry::{build_bundle, BundleJson, GeometryBundle};
use geomlens::layerwise::backward_sweep;
use geomlens::losses::SolverConfig;
use geomlens::lowrank::{solve_layer, LayerAnalysis, LayerAnalysisJson};
use geomlens::netlab::{NetworkJson, NetworkParams, TrainConfig};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, InitKind, LossName};
use crate::error::CliError;
use crate::report;

// offsets from the config seed for each random ingredient
const FEATURE_SEED: u64 = 101;
const NET_SEED: u64 = 60;
const FREE_FEATURE_SEED: u64 = 5;
const WARM_START_SEED: u64 = 11;

const NULL_VECTOR_TOL: f64 = 1e-8;

#[derive(Debug, Serialize)]
pub struct Metadata {
    pub version: &'static str,
    pub seed: u64,
    pub config_hash: String,
}

impl Metadata {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        Ok(Self {
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_hash: report::config_hash(cfg)?,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub passed: bool,
}

fn gate_result(gates: &[Gate]) -> Result<(), CliError> {
    let failed: Vec<String> = gates
        .iter()
        .filter(|g| !g.passed)
        .map(|g| format!("{} = {}", g.name, g.value))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gate(failed.join("; ")))
    }
}

fn seeded(cfg: &ExperimentConfig, offset: u64) -> u64 {
    cfg.seed.wrapping_add(offset)
}

pub fn generate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(), CliError> {
    let problem = cfg.build_problem()?;
    let j = problem.joint(cfg.eps[0])?;
    report::emit(out, &report::to_json(&j.to_json())?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
pub struct LayerReport {
    /// 1-based; the output layer is the last one.
    pub layer: usize,
    pub bundle: BundleJson,
    pub analysis: LayerAnalysisJson,
    pub correspondence_angle_deg: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub metadata: Metadata,
    pub chi2: f64,
    /// Output layer first.
    pub layers: Vec<LayerReport>,
}

fn check_bundle(
    layer: usize,
    bundle: &GeometryBundle,
    analysis: &LayerAnalysis,
) -> Result<(), CliError> {
    let null = (&bundle.b_tilde_mat * &bundle.sqrt_px).amax();
    let bound_gap = (analysis.achieved_frobenius - analysis.ey_bound).abs();
    let scale = analysis.ey_bound.abs().max(1.0);
    if null > NULL_VECTOR_TOL || bound_gap > 1e-10 * scale {
        return Err(CliError::Geom(geomlens::GeomError::NonConvergence {
            context: format!(
                "layer {layer} invariants (B̃√p_X {null:.3e}, bound gap {bound_gap:.3e})"
            ),
            iterations: 0,
            residual: null.max(bound_gap),
        }));
    }
    Ok(())
}

pub fn analyze(
    cfg: &ExperimentConfig,
    dist: &Path,
    net_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let problem = cfg.build_problem()?;
    let j = JointDistribution::from_json(&read_json::<DistributionJson>(dist)?)?;
    if j.nx() != problem.nx() || j.ny() != problem.p_y.len() {
        return Err(CliError::Config(format!(
            "distribution is {}×{} but the config describes {}×{}",
            j.nx(),
            j.ny(),
            problem.nx(),
            problem.p_y.len()
        )));
    }
    let net = match net_path {
        Some(p) => Some(NetworkParams::from_json(&read_json::<NetworkJson>(p)?)?),
        None if !cfg.problem.widths.is_empty() => Some(random_net(cfg, &problem)?),
        None => None,
    };

    let layers = match net {
        Some(net) => {
            let steps = backward_sweep(
                &j,
                &net,
                &problem.model,
                &cfg.ranks,
                &SolverConfig::default(),
            )?;
            steps
                .into_iter()
                .map(|s| {
                    check_bundle(s.layer, &s.bundle, &s.analysis)?;
                    Ok(LayerReport {
                        layer: s.layer,
                        bundle: s.bundle.to_json(),
                        analysis: s.analysis.to_json(),
                        correspondence_angle_deg: s.correspondence_angle_deg,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?
        }
        None => {
            // output layer alone, on seeded tabular features of width k
            let k = cfg.ranks[0];
            let mut rng = geomlens::seeded_rng(seeded(cfg, FEATURE_SEED));
            let f = DMatrix::from_fn(k, j.nx(), |_, _| rng.random_range(-1.0..1.0));
            let bundle = build_bundle(&j, &problem.model, problem.activation, &f)?;
            let analysis = solve_layer(&bundle, k)?;
            check_bundle(1, &bundle, &analysis)?;
            vec![LayerReport {
                layer: 1,
                bundle: bundle.to_json(),
                analysis: analysis.to_json(),
                correspondence_angle_deg: None,
            }]
        }
    };
    let report = AnalysisReport {
        metadata: Metadata::new(cfg)?,
        chi2: geomlens::dist::chi2_mutual_information(&j),
        layers,
    };
    report::emit(out, &report::to_json(&report)?)
}

/// Seeded random weights with zero hidden biases and the output centered on
/// the marginal Bayes action, so every layer target stays in its activation's image.
fn random_net(cfg: &ExperimentConfig, problem: &Problem) -> Result<NetworkParams, CliError> {
    let mut widths = vec![problem.nx()];
    widths.extend(&cfg.problem.widths);
    widths.push(problem.action_dim());
    let mut net = NetworkParams::random(
        &widths,
        &cfg.problem.hidden_activations,
        problem.activation,
        seeded(cfg, NET_SEED),
    )?;
    for layer in &mut net.hidden {
        layer.b.fill(0.0);
    }
    let a_py = problem.model.bayes_action(&problem.p_y)?.action;
    net.output.b = problem.activation.inverse_vec(&a_py)?;
    Ok(net)
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub analysis: ResidualRow,
    pub trained: Option<LocalRegimeRow>,
}

#[derive(Debug, Serialize)]
pub struct Slopes {
    /// Log-log slope of the surrogate residual against ε.
    pub residual: Option<f64>,
    /// Log-log slope of the Bayes-action spread against ε.
    pub bayes_spread: Option<f64>,
    pub bayes_spread_ratios: Vec<f64>,
    pub trained_deviation_ratios: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub metadata: Metadata,
    pub rank_k: usize,
    /// Sorted by descending ε.
    pub rows: Vec<SweepRow>,
    pub slopes: Slopes,
    pub gates: Vec<Gate>,
}

pub fn sweep(
    cfg: &ExperimentConfig,
    json_out: Option<&Path>,
    csv_out: Option<&Path>,
) -> Result<(), CliError> {
    let problem = cfg.build_problem()?;
    let k = cfg.ranks[0];
    let point = AnalysisPoint::random(
        k,
        problem.nx(),
        problem.action_dim(),
        seeded(cfg, FEATURE_SEED),
    );
    let train_cfg = TrainConfig {
        lr: cfg.train.lr,
        steps: cfg.train.steps,
        grad_tol: 0.0,
    };
    let mut levels = cfg.eps.clone();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();

    let rows = levels
        .par_iter()
        .map(|&eps| {
            let analysis = residual_row(&problem, &point, eps, k)?;
            let trained = if cfg.train.in_sweep {
                Some(local_regime_row(
                    &problem,
                    eps,
                    k,
                    &train_cfg,
                    seeded(cfg, FREE_FEATURE_SEED),
                )?)
            } else {
                None
            };
            Ok(SweepRow { analysis, trained })
        })
        .collect::<Result<Vec<_>, geomlens::GeomError>>()?;

    let residuals: Vec<f64> = rows.iter().map(|r| r.analysis.residual).collect();
    let spreads: Vec<f64> = rows.iter().map(|r| r.analysis.bayes_spread).collect();
    let deviations: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.trained.as_ref().map(|t| t.deviation))
        .collect();
    let slopes = Slopes {
        residual: loglog_slope(&levels, &residuals),
        bayes_spread: loglog_slope(&levels, &spreads),
        bayes_spread_ratios: consecutive_ratios(&spreads),
        trained_deviation_ratios: consecutive_ratios(&deviations),
    };

    let tol = &cfg.tolerances;
    let mut gates = Vec::new();
    if let Some(slope) = slopes.residual {
        gates.push(Gate {
            name: "residual_slope".into(),
            value: slope,
            passed: slope >= tol.residual_slope_min,
        });
    }
    // ratio bands only make sense when every step halves ε
    let halving = levels.windows(2).all(|w| (w[1] / w[0] - 0.5).abs() < 1e-12);
    if halving {
        let band = |name: &str, ratios: &[f64], lo: f64, hi: f64, gates: &mut Vec<Gate>| {
            for (i, &r) in ratios.iter().enumerate() {
                gates.push(Gate {
                    name: format!("{name}[{i}]"),
                    value: r,
                    passed: (lo..=hi).contains(&r),
                });
            }
        };
        band(
            "bayes_spread_ratio",
            &slopes.bayes_spread_ratios,
            tol.spread_ratio_min,
            tol.spread_ratio_max,
            &mut gates,
        );
        if cfg.problem.loss == LossName::L2 {
            band(
                "trained_deviation_ratio",
                &slopes.trained_deviation_ratios,
                tol.local_ratio_min,
                tol.local_ratio_max,
                &mut gates,
            );
        }
    }

    let report = SweepReport {
        metadata: Metadata::new(cfg)?,
        rank_k: k,
        rows,
        slopes,
        gates,
    };
    if let Some(path) = csv_out {
        report::emit(Some(path), &sweep_csv(&report)?)?;
    }
    report::emit(json_out, &report::to_json(&report)?)?;
    gate_result(&report.gates)
}

fn sweep_csv(report: &SweepReport) -> Result<Vec<u8>, CliError> {
    let mut header = vec![
        "eps",
        "chi2",
        "true_objective",
        "surrogate_total",
        "frobenius_term",
        "eta_term",
        "residual",
        "ey_bound",
        "local_deviation",
        "bayes_spread",
    ];
    let trained = report.rows.first().is_some_and(|r| r.trained.is_some());
    if trained {
        header.extend(["trained_excess_risk", "trained_deviation"]);
    }
    let n_sigma = report
        .rows
        .first()
        .map_or(0, |r| r.analysis.singular_values.len());
    let sigma_names: Vec<String> = (1..=n_sigma).map(|i| format!("sigma_{i}")).collect();
    header.extend(sigma_names.iter().map(String::as_str));

    let rows: Vec<Vec<f64>> = report
        .rows
        .iter()
        .map(|r| {
            let a = &r.analysis;
            let mut row = vec![
                a.eps,
                a.chi2,
                a.true_objective,
                a.surrogate.total,
                a.surrogate.frobenius_term,
                a.surrogate.eta_term,
                a.residual,
                a.ey_bound,
                a.local_deviation,
                a.bayes_spread,
            ];
            if let Some(t) = &r.trained {
                row.extend([t.excess_risk, t.deviation]);
            }
            row.extend(&a.singular_values);
            row
        })
        .collect();
    report::to_csv(&header, &rows)
}

#[derive(Debug, Serialize)]
pub struct TrainCompareReport {
    pub metadata: Metadata,
    pub init: InitKind,
    #[serde(flatten)]
    pub comparison: TrainComparison,
    pub gates: Vec<Gate>,
}

pub fn train_compare_cmd(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(), CliError> {
    let problem = cfg.build_problem()?;
    let eps = cfg.eps[0];
    let j = problem.joint(eps)?;
    let k = cfg.ranks[0];
    let p = &cfg.problem;
    let (widths, hidden_acts) = if p.widths.is_empty() {
        (vec![k], vec![Activation::Tanh])
    } else {
        (p.widths.clone(), p.hidden_activations.clone())
    };
    if widths.last() != Some(&k) {
        return Err(CliError::Config(format!(
            "last hidden width {} must equal the output rank {k}",
            widths.last().unwrap()
        )));
    }
    let mut all_widths = vec![problem.nx()];
    all_widths.extend(&widths);
    all_widths.push(problem.action_dim());

    let seed = seeded(cfg, WARM_START_SEED);
    let net = match cfg.train.init {
        InitKind::Warm => {
            let placeholder = DMatrix::zeros(k, problem.nx());
            let bundle = build_bundle(&j, &problem.model, problem.activation, &placeholder)?;
            let scale = cfg.train.init_scale.unwrap_or(eps);
            NetworkParams::warm_start(
                &all_widths,
                &hidden_acts,
                problem.activation,
                &bundle.b_tilde_vec,
                scale,
                seed,
            )?
        }
        InitKind::Random => {
            NetworkParams::random(&all_widths, &hidden_acts, problem.activation, seed)?
        }
    };
    let train_cfg = TrainConfig {
        lr: cfg.train.lr,
        steps: cfg.train.steps,
        grad_tol: 0.0,
    };
    let comparison = train_compare(
        &j,
        &problem.model,
        &net,
        &train_cfg,
        cfg.train.checkpoint_every,
        eps,
    )?;

    let tol = &cfg.tolerances;
    let mut gates = Vec::new();
    // cold starts may land in other local optima: reported, never gated
    if cfg.train.init == InitKind::Warm {
        gates.push(Gate {
            name: "decomposition_error".into(),
            value: comparison.max_decomposition_error,
            passed: comparison.max_decomposition_error <= tol.decomposition,
        });
        match comparison.ratio {
            Some(r) => gates.push(Gate {
                name: "excess_risk_ratio".into(),
                value: r,
                passed: (tol.train_ratio_min..=tol.train_ratio_max).contains(&r),
            }),
            None => gates.push(Gate {
                name: "excess_risk_at_zero_floor".into(),
                value: comparison.trained_excess_risk,
                passed: comparison.trained_excess_risk.abs() <= 1e-10,
            }),
        }
    }
    let report = TrainCompareReport {
        metadata: Metadata::new(cfg)?,
        init: cfg.train.init,
        comparison,
        gates,
    };
    report::emit(out, &report::to_json(&report)?)?;
    gate_result(&report.gates)
}

#[derive(Debug, Serialize)]
pub struct CertificateReport {
    pub activation: Activation,
    #[serde(flatten)]
    pub certificate: GradientCertificate,
}

pub fn certify(
    act: Activation,
    center: f64,
    delta: Option<f64>,
    probes: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if !center.is_finite() || delta.is_some_and(|d| !(d > 0.0) || !d.is_finite()) {
        return Err(CliError::Config(
            "center must be finite and delta positive".into(),
        ));
    }
    let certificate = match delta {
        Some(d) => certify_assumption1(&act, center, d, probes),
        None => auto_certify(&act, center, probes),
    };
    let report = CertificateReport {
        activation: act,
        certificate,
    };
    report::emit(out, &report::to_json(&report)?)?;
    if certificate.verified {
        Ok(())
    } else {
        Err(CliError::Gate(format!(
            "{act} is not certified at {center}"
        )))
    }
}
