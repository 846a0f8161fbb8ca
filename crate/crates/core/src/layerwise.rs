//! Hidden-layer recursion: the loss seen by layer i is the base loss
//! pre-composed with the fixed downstream layers. Layer Bayes actions are
//! solved numerically, and the resulting bundles feed the same low-rank
//! engine as the output layer.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::activations::Activation;
use crate::dist::JointDistribution;
use crate::error::{GeomError, Result};
use crate::geometry::{build_bundle, GeometryBundle};
use crate::linalg;
use crate::losses::{BayesSolution, LossModel, SolverConfig};
use crate::lowrank::{optimal_feature, solve_layer, LayerAnalysis};
use crate::netlab::{DenseLayer, NetworkParams};

/// Pre-activations closer than this to a kink are pushed to `kink + KINK_NUDGE`.
pub const KINK_NUDGE: f64 = 1e-8;

/// Fixed layers `i+1, ..., m` plus the output layer, followed by the base loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamStack {
    layers: Vec<DenseLayer>,
    base: LossModel,
}

struct StackPass {
    /// Input of each layer.
    inputs: Vec<DVector<f64>>,
    /// Pre-activation of each layer after the kink nudge.
    pre: Vec<DVector<f64>>,
    output: DVector<f64>,
}

impl DownstreamStack {
    pub fn new(layers: Vec<DenseLayer>, base: LossModel) -> Result<Self> {
        if matches!(base, LossModel::Composite(_)) {
            return Err(GeomError::DimensionMismatch(
                "downstream stack needs a log or squared base loss".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(GeomError::DimensionMismatch(format!(
                    "layer output {} feeds input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        if let Some(last) = layers.last() {
            if last.out_dim() != base.action_dim() {
                return Err(GeomError::DimensionMismatch(format!(
                    "stack output {} vs action dimension {}",
                    last.out_dim(),
                    base.action_dim()
                )));
            }
        }
        Ok(Self { layers, base })
    }

    /// Downstream part of `net` above hidden layer `layer` (1-based); layer
    /// `m + 1` yields the empty stack.
    pub fn from_network(net: &NetworkParams, layer: usize, base: LossModel) -> Result<Self> {
        let all: Vec<DenseLayer> = net.layers().cloned().collect();
        if layer == 0 || layer > all.len() {
            return Err(GeomError::DimensionMismatch(format!(
                "layer {layer} outside 1..={}",
                all.len()
            )));
        }
        Self::new(all[layer..].to_vec(), base)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn base(&self) -> &LossModel {
        &self.base
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(self.base.action_dim(), DenseLayer::in_dim)
    }

    fn pass(&self, a: &DVector<f64>) -> Result<StackPass> {
        if a.len() != self.input_dim() {
            return Err(GeomError::DimensionMismatch(format!(
                "layer action has length {}, stack expects {}",
                a.len(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = a.clone();
        for layer in &self.layers {
            let mut z = layer.pre_activation(&current);
            if let Some(k) = layer.act.kink() {
                z.apply(|v| {
                    if (*v - k).abs() < KINK_NUDGE {
                        *v = k + KINK_NUDGE;
                    }
                });
            }
            let next = layer.act.eval_vec(&z);
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(z);
        }
        Ok(StackPass {
            inputs,
            pre,
            output: current,
        })
    }

    /// Output of the downstream maps for a layer action.
    pub fn forward(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.pass(a)?.output)
    }

    pub fn loss(&self, y: usize, a: &DVector<f64>) -> Result<f64> {
        self.base.loss(y, &self.forward(a)?)
    }

    pub fn expected_loss(&self, q: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
        self.base.expected_loss(q, &self.forward(a)?)
    }

    /// Chain rule through the downstream layers.
    pub fn expected_gradient(&self, q: &DVector<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
        let pass = self.pass(a)?;
        let mut g = self.base.expected_gradient(q, &pass.output)?;
        for (layer, z) in self.layers.iter().zip(&pass.pre).rev() {
            g = &layer.w * g.component_mul(&layer.act.deriv_vec(z));
        }
        debug_assert_eq!(pass.inputs.len(), self.layers.len());
        Ok(g)
    }
}

/// `L^(i)(y, a) = L(y, g(a))` for the stack's downstream map `g`.
pub fn composite_loss(stack: &DownstreamStack, y: usize, a: &DVector<f64>) -> Result<f64> {
    stack.loss(y, a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTarget {
    /// k_i×|X| numeric Bayes actions of the composite loss, one column per x.
    pub bayes_actions: DMatrix<f64>,
    pub bayes_marginal: DVector<f64>,
    pub b_tilde: DVector<f64>,
    /// Per-x solver reports, ordered by x.
    pub solutions: Vec<BayesSolution>,
    pub bundle: GeometryBundle,
}

impl LayerTarget {
    pub fn max_gradient_norm(&self) -> f64 {
        self.solutions
            .iter()
            .map(|s| s.gradient_norm)
            .fold(0.0, f64::max)
    }
}

/// Numeric Bayes actions of the composite loss for `P_Y` and every
/// `P_{Y|X=x}`, `M_{L^(i)}` at the marginal action, and the layer bundle
/// built against the layer's input features `f_prev` (k_{i−1}×|X|).
///
/// The solver starts from `h^(i)(0)` unless `cfg.init` is set.
pub fn layer_target(
    j: &JointDistribution,
    stack: &DownstreamStack,
    act: Activation,
    f_prev: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<LayerTarget> {
    let model = LossModel::composite(stack.clone());
    let mut cfg = cfg.clone();
    if cfg.init.is_none() {
        cfg.init = Some(act.eval_vec(&DVector::zeros(stack.input_dim())));
    }
    let marginal = model
        .bayes_action_with(j.p_y(), &cfg)
        .map_err(|e| tag_column(e, "P_Y"))?;
    let solutions: Vec<BayesSolution> = (0..j.nx())
        .into_par_iter()
        .map(|x| {
            model
                .bayes_action_with(&j.conditional(x), &cfg)
                .map_err(|e| tag_column(e, &format!("x = {x}")))
        })
        .collect::<Result<_>>()?;
    let cols: Vec<DVector<f64>> = solutions.iter().map(|s| s.action.clone()).collect();
    let bayes_actions = DMatrix::from_columns(&cols);
    let m_l = model.hessian_ml_at(j.p_y(), &marginal.action)?;
    let bundle = GeometryBundle::from_parts(
        j.p_x(),
        marginal.action.clone(),
        bayes_actions.clone(),
        m_l,
        act,
        f_prev,
    )?;
    Ok(LayerTarget {
        bayes_actions,
        bayes_marginal: marginal.action,
        b_tilde: bundle.b_tilde_vec.clone(),
        solutions,
        bundle,
    })
}

fn tag_column(e: GeomError, column: &str) -> GeomError {
    match e {
        GeomError::NonConvergence {
            context,
            iterations,
            residual,
        } => GeomError::NonConvergence {
            context: format!("{context} (column {column})"),
            iterations,
            residual,
        },
        other => other,
    }
}

/// Rank-`k_prev` optimum of the layer surrogate; requires `k_prev ≤ min(k_i, |X|)`.
pub fn solve_hidden_layer(target: &LayerTarget, k_prev: usize) -> Result<LayerAnalysis> {
    solve_layer(&target.bundle, k_prev)
}

/// One layer of a backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    /// 1-based layer index; `m + 1` is the output layer.
    pub layer: usize,
    pub bundle: GeometryBundle,
    pub analysis: LayerAnalysis,
    /// Largest solver gradient norm over the layer's Bayes actions (0 for the output layer).
    pub max_gradient_norm: f64,
    /// Largest principal angle (degrees) between the centered layer Bayes
    /// actions and the best features for the layer above at its current
    /// weights. Absent for the output layer, and when the layer above is
    /// wider than the rank of its `M_L` (no unique best feature).
    pub correspondence_angle_deg: Option<f64>,
    /// `‖Ξ_f* − B‖_F / ‖B‖_F` for the same pair.
    pub correspondence_gap: Option<f64>,
}

/// Analyzes every layer of `net`, output first. `ranks[0]` is the rank for
/// the output layer, `ranks[1]` for hidden layer m, and so on.
pub fn backward_sweep(
    j: &JointDistribution,
    net: &NetworkParams,
    model: &LossModel,
    ranks: &[usize],
    cfg: &SolverConfig,
) -> Result<Vec<LayerStep>> {
    let m = net.hidden.len();
    if ranks.len() != m + 1 {
        return Err(GeomError::DimensionMismatch(format!(
            "{} ranks for {} layers",
            ranks.len(),
            m + 1
        )));
    }
    if net.input_dim() != j.nx() || net.output_dim() != model.action_dim() {
        return Err(GeomError::DimensionMismatch(
            "network does not match the problem".into(),
        ));
    }
    let output_bundle = build_bundle(j, model, net.output.act, &net.feature_table(m))?;
    let output_analysis = solve_layer(&output_bundle, ranks[0])?;
    let mut steps = vec![LayerStep {
        layer: m + 1,
        bundle: output_bundle,
        analysis: output_analysis,
        max_gradient_norm: 0.0,
        correspondence_angle_deg: None,
        correspondence_gap: None,
    }];
    let layers: Vec<&DenseLayer> = net.layers().collect();
    for (step, layer) in (1..=m).rev().enumerate() {
        let above = &steps[step];
        let upper = layers[layer];
        let xi_w = above.bundle.xi_w(&upper.w);
        let d = &upper.b - &above.bundle.b_tilde_vec;
        // the prediction needs Ξ_W of full column rank; wider layers get none
        let predicted = match optimal_feature(&above.bundle, &xi_w, &d) {
            Ok(p) => Some(p),
            Err(GeomError::SingularGram { .. }) => None,
            Err(e) => return Err(e),
        };

        let stack = DownstreamStack::from_network(net, layer, model.clone())?;
        let target = layer_target(
            j,
            &stack,
            layers[layer - 1].act,
            &net.feature_table(layer - 1),
            cfg,
        )?;
        let b_mat = &target.bundle.b_mat;
        let angle = predicted
            .as_ref()
            .map(|p| linalg::max_principal_angle_deg(&p.xi_f, b_mat));
        let gap = predicted.as_ref().map(|p| {
            let b_norm = b_mat.norm();
            if b_norm > 0.0 {
                (&p.xi_f - b_mat).norm() / b_norm
            } else {
                0.0
            }
        });
        let analysis = solve_hidden_layer(&target, ranks[m + 1 - layer])?;
        steps.push(LayerStep {
            layer,
            max_gradient_norm: target.max_gradient_norm(),
            bundle: target.bundle,
            analysis,
            correspondence_angle_deg: angle,
            correspondence_gap: gap,
        });
    }
    Ok(steps)
}
