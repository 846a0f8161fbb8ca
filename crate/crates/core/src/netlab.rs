//! Reference feedforward network over a one-hot encoded finite input, exact
//! empirical risk, analytic backpropagation and a deterministic full-batch
//! gradient-descent trainer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::dist::JointDistribution;
use crate::error::{GeomError, Result};
use crate::linalg;
use crate::losses::LossModel;

/// One affine layer followed by a coordinatewise activation:
/// `x ↦ h(Wᵀx + b)` with `W` of shape `k_in × k_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub act: Activation,
}

impl DenseLayer {
    pub fn new(w: DMatrix<f64>, b: DVector<f64>, act: Activation) -> Result<Self> {
        if w.ncols() != b.len() {
            return Err(GeomError::DimensionMismatch(format!(
                "weight has {} outputs, bias has {}",
                w.ncols(),
                b.len()
            )));
        }
        Ok(Self { w, b, act })
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn pre_activation(&self, input: &DVector<f64>) -> DVector<f64> {
        self.w.tr_mul(input) + &self.b
    }

    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        self.act.eval_vec(&self.pre_activation(input))
    }

    /// Uniform entries in `[−s, s]` with `s = 1/√fan_in`, zero bias.
    pub fn random(in_dim: usize, out_dim: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: DMatrix::from_fn(in_dim, out_dim, |_, _| rng.random_range(-s..=s)),
            b: DVector::zeros(out_dim),
            act,
        }
    }
}

/// Network parameters; the input is one-hot over X so `k_0 = |X|`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub hidden: Vec<DenseLayer>,
    pub output: DenseLayer,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `f^(1)(x), ..., f^(m)(x)`.
    pub features: Vec<DVector<f64>>,
    /// Pre-activations of every layer including the output layer.
    pub pre_activations: Vec<DVector<f64>>,
    pub action: DVector<f64>,
}

/// Gradient with the same layout as the parameters, hidden layers first.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradient {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl NetGradient {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.norm_squared() + b.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

impl NetworkParams {
    pub fn new(hidden: Vec<DenseLayer>, output: DenseLayer) -> Result<Self> {
        let net = Self { hidden, output };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let layers: Vec<&DenseLayer> = self.layers().collect();
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(GeomError::DimensionMismatch(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        let finite = layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(GeomError::DimensionMismatch("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Seeded random initialization for widths `[|X|, k_1, ..., k_m, n]`.
    pub fn random(
        widths: &[usize],
        hidden_acts: &[Activation],
        output_act: Activation,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() != hidden_acts.len() + 2 {
            return Err(GeomError::DimensionMismatch(format!(
                "{} widths need {} hidden activations",
                widths.len(),
                widths.len().saturating_sub(2)
            )));
        }
        let mut rng = crate::seeded_rng(seed);
        let hidden = hidden_acts
            .iter()
            .enumerate()
            .map(|(i, &act)| DenseLayer::random(widths[i], widths[i + 1], act, &mut rng))
            .collect();
        let m = widths.len() - 2;
        let output = DenseLayer::random(widths[m], widths[m + 1], output_act, &mut rng);
        Self::new(hidden, output)
    }

    /// Random hidden layers; output bias at `b̃` and output weights uniform in
    /// `[−scale, scale]`, so the pre-activations start within `O(scale)` of `b̃`.
    pub fn warm_start(
        widths: &[usize],
        hidden_acts: &[Activation],
        output_act: Activation,
        b_tilde: &DVector<f64>,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::random(widths, hidden_acts, output_act, seed)?;
        if b_tilde.len() != net.output.out_dim() {
            return Err(GeomError::DimensionMismatch(
                "b̃ length differs from output width".into(),
            ));
        }
        let mut rng = crate::seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
        net.output.w = DMatrix::from_fn(net.output.in_dim(), net.output.out_dim(), |_, _| {
            rng.random_range(-scale..=scale)
        });
        net.output.b = b_tilde.clone();
        Ok(net)
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.output).in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.out_dim()
    }

    pub fn forward(&self, x: usize) -> ForwardPass {
        let mut current = DVector::zeros(self.input_dim());
        current[x] = 1.0;
        let mut features = Vec::with_capacity(self.hidden.len());
        let mut pre_activations = Vec::with_capacity(self.hidden.len() + 1);
        for layer in &self.hidden {
            let z = layer.pre_activation(&current);
            current = layer.act.eval_vec(&z);
            pre_activations.push(z);
            features.push(current.clone());
        }
        let z = self.output.pre_activation(&current);
        let action = self.output.act.eval_vec(&z);
        pre_activations.push(z);
        ForwardPass {
            features,
            pre_activations,
            action,
        }
    }

    /// Feature table `k_i × |X|` of hidden layer `i` (1-based; 0 is the one-hot input).
    pub fn feature_table(&self, layer: usize) -> DMatrix<f64> {
        let nx = self.input_dim();
        if layer == 0 {
            return DMatrix::identity(nx, nx);
        }
        let cols: Vec<DVector<f64>> = (0..nx)
            .map(|x| self.forward(x).features[layer - 1].clone())
            .collect();
        DMatrix::from_columns(&cols)
    }

    /// Output actions as an `n × |X|` table.
    pub fn action_table(&self) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..self.input_dim())
            .map(|x| self.forward(x).action)
            .collect();
        DMatrix::from_columns(&cols)
    }

    fn check_against(&self, j: &JointDistribution, model: &LossModel) -> Result<()> {
        if self.input_dim() != j.nx() {
            return Err(GeomError::DimensionMismatch(format!(
                "network input {} vs |X| = {}",
                self.input_dim(),
                j.nx()
            )));
        }
        if self.output_dim() != model.action_dim() {
            return Err(GeomError::DimensionMismatch(format!(
                "network output {} vs action dimension {}",
                self.output_dim(),
                model.action_dim()
            )));
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for layer in self.layers_mut() {
            for v in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *v = it.next().expect("flat parameter vector too short");
            }
        }
    }

    pub fn to_json(&self) -> NetworkJson {
        NetworkJson {
            input_dim: self.input_dim(),
            layers: self
                .layers()
                .map(|l| LayerJson {
                    shape: [l.in_dim(), l.out_dim()],
                    weights: linalg::to_rows(&l.w),
                    bias: l.b.iter().copied().collect(),
                    activation: l.act,
                })
                .collect(),
        }
    }

    pub fn from_json(json: &NetworkJson) -> Result<Self> {
        let mut layers = Vec::with_capacity(json.layers.len());
        for l in &json.layers {
            let w = linalg::from_rows(&l.weights)?;
            if w.shape() != (l.shape[0], l.shape[1]) {
                return Err(GeomError::DimensionMismatch(format!(
                    "declared shape {:?}, weights are {:?}",
                    l.shape,
                    w.shape()
                )));
            }
            layers.push(DenseLayer::new(
                w,
                DVector::from_vec(l.bias.clone()),
                l.activation,
            )?);
        }
        let output = layers
            .pop()
            .ok_or_else(|| GeomError::DimensionMismatch("network has no layers".into()))?;
        let net = Self::new(layers, output)?;
        if net.input_dim() != json.input_dim {
            return Err(GeomError::DimensionMismatch(
                "input_dim disagrees with first layer".into(),
            ));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub shape: [usize; 2],
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Saved network: layers in forward order, the last one being the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkJson {
    pub input_dim: usize,
    pub layers: Vec<LayerJson>,
}

/// `Σ_{x,y} P_XY(x, y) L(y, a(x))`.
pub fn empirical_risk(
    net: &NetworkParams,
    j: &JointDistribution,
    model: &LossModel,
) -> Result<f64> {
    net.check_against(j, model)?;
    let mut total = 0.0;
    for x in 0..j.nx() {
        let a = net.forward(x).action;
        for y in 0..j.ny() {
            let p = j.p_xy()[(x, y)];
            if p > 0.0 {
                total += p * model.loss(y, &a)?;
            }
        }
    }
    Ok(total)
}

/// `Σ_x P_X(x) E_{P_{Y|X=x}}[L(Y, a_{P_{Y|X=x}})]`, the risk of the best
/// unconstrained action map.
pub fn risk_lower_bound(j: &JointDistribution, model: &LossModel) -> Result<f64> {
    let mut total = 0.0;
    for x in 0..j.nx() {
        total += j.p_x()[x] * model.bayes_action(&j.conditional(x))?.risk;
    }
    Ok(total)
}

/// Risk and its gradient by backpropagation.
pub fn risk_gradient(
    net: &NetworkParams,
    j: &JointDistribution,
    model: &LossModel,
) -> Result<(f64, NetGradient)> {
    net.check_against(j, model)?;
    let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = net
        .layers()
        .map(|l| {
            (
                DMatrix::zeros(l.in_dim(), l.out_dim()),
                DVector::zeros(l.out_dim()),
            )
        })
        .collect();
    let layers: Vec<&DenseLayer> = net.layers().collect();
    let mut risk = 0.0;
    for x in 0..j.nx() {
        let pass = net.forward(x);
        let q = j.conditional(x);
        let px = j.p_x()[x];
        risk += px * model.expected_loss(&q, &pass.action)?;
        let mut upstream = model.expected_gradient(&q, &pass.action)? * px;
        for li in (0..layers.len()).rev() {
            let layer = layers[li];
            let dz = upstream.component_mul(&layer.act.deriv_vec(&pass.pre_activations[li]));
            let input = if li == 0 {
                let mut e = DVector::zeros(net.input_dim());
                e[x] = 1.0;
                e
            } else {
                pass.features[li - 1].clone()
            };
            grads[li].0 += &input * dz.transpose();
            grads[li].1 += &dz;
            upstream = &layer.w * dz;
        }
    }
    Ok((risk, NetGradient { layers: grads }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial trial step of every iteration; halved until the risk does not increase.
    pub lr: f64,
    pub steps: usize,
    /// Stop early once the gradient norm falls below this.
    pub grad_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            steps: 1000,
            grad_tol: 0.0,
        }
    }
}

pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: NetworkParams,
    /// Risk before training followed by the risk after each step.
    pub risk_trace: Vec<f64>,
    pub final_gradient_norm: f64,
}

/// Full-batch gradient descent with backtracking: each step starts at
/// `cfg.lr` and halves until the risk does not increase. The trace is
/// monotone non-increasing by construction.
pub fn train(
    net: &NetworkParams,
    j: &JointDistribution,
    model: &LossModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut net = net.clone();
    let (mut risk, mut grad) = risk_gradient(&net, j, model)?;
    if !(risk <= DIVERGENCE_LIMIT) {
        return Err(GeomError::Divergence { risk });
    }
    let mut trace = vec![risk];
    let mut flat = net.to_flat();
    for _ in 0..cfg.steps {
        let gnorm = grad.norm();
        if gnorm <= cfg.grad_tol {
            break;
        }
        let gflat: Vec<f64> = grad
            .layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect();
        let mut t = cfg.lr;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = flat.iter().zip(&gflat).map(|(p, g)| p - t * g).collect();
            let mut trial = net.clone();
            trial.set_flat(&cand);
            if let Ok(r) = empirical_risk(&trial, j, model) {
                if r <= risk {
                    net = trial;
                    flat = cand;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // no representable decrease along the gradient
            trace.push(risk);
            break;
        }
        let (r, g) = risk_gradient(&net, j, model)?;
        if !(r <= DIVERGENCE_LIMIT) {
            return Err(GeomError::Divergence { risk: r });
        }
        risk = r;
        grad = g;
        trace.push(risk);
    }
    let final_gradient_norm = grad.norm();
    Ok(TrainOutcome {
        net,
        risk_trace: trace,
        final_gradient_norm,
    })
}
