//! Scalar activations with derivatives and inverses, and a numerical
//! certificate for the local non-vanishing-slope condition at a bias.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{GeomError, Result};

/// Anything with a value and a derivative can be certified.
pub trait ScalarActivation {
    fn eval(&self, z: f64) -> f64;
    fn deriv(&self, z: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    /// Slope on the negative half-line; must be positive.
    LeakyRelu(f64),
    Softplus,
}

impl Activation {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::LeakyRelu(slope) => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// Derivative; LeakyRelu uses the right-hand slope 1 at the kink.
    pub fn deriv(&self, z: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu(slope) => {
                if z >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Softplus => sigmoid(z),
        }
    }

    /// Open image interval `(lo, hi)`.
    pub fn image_interval(&self) -> (f64, f64) {
        match self {
            Activation::Identity | Activation::LeakyRelu(_) => (f64::NEG_INFINITY, f64::INFINITY),
            Activation::Sigmoid => (0.0, 1.0),
            Activation::Tanh => (-1.0, 1.0),
            Activation::Softplus => (0.0, f64::INFINITY),
        }
    }

    pub fn inverse(&self, v: f64) -> Result<f64> {
        let (lo, hi) = self.image_interval();
        if !(v > lo && v < hi) {
            return Err(GeomError::OutOfImage {
                value: v,
                activation: self.to_string(),
            });
        }
        Ok(match *self {
            Activation::Identity => v,
            Activation::Sigmoid => (v / (1.0 - v)).ln(),
            Activation::Tanh => v.atanh(),
            Activation::LeakyRelu(slope) => {
                if v >= 0.0 {
                    v
                } else {
                    v / slope
                }
            }
            // log(e^v − 1) written to avoid overflow for large v
            Activation::Softplus => v + (-(-v).exp_m1()).ln(),
        })
    }

    pub fn eval_vec(&self, z: &DVector<f64>) -> DVector<f64> {
        z.map(|v| self.eval(v))
    }

    pub fn deriv_vec(&self, z: &DVector<f64>) -> DVector<f64> {
        z.map(|v| self.deriv(v))
    }

    pub fn inverse_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(v.len());
        for (i, &vi) in v.iter().enumerate() {
            out[i] = self.inverse(vi)?;
        }
        Ok(out)
    }

    /// Jacobian of the coordinatewise map at `b`: `diag(h'(b_1), ..., h'(b_n))`.
    pub fn jacobian(&self, b: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.deriv_vec(b))
    }

    /// Location of a derivative discontinuity, if any.
    pub fn kink(&self) -> Option<f64> {
        match self {
            Activation::LeakyRelu(_) => Some(0.0),
            _ => None,
        }
    }
}

impl ScalarActivation for Activation {
    fn eval(&self, z: f64) -> f64 {
        Activation::eval(self, z)
    }

    fn deriv(&self, z: f64) -> f64 {
        Activation::deriv(self, z)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Identity => write!(f, "identity"),
            Activation::Sigmoid => write!(f, "sigmoid"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::LeakyRelu(slope) => write!(f, "leaky_relu:{slope}"),
            Activation::Softplus => write!(f, "softplus"),
        }
    }
}

impl FromStr for Activation {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Activation::Identity),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => {
                let slope = other
                    .strip_prefix("leaky_relu:")
                    .ok_or_else(|| GeomError::Parse(format!("unknown activation '{other}'")))?
                    .parse::<f64>()
                    .map_err(|e| GeomError::Parse(format!("leaky_relu slope: {e}")))?;
                if !(slope > 0.0) || !slope.is_finite() {
                    return Err(GeomError::Parse(format!(
                        "leaky_relu slope must be positive, got {slope}"
                    )));
                }
                Ok(Activation::LeakyRelu(slope))
            }
        }
    }
}

impl Serialize for Activation {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCertificate {
    pub center: f64,
    pub delta: f64,
    pub k_lower: f64,
    pub verified: bool,
}

/// Checks `|h(z) − h(c)| ≥ K |z − c|` with `K = h'(c)/2` at `probes` equally
/// spaced points of `(c − δ, c + δ)`.
pub fn certify_assumption1<H: ScalarActivation + ?Sized>(
    act: &H,
    center: f64,
    delta: f64,
    probes: usize,
) -> GradientCertificate {
    let probes = probes.max(100);
    let k_lower = act.deriv(center) / 2.0;
    let h_c = act.eval(center);
    let mut verified = k_lower > 0.0 && delta > 0.0;
    if verified {
        // probes at center + δ·t, t on an open grid of (−1, 1) skipping 0
        for i in 0..probes {
            let t = -1.0 + 2.0 * (i as f64 + 0.5) / probes as f64;
            let z = center + delta * t;
            let dz = (z - center).abs();
            if dz == 0.0 {
                continue;
            }
            if (act.eval(z) - h_c).abs() < k_lower * dz * (1.0 - 1e-12) {
                verified = false;
                break;
            }
        }
    }
    GradientCertificate {
        center,
        delta,
        k_lower,
        verified,
    }
}

/// Shrinks δ geometrically from 1 until every probe passes or δ < 1e-6.
pub fn auto_certify<H: ScalarActivation + ?Sized>(
    act: &H,
    center: f64,
    probes: usize,
) -> GradientCertificate {
    let mut delta = 1.0;
    loop {
        let cert = certify_assumption1(act, center, delta, probes);
        if cert.verified || delta < 1e-6 {
            return cert;
        }
        delta *= 0.5;
    }
}
