//! Pointwise losses `l(x, y, β)` for linear models.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `1 / (1 + e^{-z})`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// `log(1 + exp(−y xᵀβ))`, labels in {−1, +1}.
    Logistic,
    /// `(y − xᵀβ)²`.
    Squared,
}

impl Loss {
    pub fn value(&self, x: &DVector<f64>, y: f64, beta: &DVector<f64>) -> f64 {
        self.value_at_score(x.dot(beta), y)
    }

    /// Loss as a function of the score `s = xᵀβ`.
    pub fn value_at_score(&self, s: f64, y: f64) -> f64 {
        match self {
            Loss::Logistic => softplus(-y * s),
            Loss::Squared => (y - s) * (y - s),
        }
    }

    /// `∂l/∂s`; the β-gradient is `dscore · x` and the x-gradient `dscore · β`.
    pub fn dscore(&self, s: f64, y: f64) -> f64 {
        match self {
            Loss::Logistic => -y * sigmoid(-y * s),
            Loss::Squared => -2.0 * (y - s),
        }
    }

    pub fn grad_beta(&self, x: &DVector<f64>, y: f64, beta: &DVector<f64>) -> DVector<f64> {
        x * self.dscore(x.dot(beta), y)
    }
}
