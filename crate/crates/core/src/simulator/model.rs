use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary classifiers with hand-written gradients of the logistic loss.
///
/// Parameter layouts:
/// * logistic: `[w (dim), b]`;
/// * mlp: `[W1 (hidden × dim, row-major), b1 (hidden), w2 (hidden), b2]`, tanh hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Logistic,
    Mlp {
        hidden: usize,
    },
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
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

impl ModelKind {
    pub fn validate(&self) -> Result<()> {
        if let ModelKind::Mlp { hidden } = self {
            if *hidden == 0 || *hidden > 64 {
                return Err(Error::domain(format!("hidden width {hidden} must be in 1..=64")));
            }
        }
        Ok(())
    }

    pub fn n_params(&self, dim: usize) -> usize {
        match *self {
            ModelKind::Logistic => dim + 1,
            ModelKind::Mlp { hidden } => hidden * dim + 2 * hidden + 1,
        }
    }

    /// Initial parameters: small Gaussian weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![0.0; self.n_params(dim)];
        match *self {
            ModelKind::Logistic => {
                for w in theta.iter_mut().take(dim) {
                    *w = 0.01 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            ModelKind::Mlp { hidden } => {
                let s1 = 1.0 / (dim as f64).sqrt();
                for w in theta.iter_mut().take(hidden * dim) {
                    *w = s1 * rng.sample::<f64, _>(StandardNormal);
                }
                let s2 = 1.0 / (hidden as f64).sqrt();
                let off = hidden * dim + hidden;
                for w in theta.iter_mut().skip(off).take(hidden) {
                    *w = s2 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        theta
    }

    pub fn check_dims(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        let want = self.n_params(x.len());
        if theta.len() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                found: theta.len(),
            });
        }
        Ok(())
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, theta: &[f64], x: &[f64]) -> f64 {
        let d = x.len();
        match *self {
            ModelKind::Logistic => dot(&theta[..d], x) + theta[d],
            ModelKind::Mlp { hidden } => {
                let (w1, rest) = theta.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut z = b2[0];
                for j in 0..hidden {
                    let a = dot(&w1[j * d..(j + 1) * d], x) + b1[j];
                    z += w2[j] * a.tanh();
                }
                z
            }
        }
    }

    pub fn predict_proba(&self, theta: &[f64], x: &[f64]) -> f64 {
        sigmoid(self.logit(theta, x))
    }

    pub fn is_correct(&self, theta: &[f64], x: &[f64], label: u8) -> bool {
        let p = self.predict_proba(theta, x);
        (p >= 0.5) == (label == 1)
    }

    /// Binary cross-entropy `softplus(z) − y·z`.
    pub fn loss(&self, theta: &[f64], x: &[f64], label: u8) -> f64 {
        let z = self.logit(theta, x);
        softplus(z) - label as f64 * z
    }

    /// Gradient of [`ModelKind::loss`] with respect to the parameters.
    pub fn grad(&self, theta: &[f64], x: &[f64], label: u8) -> Vec<f64> {
        let d = x.len();
        let y = label as f64;
        match *self {
            ModelKind::Logistic => {
                let r = sigmoid(self.logit(theta, x)) - y;
                let mut g: Vec<f64> = x.iter().map(|xi| r * xi).collect();
                g.push(r);
                g
            }
            ModelKind::Mlp { hidden } => {
                let (w1, rest) = theta.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let h: Vec<f64> = (0..hidden)
                    .map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).tanh())
                    .collect();
                let z = b2[0] + dot(w2, &h);
                let r = sigmoid(z) - y;
                let mut g = vec![0.0; self.n_params(d)];
                let off_b1 = hidden * d;
                let off_w2 = off_b1 + hidden;
                for j in 0..hidden {
                    let da = r * w2[j] * (1.0 - h[j] * h[j]);
                    for (k, xk) in x.iter().enumerate() {
                        g[j * d + k] = da * xk;
                    }
                    g[off_b1 + j] = da;
                    g[off_w2 + j] = r * h[j];
                }
                g[off_w2 + hidden] = r;
                g
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
