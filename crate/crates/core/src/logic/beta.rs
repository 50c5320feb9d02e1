use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp bound for Beta shape parameters.
pub const EPS_CLAMP: f64 = 0.05;
/// Upper clamp bound for Beta shape parameters.
pub const MAX_SHAPE: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClampBounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ClampBounds {
    fn default() -> Self {
        ClampBounds {
            lo: EPS_CLAMP,
            hi: MAX_SHAPE,
        }
    }
}

impl ClampBounds {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// `d` independent Beta(α, β) distributions.
///
/// Negation is kept as a per-component orientation flag over the stored
/// parameters, so the effective parameters of a negated embedding are the
/// reciprocals of the stored ones and negating twice gives back the stored
/// values unchanged. Clamping rewrites only the components it moves.
#[derive(Clone, Debug)]
pub struct BetaEmbedding {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    alpha_inverted: Vec<bool>,
    beta_inverted: Vec<bool>,
}

impl BetaEmbedding {
    /// Requires equal lengths and finite, strictly positive parameters.
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::Shape(format!(
                "alpha has {} components, beta {}",
                alpha.len(),
                beta.len()
            )));
        }
        if let Some(bad) = alpha.iter().chain(&beta).find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::Invalid(format!("Beta shape parameter {bad} is not positive")));
        }
        let d = alpha.len();
        Ok(BetaEmbedding {
            alpha,
            beta,
            alpha_inverted: vec![false; d],
            beta_inverted: vec![false; d],
        })
    }

    /// Builds an embedding with every component clamped into `bounds`.
    pub fn clamped(alpha: Vec<f64>, beta: Vec<f64>, bounds: ClampBounds) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::Shape(format!(
                "alpha has {} components, beta {}",
                alpha.len(),
                beta.len()
            )));
        }
        let c = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.clamp(bounds.lo, bounds.hi)).collect() };
        let d = alpha.len();
        Ok(BetaEmbedding {
            alpha: c(alpha),
            beta: c(beta),
            alpha_inverted: vec![false; d],
            beta_inverted: vec![false; d],
        })
    }

    pub fn uniform(d: usize) -> Self {
        BetaEmbedding {
            alpha: vec![1.0; d],
            beta: vec![1.0; d],
            alpha_inverted: vec![false; d],
            beta_inverted: vec![false; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    fn eff(x: f64, inverted: bool) -> f64 {
        if inverted {
            1.0 / x
        } else {
            x
        }
    }

    pub fn alpha_at(&self, j: usize) -> f64 {
        Self::eff(self.alpha[j], self.alpha_inverted[j])
    }

    pub fn beta_at(&self, j: usize) -> f64 {
        Self::eff(self.beta[j], self.beta_inverted[j])
    }

    pub fn alpha(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.alpha_at(j)).collect()
    }

    pub fn beta(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.beta_at(j)).collect()
    }

    /// The unconstrained negation operator: componentwise reciprocal of both
    /// shape parameters.
    pub fn negate(&self) -> Self {
        let flip = |f: &[bool]| -> Vec<bool> { f.iter().map(|x| !x).collect() };
        BetaEmbedding {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            alpha_inverted: flip(&self.alpha_inverted),
            beta_inverted: flip(&self.beta_inverted),
        }
    }

    pub fn is_within(&self, bounds: ClampBounds) -> bool {
        (0..self.dim()).all(|j| bounds.contains(self.alpha_at(j)) && bounds.contains(self.beta_at(j)))
    }

    /// Clamps into `bounds`; embeddings already inside are returned as is.
    pub fn clamp(&self, bounds: ClampBounds) -> Self {
        if self.is_within(bounds) {
            return self.clone();
        }
        let mut out = self.clone();
        for j in 0..self.dim() {
            let a = self.alpha_at(j);
            if !bounds.contains(a) {
                out.alpha[j] = a.clamp(bounds.lo, bounds.hi);
                out.alpha_inverted[j] = false;
            }
            let b = self.beta_at(j);
            if !bounds.contains(b) {
                out.beta[j] = b.clamp(bounds.lo, bounds.hi);
                out.beta_inverted[j] = false;
            }
        }
        out
    }

    /// Per-dimension distribution mean α / (α + β).
    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let a = self.alpha_at(j);
                a / (a + self.beta_at(j))
            })
            .collect()
    }
}

impl PartialEq for BetaEmbedding {
    fn eq(&self, other: &Self) -> bool {
        self.dim() == other.dim()
            && (0..self.dim())
                .all(|j| self.alpha_at(j) == other.alpha_at(j) && self.beta_at(j) == other.beta_at(j))
    }
}
