use serde::{Deserialize, Serialize};

use super::{AttentionNet, BetaEmbedding, ClampBounds};
use crate::autograd::{beta_kl_scalar, softplus_scalar};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How pre-activation shape parameters are mapped into the clamp range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampMode {
    /// `clamp(x, lo, hi)`; zero gradient outside the range.
    Hard,
    /// `clamp(softplus(x), lo, hi)`.
    #[default]
    Softplus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub bounds: ClampBounds,
    pub mode: ClampMode,
}

impl Projection {
    pub fn hard() -> Self {
        Projection {
            bounds: ClampBounds::default(),
            mode: ClampMode::Hard,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        let x = match self.mode {
            ClampMode::Hard => x,
            ClampMode::Softplus => softplus_scalar(x),
        };
        x.clamp(self.bounds.lo, self.bounds.hi)
    }
}

/// The d × d matrices mapping ID embeddings to α and β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferParams {
    pub w_alpha: Tensor,
    pub w_beta: Tensor,
}

impl TransferParams {
    pub fn dim(&self) -> usize {
        self.w_alpha.shape()[0]
    }
}

/// Maps each row of `rows` (n × d) to a Beta embedding:
/// α = P(row · W_α), β = P(row · W_β) with P the clamp projection.
pub fn project_to_beta(rows: &Tensor, transfer: &TransferParams, proj: &Projection) -> Result<Vec<BetaEmbedding>> {
    let d = transfer.dim();
    for w in [&transfer.w_alpha, &transfer.w_beta] {
        if w.shape() != [d, d] {
            return Err(Error::Shape(format!("transfer matrix {:?} is not square", w.shape())));
        }
    }
    if rows.shape().len() != 2 || rows.last_dim() != d {
        return Err(Error::Shape(format!(
            "rows {:?} do not match transfer dimension {d}",
            rows.shape()
        )));
    }
    let apply = |row: &[f64], w: &Tensor| -> Vec<f64> {
        (0..d)
            .map(|j| proj.apply((0..d).map(|k| row[k] * w.data()[k * d + j]).sum()))
            .collect()
    };
    (0..rows.rows())
        .map(|i| {
            let row = rows.row(i);
            BetaEmbedding::new(apply(row, &transfer.w_alpha), apply(row, &transfer.w_beta))
        })
        .collect()
}

/// Negation followed by re-clamping into `bounds`.
pub fn negate(v: &BetaEmbedding, bounds: ClampBounds) -> BetaEmbedding {
    v.negate().clamp(bounds)
}

/// Softmax across participants, independently per dimension. Returns n × d
/// weights whose columns each sum to 1.
pub fn attention_weights(participants: &[BetaEmbedding], net: &AttentionNet) -> Result<Vec<Vec<f64>>> {
    if participants.is_empty() {
        return Err(Error::Empty("attention needs at least one participant".into()));
    }
    let d = net.dim();
    if let Some(p) = participants.iter().find(|p| p.dim() != d) {
        return Err(Error::Shape(format!("participant dim {} vs attention dim {d}", p.dim())));
    }
    let logits: Vec<Vec<f64>> = participants
        .iter()
        .map(|p| net.logits(&p.alpha(), &p.beta()))
        .collect();
    Ok(softmax_columns(&logits))
}

pub(crate) fn softmax_columns(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = logits.len();
    let d = logits[0].len();
    let mut w = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mx = logits.iter().map(|l| l[j]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l[j] - mx).exp()).sum();
        for i in 0..n {
            w[i][j] = (logits[i][j] - mx).exp() / total;
        }
    }
    w
}

/// Weighted conjunction: α_out = Σᵢ wᵢ ⊙ αᵢ, β_out = Σᵢ wᵢ ⊙ βᵢ, clamped.
pub fn conjoin(participants: &[BetaEmbedding], weights: &[Vec<f64>], bounds: ClampBounds) -> Result<BetaEmbedding> {
    if participants.is_empty() {
        return Err(Error::Empty("conjunction needs at least one participant".into()));
    }
    let d = participants[0].dim();
    if weights.len() != participants.len() || weights.iter().any(|w| w.len() != d) {
        return Err(Error::Shape(format!(
            "weights must be {} x {d}",
            participants.len()
        )));
    }
    if participants.iter().any(|p| p.dim() != d) {
        return Err(Error::Shape("participants differ in dimension".into()));
    }
    for j in 0..d {
        let sum: f64 = weights.iter().map(|w| w[j]).sum();
        if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|w| w[j] < 0.0) {
            return Err(Error::WeightColumn { column: j, sum });
        }
    }
    let mut alpha = vec![0.0; d];
    let mut beta = vec![0.0; d];
    for (p, w) in participants.iter().zip(weights) {
        for j in 0..d {
            alpha[j] += w[j] * p.alpha_at(j);
            beta[j] += w[j] * p.beta_at(j);
        }
    }
    BetaEmbedding::clamped(alpha, beta, bounds)
}

/// Σ_k KL(Beta(target_k) ‖ Beta(sequence_k)); the target is the first argument.
pub fn kl_distance(target: &BetaEmbedding, sequence: &BetaEmbedding) -> Result<f64> {
    if target.dim() != sequence.dim() {
        return Err(Error::Shape(format!(
            "kl_distance between dims {} and {}",
            target.dim(),
            sequence.dim()
        )));
    }
    Ok((0..target.dim())
        .map(|k| beta_kl_scalar(target.alpha_at(k), target.beta_at(k), sequence.alpha_at(k), sequence.beta_at(k)))
        .sum())
}

pub fn beta_mean(v: &BetaEmbedding) -> Vec<f64> {
    v.mean()
}

/// De Morgan disjunction: ¬C(¬v₁, …, ¬vₙ) with attention over the negations.
pub fn disjoin(participants: &[BetaEmbedding], net: &AttentionNet, bounds: ClampBounds) -> Result<BetaEmbedding> {
    if participants.is_empty() {
        return Err(Error::Empty("disjunction needs at least one participant".into()));
    }
    let negated: Vec<BetaEmbedding> = participants.iter().map(|p| negate(p, bounds)).collect();
    let w = attention_weights(&negated, net)?;
    Ok(negate(&conjoin(&negated, &w, bounds)?, bounds))
}
