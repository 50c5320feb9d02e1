//! Differentiable counterparts of the logic operators, batched over leading axes.

use super::{ClampBounds, ClampMode, Projection};
use crate::autograd::{Graph, Unary, Var};

/// Attention MLP parameters already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `rows[.., d] · w[d, d]` mapped through the clamp projection.
pub fn project(g: &mut Graph, rows: Var, w: Var, proj: &Projection) -> Var {
    let pre = g.matmul(rows, w, false);
    let pre = match proj.mode {
        ClampMode::Hard => pre,
        ClampMode::Softplus => g.unary(pre, Unary::Softplus),
    };
    g.clamp(pre, proj.bounds.lo, proj.bounds.hi)
}

pub fn negate(g: &mut Graph, x: Var, bounds: ClampBounds) -> Var {
    let r = g.recip(x);
    g.clamp(r, bounds.lo, bounds.hi)
}

/// Per-dimension attention logits for participants `[.., P, d]`.
pub fn attention_logits(g: &mut Graph, alpha: Var, beta: Var, net: AttentionVars) -> Var {
    let x = g.concat(alpha, beta, g.value(alpha).shape().len() - 1);
    let h = g.matmul(x, net.w1, false);
    let h = g.add(h, net.b1);
    let h = g.relu(h);
    let o = g.matmul(h, net.w2, false);
    g.add(o, net.b2)
}

/// Softmax across the participant axis of `[B, P, d]` logits, per dimension.
/// `keep` is `[B, P]`; dropped participants get weight 0.
pub fn participant_softmax(g: &mut Graph, logits: Var, keep: Option<&[bool]>) -> Var {
    let shape = g.value(logits).shape().to_vec();
    let (b, p, d) = (shape[0], shape[1], shape[2]);
    let mask = keep.map(|k| {
        assert_eq!(k.len(), b * p);
        let mut m = Vec::with_capacity(b * d * p);
        for bi in 0..b {
            for _ in 0..d {
                m.extend_from_slice(&k[bi * p..(bi + 1) * p]);
            }
        }
        m
    });
    let t = g.transpose_last2(logits);
    let s = g.softmax(t, mask);
    g.transpose_last2(s)
}

/// Weighted conjunction over the participant axis (axis 1) of `[B, P, d]`.
pub fn conjoin(g: &mut Graph, weights: Var, alpha: Var, beta: Var, bounds: ClampBounds) -> (Var, Var) {
    let wa = g.mul(weights, alpha);
    let wb = g.mul(weights, beta);
    let a = g.sum_axis(wa, 1);
    let b = g.sum_axis(wb, 1);
    (g.clamp(a, bounds.lo, bounds.hi), g.clamp(b, bounds.lo, bounds.hi))
}

/// α / (α + β).
pub fn mean(g: &mut Graph, alpha: Var, beta: Var) -> Var {
    let s = g.add(alpha, beta);
    g.div(alpha, s)
}

/// Σ over the last axis of KL(Beta(target) ‖ Beta(seq)).
pub fn kl_distance(g: &mut Graph, target: (Var, Var), seq: (Var, Var)) -> Var {
    let kl = g.beta_kl(target.0, target.1, seq.0, seq.1);
    let last = g.value(kl).shape().len() - 1;
    g.sum_axis(kl, last)
}
