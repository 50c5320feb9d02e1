//! Probabilistic logic over Beta embeddings: projection from ID embeddings,
//! negation, attention-weighted conjunction, De Morgan disjunction, and the
//! KL distance used to compare a reasoned sequence with an item.
//!
//! Every operator has a plain-value form here and a differentiable form in
//! [`graph`] that the model trains through.

mod attention;
mod beta;
pub mod graph;
mod ops;

pub use attention::AttentionNet;
pub use beta::{BetaEmbedding, ClampBounds, EPS_CLAMP, MAX_SHAPE};
pub use ops::{
    attention_weights, beta_mean, conjoin, disjoin, kl_distance, negate, project_to_beta, ClampMode,
    Projection, TransferParams,
};
