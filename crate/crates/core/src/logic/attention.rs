use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// MLP from concatenated (α ⊕ β) in R^{2d} to per-dimension logits in R^d:
/// one hidden layer of width 2d with ReLU, linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AttentionNet {
    pub fn init<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        AttentionNet {
            w1: Tensor::new(vec![2 * d, 2 * d], sample(4 * d * d)),
            b1: Tensor::zeros(&[2 * d]),
            w2: Tensor::new(vec![2 * d, d], sample(2 * d * d)),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Embedding dimension `d`.
    pub fn dim(&self) -> usize {
        self.b2.len()
    }

    pub fn logits(&self, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let h2 = 2 * d;
        let input: Vec<f64> = alpha.iter().chain(beta).copied().collect();
        let hidden: Vec<f64> = (0..h2)
            .map(|j| {
                let s: f64 = (0..h2).map(|i| input[i] * self.w1.data()[i * h2 + j]).sum();
                (s + self.b1.data()[j]).max(0.0)
            })
            .collect();
        (0..d)
            .map(|j| (0..h2).map(|i| hidden[i] * self.w2.data()[i * d + j]).sum::<f64>() + self.b2.data()[j])
            .collect()
    }
}
