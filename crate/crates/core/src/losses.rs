//! Cosine loss in the PPMI embedding space and the binary logistic baseline.

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, FixedLinear};

/// Norm guard for the cosine loss.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient w.r.t. the prediction vector.
    pub gradient: Vec<f64>,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 − ŷᵀy / (‖ŷ‖‖y‖)` with its gradient w.r.t. `ŷ`.
pub fn cosine_loss(y_hat: &[f64], y: &[f64]) -> Result<LossOutput> {
    check_lengths(y_hat.len(), y.len())?;
    let norm_hat = dot(y_hat, y_hat).sqrt();
    let norm = dot(y, y).sqrt();
    if !(norm_hat > NORM_EPSILON && norm > NORM_EPSILON) {
        return Err(Error::DegenerateDirection(NORM_EPSILON));
    }
    let inner = dot(y_hat, y);
    let cos = inner / (norm_hat * norm);
    let a = 1.0 / (norm_hat * norm);
    let b = inner / (norm_hat.powi(3) * norm);
    let gradient = y_hat.iter().zip(y).map(|(&p, &t)| b * p - a * t).collect();
    Ok(LossOutput {
        value: (1.0 - cos).clamp(0.0, 2.0),
        gradient,
    })
}

/// Mean sigmoid cross-entropy over all entries.
pub fn binary_logistic_loss(scores: &[f64], targets: &[bool]) -> Result<LossOutput> {
    check_lengths(scores.len(), targets.len())?;
    let n = scores.len().max(1) as f64;
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(scores.len());
    for (&s, &t) in scores.iter().zip(targets) {
        let t = if t { 1.0 } else { 0.0 };
        // −[t log σ(s) + (1−t) log(1−σ(s))] = max(s,0) − s·t + log(1 + e^{−|s|})
        value += s.max(0.0) - s * t + (-s.abs()).exp().ln_1p();
        gradient.push((sigmoid(s) - t) / n);
    }
    Ok(LossOutput {
        value: value / n,
        gradient,
    })
}

/// The fixed PPMI projection wrapped as a non-trainable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLayer {
    linear: FixedLinear,
}

impl EmbeddingLayer {
    pub fn new(model: &EmbeddingModel) -> Self {
        EmbeddingLayer {
            linear: FixedLinear::from_matrix(model.transform()),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.weight().shape()[1]
    }

    pub fn linear(&self) -> &FixedLinear {
        &self.linear
    }

    /// Cosine loss between projected scores and projected labels; the
    /// gradient is pulled back through `Eᵀ`.
    pub fn loss(&self, pooled_scores: &[f64], label: &[bool]) -> Result<LossOutput> {
        check_lengths(self.dim(), pooled_scores.len())?;
        check_lengths(self.dim(), label.len())?;
        if !label.iter().any(|&b| b) {
            return Err(Error::EmptyLabel);
        }
        let target: Vec<f64> = label.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let projected_target = self.linear.forward(&target)?;
        let projected = self.linear.forward(pooled_scores)?;
        let inner = cosine_loss(&projected, &projected_target)?;
        Ok(LossOutput {
            value: inner.value,
            gradient: self.linear.backward(&inner.gradient)?,
        })
    }
}

/// Cosine loss after projecting both pooled scores and the binary label
/// vector through the embedding `E`.
pub fn embedded_cosine_loss(pooled_scores: &[f64], label: &[bool], model: &EmbeddingModel) -> Result<LossOutput> {
    EmbeddingLayer::new(model).loss(pooled_scores, label)
}
