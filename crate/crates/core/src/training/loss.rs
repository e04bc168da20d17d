use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

use super::KeyQueue;

/// Weighting of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the contrastive term; cross-entropy gets `1 - alpha`.
    pub alpha: f64,
    /// Softmax temperature of the contrastive term.
    pub tau: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
        }
        if !(tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { alpha, tau })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, tau: 0.2 }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Symmetric cross-view contrastive term on the graph: `q̃` against the
/// positive `k̄⁺` and the stored s̄ keys, plus `q̄` against `k̃⁺` and the
/// stored s̃ keys. Each term is averaged over the batch.
pub fn contrastive_term(
    g: &mut Graph,
    q_tilde: Var,
    q_bar: Var,
    k_tilde: &Tensor,
    k_bar: &Tensor,
    queue: &KeyQueue,
    tau: f64,
) -> Result<Var> {
    if queue.is_empty() {
        log::warn!("key queue is empty; contrastive denominator holds positives only");
    }
    let bar_negatives = queue.bar_keys();
    let tilde_negatives = queue.tilde_keys();
    let first = g.info_nce(q_tilde, k_bar, bar_negatives.as_ref(), tau)?;
    let second = g.info_nce(q_bar, k_tilde, tilde_negatives.as_ref(), tau)?;
    g.linear(&[(first, 1.0), (second, 1.0)])
}

/// Value of the symmetric contrastive loss for unit-norm queries and keys.
pub fn contrastive_loss(
    q_tilde: &Tensor,
    q_bar: &Tensor,
    k_tilde: &Tensor,
    k_bar: &Tensor,
    queue: &KeyQueue,
    tau: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let qt = g.constant(q_tilde.clone());
    let qb = g.constant(q_bar.clone());
    let loss = contrastive_term(&mut g, qt, qb, k_tilde, k_bar, queue, tau)?;
    Ok(g.value(loss).data()[0])
}

/// Mean negative log-probability of the true class (0-based labels).
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = g.cross_entropy(p, labels)?;
    Ok(g.value(loss).data()[0])
}

pub fn joint_loss(ce: f64, cl: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok((1.0 - alpha) * ce + alpha * cl)
}
