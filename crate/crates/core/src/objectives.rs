//! Pairwise comparison loss, category cross-entropy and their combination.
//!
//! The scalar functions here work on plain embeddings and return analytic
//! gradients; the `*_node` builders express the same losses inside a
//! [`Graph`] for training.

use crate::autodiff::{Graph, NodeId, Real};
use crate::error::{Error, Result};
use crate::models::{Embedding, CATEGORY_COUNT};

/// `||f||^2`.
pub fn aesthetic_score(f: &[f32]) -> Result<f64> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("embedding".into()));
    }
    Ok(f.iter().map(|&v| (v as f64) * (v as f64)).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    /// `d loss / d f_p = -2 f_p`
    pub grad_p: Vec<f64>,
    /// `d loss / d f_n = 2 f_n`
    pub grad_n: Vec<f64>,
}

/// `-(||f_p||^2 - ||f_n||^2)` for a preferred `p` and a rejected `n` of the
/// same embedding kind.
pub fn paircomp_loss<E: Embedding>(p: &E, n: &E) -> Result<PairLoss> {
    let (fp, fn_) = (p.values(), n.values());
    if fp.len() != fn_.len() {
        return Err(Error::DimMismatch(fp.len(), fn_.len()));
    }
    let d = aesthetic_score(fp)? - aesthetic_score(fn_)?;
    Ok(PairLoss {
        loss: -d,
        grad_p: fp.iter().map(|&v| -2.0 * v as f64).collect(),
        grad_n: fn_.iter().map(|&v| 2.0 * v as f64).collect(),
    })
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let mut grad: Vec<f64> = logits.iter().map(|&l| (l - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskLoss {
    pub loss: f64,
    pub pair: PairLoss,
    /// Gradient with respect to the category logits, already scaled by lambda.
    pub grad_logits: Vec<f64>,
}

/// `paircomp_loss(p, n) + lambda * softmax_xent(logits, label)` with an
/// 8-way category head.
pub fn multitask_loss<E: Embedding>(
    p: &E,
    n: &E,
    logits: &[f64],
    label: usize,
    lambda: f64,
) -> Result<MultiTaskLoss> {
    if logits.len() != CATEGORY_COUNT {
        return Err(Error::DimMismatch(logits.len(), CATEGORY_COUNT));
    }
    let pair = paircomp_loss(p, n)?;
    let (xent, mut grad_logits) = softmax_xent(logits, label)?;
    grad_logits.iter_mut().for_each(|g| *g *= lambda);
    Ok(MultiTaskLoss {
        loss: pair.loss + lambda * xent,
        pair,
        grad_logits,
    })
}

/// Mean over `pairs` of `-(||f_p||^2 - ||f_n||^2)`, where `embeddings` is an
/// `[N, D]` node and each pair holds `(preferred row, rejected row)`.
pub fn paircomp_node<T: Real>(g: &mut Graph<T>, embeddings: NodeId, pairs: &[(usize, usize)]) -> NodeId {
    let scores = g.sq_norm(embeddings);
    let pos = g.gather(scores, pairs.iter().map(|p| p.0).collect());
    let neg = g.gather(scores, pairs.iter().map(|p| p.1).collect());
    let d = g.sub(neg, pos);
    let total = g.sum(d);
    g.scale(total, 1.0 / pairs.len().max(1) as f64)
}

/// Pairwise term plus `lambda` times the mean category cross-entropy of
/// `logits` (`[M, 8]`) against `labels`.
pub fn multitask_node<T: Real>(
    g: &mut Graph<T>,
    fused: NodeId,
    pairs: &[(usize, usize)],
    logits: NodeId,
    labels: Vec<usize>,
    lambda: f64,
) -> NodeId {
    let pair = paircomp_node(g, fused, pairs);
    let xent = g.softmax_xent(logits, labels);
    let weighted = g.scale(xent, lambda);
    g.add(pair, weighted)
}
