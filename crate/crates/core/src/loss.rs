//! Pairwise ranking objective.
//!
//! Per (positive, negative) pair the loss is `-ln sigmoid(p_pos - p_neg)`
//! where `p` are the model's probabilities, averaged over the negative list
//! and then over the batch. It is evaluated as `softplus(p_neg - p_pos)`.

use crate::autodiff::{softplus, NodeId, Tape};
use crate::data::BehaviorSequence;
use crate::error::DiffError;
use crate::tensor::Tensor;

/// One training positive with its sampled negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingExample {
    pub sequence: BehaviorSequence,
    pub negatives: Vec<usize>,
}

/// Mean over `p_negs` of `-ln sigmoid(p_pos - p_neg)`.
pub fn pairwise_loss(p_pos: f64, p_negs: &[f64]) -> f64 {
    assert!(!p_negs.is_empty(), "at least one negative");
    p_negs.iter().map(|&n| softplus(n - p_pos)).sum::<f64>() / p_negs.len() as f64
}

/// Loss node for a `1 x (1 + k)` row of probabilities whose first entry is
/// the positive.
pub fn pairwise_loss_node(tape: &mut Tape, probs: NodeId) -> Result<NodeId, DiffError> {
    let width = tape.value(probs).cols();
    if width < 2 {
        return Err(DiffError::Shape {
            node: probs.index(),
            op: "pairwise-loss",
            detail: "need a positive and at least one negative".into(),
        });
    }
    let k = width - 1;
    // diff_j = p_pos - p_neg_j as a product with a fixed selector matrix.
    let mut sel = Tensor::zeros(&[width, k]);
    for j in 0..k {
        sel.set(0, j, 1.0);
        sel.set(j + 1, j, -1.0);
    }
    let sel = tape.constant(sel);
    let diff = tape.matmul(probs, sel)?;
    let neg = tape.neg(diff)?;
    let per_pair = tape.softplus(neg)?;
    tape.mean(per_pair)
}
