//! The full recommender: θ1 produces the entity table, θ2 turns a window of
//! item embeddings into scores.
//!
//! The two halves live on separate tapes. The θ1 tape maps parameters to
//! the `|V| x d` table; the θ2 tape takes that table as a leaf. Gradients
//! w.r.t. the table from any number of θ2 tapes are summed and pushed back
//! through the θ1 tape once.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::diffusion::{bind_and_diffuse, sample_hops, HopSamples};
use crate::encoder::{encode_sequence, score_logits, SeqNodes};
use crate::error::{DiffError, Result};
use crate::graph::InteractionGraph;
use crate::loss::{pairwise_loss_node, RankingExample};
use crate::params::{Ablation, ModelConfig, ModelParams, INHERENT};
use crate::tensor::Tensor;

/// Key of the entity table when it is a leaf of a θ2 tape.
pub const ENTITIES: &str = "entities";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: Arc<InteractionGraph>,
}

/// Loss of a batch of examples with its gradients.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub theta2: Gradients,
    /// Gradient w.r.t. the entity table, when requested.
    pub table: Option<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, graph: Arc<InteractionGraph>) -> Self {
        Model { config, graph }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        ModelParams::init(&self.config, self.graph.entity_count(), rng)
    }

    pub fn item_entity(&self, item: usize) -> usize {
        self.graph.item_entity(item)
    }

    pub fn sample_hops<R: Rng + ?Sized>(&self, rng: &mut R) -> HopSamples {
        sample_hops(&self.graph, self.config.depth, self.config.neighbor_cap, rng)
    }

    /// θ1 forward on a fresh tape. Returns the tape and the table node.
    pub fn embed_tape(&self, params: &ModelParams, hops: &HopSamples) -> Result<(Tape, NodeId)> {
        let mut tape = Tape::new();
        let node = match self.config.ablation {
            Ablation::NoDiffusion => tape.param(INHERENT, params.tensor(INHERENT).clone()),
            _ => bind_and_diffuse(&mut tape, params, self.config.depth, hops, self.config.aggregator)?,
        };
        Ok((tape, node))
    }

    pub fn entity_table(&self, params: &ModelParams, hops: &HopSamples) -> Result<Tensor> {
        let (tape, node) = self.embed_tape(params, hops)?;
        Ok(tape.value(node).clone())
    }

    /// Pushes a table gradient back to θ1.
    pub fn theta1_gradients(tape: &mut Tape, table: NodeId, d_table: &Tensor) -> Result<Gradients> {
        tape.zero_grad();
        Ok(tape.backward_with_seed(table, d_table)?)
    }

    /// Preference vector node for a window of item ids.
    fn preference_node(
        &self,
        tape: &mut Tape,
        table: NodeId,
        nodes: &SeqNodes,
        window: &[usize],
    ) -> std::result::Result<NodeId, DiffError> {
        let idx: Vec<usize> = window.iter().map(|&i| self.item_entity(i)).collect();
        let x = tape.lookup(table, idx)?;
        match self.config.ablation {
            Ablation::NoSequence => tape.mean_axis(x, 0),
            _ => encode_sequence(tape, x, nodes),
        }
    }

    fn probabilities_node(
        &self,
        tape: &mut Tape,
        table: NodeId,
        nodes: &SeqNodes,
        window: &[usize],
        candidates: &[usize],
    ) -> std::result::Result<NodeId, DiffError> {
        let s_u = self.preference_node(tape, table, nodes, window)?;
        let idx: Vec<usize> = candidates.iter().map(|&i| self.item_entity(i)).collect();
        let items = tape.lookup(table, idx)?;
        let logits = score_logits(tape, s_u, items, nodes.mlp.as_ref())?;
        tape.sigmoid(logits)
    }

    /// Mean pairwise loss over `examples`, evaluated with the table fixed.
    /// Examples with an empty window are skipped; an empty batch costs 0.
    pub fn examples_loss(
        &self,
        table: &Tensor,
        theta2: &ModelParams,
        examples: &[RankingExample],
        want_table_grad: bool,
    ) -> Result<LossEval> {
        let mut tape = Tape::new();
        let t = if want_table_grad {
            tape.param(ENTITIES, table.clone())
        } else {
            tape.constant(table.clone())
        };
        let nodes = SeqNodes::bind(&mut tape, theta2);
        let mut losses = Vec::with_capacity(examples.len());
        for ex in examples {
            if ex.sequence.is_empty() || ex.negatives.is_empty() {
                continue;
            }
            let mut cands = Vec::with_capacity(1 + ex.negatives.len());
            cands.push(ex.sequence.target);
            cands.extend_from_slice(&ex.negatives);
            let probs = self.probabilities_node(&mut tape, t, &nodes, &ex.sequence.items, &cands)?;
            losses.push(pairwise_loss_node(&mut tape, probs)?);
        }
        if losses.is_empty() {
            return Ok(LossEval {
                loss: 0.0,
                theta2: Gradients::new(),
                table: want_table_grad.then(|| Tensor::zeros(table.shape())),
            });
        }
        let all = tape.concat(&losses, 1)?;
        let loss = tape.mean(all)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let table_grad = if want_table_grad {
            Some(grads.remove(ENTITIES).unwrap_or_else(|| Tensor::zeros(table.shape())))
        } else {
            None
        };
        Ok(LossEval {
            loss: value,
            theta2: grads,
            table: table_grad,
        })
    }

    /// Probabilities `sigmoid(F(s_u, i))` for every candidate.
    pub fn score_candidates(
        &self,
        table: &Tensor,
        theta2: &ModelParams,
        window: &[usize],
        candidates: &[usize],
    ) -> Result<Vec<f64>> {
        if window.is_empty() {
            // No behavior to encode: a zero preference scores every item alike.
            return Ok(vec![0.5; candidates.len()]);
        }
        let mut tape = Tape::new();
        let t = tape.constant(table.clone());
        let nodes = SeqNodes::bind(&mut tape, theta2);
        let probs = self.probabilities_node(&mut tape, t, &nodes, window, candidates)?;
        Ok(tape.value(probs).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BehaviorSequence;
    use crate::params::Partition;
    use crate::seed;

    fn tiny() -> (Model, ModelParams) {
        let graph = InteractionGraph::build(2, 4, &[(0, 0), (0, 1), (1, 1), (1, 2), (1, 3)]).unwrap();
        let config = ModelConfig {
            dim: 4,
            depth: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(config, Arc::new(graph));
        let params = model.init_params(&mut seed::rng(0, "init"));
        (model, params)
    }

    fn example(items: Vec<usize>, target: usize, negs: Vec<usize>) -> RankingExample {
        RankingExample {
            sequence: BehaviorSequence {
                user: 0,
                items,
                target,
            },
            negatives: negs,
        }
    }

    #[test]
    fn single_pair_matches_scalar_loss() {
        let (model, params) = tiny();
        let hops = model.sample_hops(&mut seed::rng(0, "hops"));
        let table = model.entity_table(&params, &hops).unwrap();
        let theta2 = params.partition(Partition::Theta2);
        let ex = example(vec![0, 1], 2, vec![3]);
        let probs = model.score_candidates(&table, &theta2, &[0, 1], &[2, 3]).unwrap();
        let want = crate::loss::pairwise_loss(probs[0], &probs[1..]);
        let got = model.examples_loss(&table, &theta2, &[ex], false).unwrap();
        assert!((got.loss - want).abs() < 1e-14);
    }

    #[test]
    fn duplicated_example_keeps_mean() {
        let (model, params) = tiny();
        let hops = model.sample_hops(&mut seed::rng(0, "hops"));
        let table = model.entity_table(&params, &hops).unwrap();
        let theta2 = params.partition(Partition::Theta2);
        let ex = example(vec![3, 1, 0], 2, vec![1]);
        let one = model.examples_loss(&table, &theta2, &[ex.clone()], true).unwrap();
        let two = model.examples_loss(&table, &theta2, &[ex.clone(), ex], true).unwrap();
        assert!((one.loss - two.loss).abs() < 1e-14);
        for (k, g) in &one.theta2 {
            assert!(g.max_abs_diff(&two.theta2[k]) < 1e-14, "{k}");
        }
        assert!(one.table.unwrap().max_abs_diff(&two.table.unwrap()) < 1e-14);
    }

    #[test]
    fn no_diffusion_table_is_inherent() {
        let (mut model, params) = tiny();
        model.config.ablation = Ablation::NoDiffusion;
        let hops = model.sample_hops(&mut seed::rng(0, "hops"));
        let table = model.entity_table(&params, &hops).unwrap();
        assert_eq!(&table, params.tensor(INHERENT));
    }

    #[test]
    fn empty_window_scores_half() {
        let (model, params) = tiny();
        let table = params.tensor(INHERENT).clone();
        let s = model.score_candidates(&table, &params, &[], &[0, 1]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }
}
