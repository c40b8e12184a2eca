//! Evaluation queries for the two scenarios and the model-backed scorer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{EvalCandidates, PreparedDataset, UserHistory};
use crate::error::Result;
use crate::meta::{adaptation_examples, fine_tune_and_predict};
use crate::metrics::{EvalQuery, Scorer};
use crate::model::Model;
use crate::params::ModelParams;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// New users, fine-tuned on their kept behaviors before scoring.
    Cold,
    /// Regular users, scored directly on their held-out last behavior.
    Warm,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Cold => "cold",
            Scenario::Warm => "warm",
        }
    }
}

fn queries_from(histories: &[UserHistory], cands: Vec<EvalCandidates>) -> Vec<EvalQuery> {
    histories
        .iter()
        .zip(cands)
        .map(|(h, c)| EvalQuery {
            user: h.user,
            history: h.items[..h.len() - 1].to_vec(),
            candidates: c.candidates,
        })
        .collect()
}

/// One query per user of the scenario with `n_neg` sampled negatives.
pub fn build_queries(ds: &PreparedDataset, scenario: Scenario, n_neg: usize) -> Result<Vec<EvalQuery>> {
    Ok(match scenario {
        Scenario::Cold => queries_from(&ds.new, ds.cold_candidates(n_neg)?),
        Scenario::Warm => queries_from(&ds.regular, ds.warm_candidates(n_neg)?),
    })
}

/// Scores with a trained model, optionally fine-tuning θ2 per user first.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub params: &'a ModelParams,
    /// Entity table computed once from θ1.
    pub table: Tensor,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    pub item_count: usize,
    pub seed: u64,
    pub seen: &'a std::collections::BTreeMap<usize, BTreeSet<usize>>,
}

impl<'a> ModelScorer<'a> {
    /// Builds the scorer with neighbor samples drawn from `(seed, "eval/hops")`.
    pub fn new(
        model: &'a Model,
        params: &'a ModelParams,
        ds: &'a PreparedDataset,
        fine_tune_steps: usize,
        fine_tune_lr: f64,
        seed: u64,
    ) -> Result<Self> {
        let hops = model.sample_hops(&mut seed::rng(seed, "eval/hops"));
        let table = model.entity_table(params, &hops)?;
        Ok(ModelScorer {
            model,
            params,
            table,
            fine_tune_steps,
            fine_tune_lr,
            item_count: ds.item_count(),
            seed,
            seen: &ds.seen,
        })
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, q: &EvalQuery) -> Result<Vec<f64>> {
        let t_max = self.model.config.t_max;
        let window = &q.history[q.history.len().saturating_sub(t_max)..];
        let support = if self.fine_tune_steps == 0 {
            Vec::new()
        } else {
            let empty = BTreeSet::new();
            let seen = self.seen.get(&q.user).unwrap_or(&empty);
            adaptation_examples(
                q.user,
                &q.history,
                seen,
                self.item_count,
                t_max,
                self.model.config.k_neg,
                self.seed,
            )?
        };
        let ranked = fine_tune_and_predict(
            self.model,
            &self.table,
            self.params,
            &support,
            window,
            &q.candidates,
            self.fine_tune_steps,
            self.fine_tune_lr,
        )?;
        // Back to candidate order.
        let mut scores = vec![0.0; q.candidates.len()];
        for (item, s) in ranked {
            let i = q.candidates.iter().position(|&c| c == item).expect("candidate");
            scores[i] = s;
        }
        Ok(scores)
    }
}
