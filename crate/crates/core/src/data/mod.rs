//! Interaction logs, user splits, windowing, candidates and the synthetic world.

mod dataset;
mod records;
mod sampling;
mod split;
mod synthetic;

pub use dataset::PreparedDataset;
pub use records::{parse_interactions, IdMap, InteractionRecord, LogFormat, ParsedLog};
pub use sampling::{
    build_eval_candidates, sample_negatives, window_ending_at, window_sequence, EvalCandidates,
};
pub use split::{group_histories, split_users, SplitMode, SplitSpec, UserHistory, UserSplit};
pub use synthetic::{generate_synthetic_world, MarkovChain, SyntheticWorld, SyntheticWorldSpec};

use serde::{Deserialize, Serialize};

/// A contiguous window of a user's item ids and the item that followed it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub target: usize,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
