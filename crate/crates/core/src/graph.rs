//! Bipartite user-item interaction graph.
//!
//! Entities share one index space: users occupy `0..user_count`, items
//! occupy `user_count..user_count + item_count`.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionGraph {
    user_count: usize,
    item_count: usize,
    adjacency: Vec<Vec<usize>>,
}

impl InteractionGraph {
    /// Builds a deduplicated, symmetric adjacency from `(user, item)` pairs.
    pub fn build(
        user_count: usize,
        item_count: usize,
        interactions: &[(usize, usize)],
    ) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); user_count + item_count];
        for &(u, i) in interactions {
            if u >= user_count {
                return Err(Error::IdOutOfRange {
                    kind: "user",
                    id: u,
                    count: user_count,
                });
            }
            if i >= item_count {
                return Err(Error::IdOutOfRange {
                    kind: "item",
                    id: i,
                    count: item_count,
                });
            }
            adjacency[u].push(user_count + i);
            adjacency[user_count + i].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Ok(InteractionGraph {
            user_count,
            item_count,
            adjacency,
        })
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn entity_count(&self) -> usize {
        self.user_count + self.item_count
    }

    pub fn item_entity(&self, item: usize) -> usize {
        self.user_count + item
    }

    pub fn is_user(&self, entity: usize) -> bool {
        entity < self.user_count
    }

    pub fn neighbors(&self, entity: usize) -> &[usize] {
        &self.adjacency[entity]
    }

    pub fn degree(&self, entity: usize) -> usize {
        self.adjacency[entity].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency[..self.user_count].iter().map(Vec::len).sum()
    }

    /// All neighbors when `degree <= cap`, otherwise `cap` distinct neighbors
    /// drawn uniformly without replacement. Output is in ascending id order.
    pub fn sample_neighbors<R: Rng + ?Sized>(
        &self,
        entity: usize,
        cap: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        assert!(cap >= 1, "neighbor cap must be at least 1");
        let all = &self.adjacency[entity];
        if all.len() <= cap {
            return all.clone();
        }
        let mut picked: Vec<usize> = index::sample(rng, all.len(), cap)
            .into_iter()
            .map(|k| all[k])
            .collect();
        picked.sort_unstable();
        picked
    }

    /// One neighbor sample per entity, in entity order.
    pub fn sample_all<R: Rng + ?Sized>(&self, cap: usize, rng: &mut R) -> Vec<Vec<usize>> {
        (0..self.entity_count())
            .map(|e| self.sample_neighbors(e, cap, rng))
            .collect()
    }
}
