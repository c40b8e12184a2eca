//! A generated world with known sequential structure.
//!
//! Items are split into `chain_count` disjoint blocks. Each block carries a
//! Markov chain: a random cycle through its items where each item moves to
//! one of the next `branching` items on the cycle, with Dirichlet weights.
//! A user holds a mixture over chains and a current item in each chain; at
//! every step they pick a chain from the mixture and advance it one move.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::InteractionRecord;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldSpec {
    pub item_count: usize,
    pub chain_count: usize,
    pub user_count: usize,
    /// Successors per item within its chain.
    pub branching: usize,
    /// Concentration of the successor weights; large means near-uniform.
    pub transition_concentration: f64,
    /// Concentration of each user's chain mixture; small means users stick
    /// to one chain.
    pub mixture_concentration: f64,
    pub length_min: usize,
    pub length_max: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            item_count: 500,
            chain_count: 3,
            user_count: 360,
            branching: 3,
            transition_concentration: 1.0,
            mixture_concentration: 0.3,
            length_min: 12,
            length_max: 60,
            seed: 0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.chain_count == 0 || self.item_count < self.chain_count {
            return Err("need at least one item per chain".into());
        }
        let smallest_block = self.item_count / self.chain_count;
        if self.branching == 0 || self.branching > smallest_block {
            return Err(format!(
                "branching {} must be in 1..={smallest_block}",
                self.branching
            ));
        }
        if self.length_min < 2 || self.length_min > self.length_max {
            return Err(format!(
                "bad length range [{}, {}]",
                self.length_min, self.length_max
            ));
        }
        if !(self.transition_concentration > 0.0 && self.mixture_concentration > 0.0) {
            return Err("concentrations must be positive".into());
        }
        Ok(())
    }
}

/// Sparse transition rows over the items of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    /// Items of this chain in cycle order.
    pub items: Vec<usize>,
    /// `rows[k]` lists `(successor, probability)` for `items[k]`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl MarkovChain {
    pub fn position(&self, item: usize) -> Option<usize> {
        self.items.iter().position(|&i| i == item)
    }

    /// Transition row of `item`, if the item belongs to this chain.
    pub fn row(&self, item: usize) -> Option<&[(usize, f64)]> {
        self.position(item).map(|k| self.rows[k].as_slice())
    }

    /// Most likely successor, lowest id on ties.
    pub fn likeliest_successor(&self, item: usize) -> Option<usize> {
        let row = self.row(item)?;
        row.iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    }

    fn step<R: Rng + ?Sized>(&self, pos: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &self.rows[pos];
        for &(next, p) in row {
            acc += p;
            if u < acc {
                return next;
            }
        }
        row[row.len() - 1].0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub chains: Vec<MarkovChain>,
    /// Per-user chain mixture weights.
    pub mixtures: Vec<Vec<f64>>,
    /// Sorted by `(user, timestamp)`; unrated.
    pub records: Vec<InteractionRecord>,
}

impl SyntheticWorld {
    /// The chain an item belongs to.
    pub fn chain_of(&self, item: usize) -> Option<usize> {
        self.chains.iter().position(|c| c.position(item).is_some())
    }

    /// The user's heaviest chain.
    pub fn dominant_chain(&self, user: usize) -> usize {
        let w = &self.mixtures[user];
        (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a))).unwrap_or(0)
    }

    /// Oracle guess for what follows `window`: the likeliest successor of the
    /// latest window item on the user's dominant chain.
    pub fn oracle_next(&self, user: usize, window: &[usize]) -> Option<usize> {
        let c = self.dominant_chain(user);
        let last = window.iter().rev().find(|&&i| self.chain_of(i) == Some(c))?;
        self.chains[c].likeliest_successor(*last)
    }
}

fn dirichlet<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    // Normalized Gamma draws; the crate's Dirichlet needs a compile-time size.
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 {
            return g.into_iter().map(|x| x / total).collect();
        }
    }
}

pub fn generate_synthetic_world(spec: &SyntheticWorldSpec) -> SyntheticWorld {
    spec.validate().expect("valid synthetic spec");
    let mut chain_rng = seed::rng(spec.seed, "synthetic/chains");
    let mut order: Vec<usize> = (0..spec.item_count).collect();
    order.shuffle(&mut chain_rng);
    let c = spec.chain_count;
    let mut chains = Vec::with_capacity(c);
    for k in 0..c {
        let lo = k * spec.item_count / c;
        let hi = (k + 1) * spec.item_count / c;
        let items = order[lo..hi].to_vec();
        let n = items.len();
        let rows = (0..n)
            .map(|p| {
                let w = dirichlet(spec.branching, spec.transition_concentration, &mut chain_rng);
                (1..=spec.branching)
                    .map(|s| items[(p + s) % n])
                    .zip(w)
                    .collect()
            })
            .collect();
        chains.push(MarkovChain { items, rows });
    }

    let mut mixtures = Vec::with_capacity(spec.user_count);
    let mut records = Vec::new();
    for user in 0..spec.user_count {
        let mut rng = seed::rng(spec.seed, &format!("synthetic/user/{user}"));
        let w = dirichlet(c, spec.mixture_concentration, &mut rng);
        let len = rng.random_range(spec.length_min..=spec.length_max);
        let mut state: Vec<usize> = chains
            .iter()
            .map(|ch| rng.random_range(0..ch.items.len()))
            .collect();
        for t in 0..len {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = c - 1;
            for (j, wj) in w.iter().enumerate() {
                acc += wj;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let next = chains[k].step(state[k], &mut rng);
            state[k] = chains[k].position(next).expect("successor in chain");
            records.push(InteractionRecord {
                user,
                item: next,
                rating: None,
                timestamp: t as i64,
            });
        }
        mixtures.push(w);
    }
    SyntheticWorld {
        spec: spec.clone(),
        chains,
        mixtures,
        records,
    }
}
