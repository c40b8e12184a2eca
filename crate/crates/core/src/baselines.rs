//! Reference scorers: item popularity, BPR matrix factorization, and the
//! recommender trained without episodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::meta::{AdamState, MetaConfig, Plateau, TracePoint, TrainOutcome, TrainingPool};
use crate::metrics::{EvalQuery, Scorer};
use crate::model::Model;
use crate::params::{ModelParams, Partition};
use crate::seed;
use crate::tensor::Tensor;

/// Training-interaction counts per item; the same ranking for every user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PopularityModel {
    pub counts: Vec<u64>,
}

impl PopularityModel {
    pub fn fit(pool: &TrainingPool) -> Self {
        let mut counts = vec![0u64; pool.item_count];
        for u in &pool.users {
            for &i in &u.history {
                counts[i] += 1;
            }
        }
        PopularityModel { counts }
    }
}

impl Scorer for PopularityModel {
    fn score(&self, q: &EvalQuery) -> Result<Vec<f64>> {
        Ok(q.candidates.iter().map(|&i| self.counts[i] as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BprConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
}

impl Default for BprConfig {
    fn default() -> Self {
        BprConfig {
            dim: 32,
            epochs: 20,
            lr: 0.05,
            reg: 1e-3,
        }
    }
}

/// Matrix factorization trained on `-ln sigmoid(x_ui - x_uj)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BprMfModel {
    /// One row per dense user id.
    pub users: Tensor,
    pub items: Tensor,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BprMfModel {
    pub fn init(user_count: usize, item_count: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "bpr/init");
        let mut m = |r: usize| {
            Tensor::matrix(r, dim, (0..r * dim).map(|_| rng.random_range(-0.1..0.1)).collect())
        };
        BprMfModel {
            users: m(user_count),
            items: m(item_count),
        }
    }

    /// Mean `-ln sigmoid(x_ui - x_uj)` over `triples`.
    pub fn loss(&self, triples: &[(usize, usize, usize)]) -> f64 {
        let total: f64 = triples
            .iter()
            .map(|&(u, i, j)| {
                let x = dot(self.users.row_slice(u), self.items.row_slice(i))
                    - dot(self.users.row_slice(u), self.items.row_slice(j));
                crate::autodiff::softplus(-x)
            })
            .sum();
        total / triples.len().max(1) as f64
    }

    fn sgd_step(&mut self, (u, i, j): (usize, usize, usize), lr: f64, reg: f64) {
        let pu = self.users.row_slice(u).to_vec();
        let qi = self.items.row_slice(i).to_vec();
        let qj = self.items.row_slice(j).to_vec();
        let x = dot(&pu, &qi) - dot(&pu, &qj);
        let c = 1.0 - sigmoid(x);
        for (k, p) in self.users.row_slice_mut(u).iter_mut().enumerate() {
            *p += lr * (c * (qi[k] - qj[k]) - reg * pu[k]);
        }
        for (k, q) in self.items.row_slice_mut(i).iter_mut().enumerate() {
            *q += lr * (c * pu[k] - reg * qi[k]);
        }
        for (k, q) in self.items.row_slice_mut(j).iter_mut().enumerate() {
            *q += lr * (-c * pu[k] - reg * qj[k]);
        }
    }

    /// Scores with the user's factor, or for a user without one (all zeros
    /// or out of range) the mean item factor of their history.
    pub fn user_vector(&self, user: usize, history: &[usize]) -> Vec<f64> {
        let dim = self.items.cols();
        if user < self.users.rows() && self.users.row_slice(user).iter().any(|&x| x != 0.0) {
            return self.users.row_slice(user).to_vec();
        }
        let mut v = vec![0.0; dim];
        for &i in history {
            for (a, b) in v.iter_mut().zip(self.items.row_slice(i)) {
                *a += b;
            }
        }
        if !history.is_empty() {
            v.iter_mut().for_each(|x| *x /= history.len() as f64);
        }
        v
    }
}

/// One uniformly drawn (user, positive, negative) triple.
fn draw_triple<R: Rng + ?Sized>(pool: &TrainingPool, users: &[usize], rng: &mut R) -> Result<(usize, usize, usize)> {
    let idx = users[rng.random_range(0..users.len())];
    let u = &pool.users[idx];
    let i = u.history[rng.random_range(0..u.history.len())];
    let j = crate::data::sample_negatives(&u.seen, pool.item_count, 1, rng)?[0];
    Ok((u.user, i, j))
}

/// SGD over sampled triples, one pass of `#interactions` draws per epoch.
/// Rows of users outside the pool stay zero, marking them as cold.
pub fn train_bpr(pool: &TrainingPool, user_count: usize, config: &BprConfig, seed: u64) -> Result<BprMfModel> {
    let mut model = BprMfModel::init(user_count, pool.item_count, config.dim, seed);
    let in_pool: std::collections::BTreeSet<usize> = pool.users.iter().map(|u| u.user).collect();
    for u in 0..user_count {
        if !in_pool.contains(&u) {
            model.users.row_slice_mut(u).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let users: Vec<usize> = (0..pool.users.len()).filter(|&i| !pool.users[i].history.is_empty()).collect();
    if users.is_empty() {
        return Ok(model);
    }
    let draws: usize = pool.users.iter().map(|u| u.history.len()).sum();
    for epoch in 0..config.epochs {
        let mut rng = seed::rng(seed, &format!("bpr/epoch/{epoch}"));
        for _ in 0..draws {
            let t = draw_triple(pool, &users, &mut rng)?;
            model.sgd_step(t, config.lr, config.reg);
        }
    }
    Ok(model)
}

/// A fixed sample of triples for monitoring BPR training loss.
pub fn bpr_triples(pool: &TrainingPool, n: usize, seed: u64) -> Result<Vec<(usize, usize, usize)>> {
    let users: Vec<usize> = (0..pool.users.len()).filter(|&i| !pool.users[i].history.is_empty()).collect();
    let mut rng = seed::rng(seed, "bpr/monitor");
    (0..n).map(|_| draw_triple(pool, &users, &mut rng)).collect()
}

impl Scorer for BprMfModel {
    fn score(&self, q: &EvalQuery) -> Result<Vec<f64>> {
        let v = self.user_vector(q.user, &q.history);
        Ok(q.candidates.iter().map(|&i| dot(&v, self.items.row_slice(i))).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub steps: usize,
    /// Examples per Adam step.
    pub batch_size: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            steps: 2000,
            batch_size: 256,
        }
    }
}

/// The same architecture trained with Adam on uniformly drawn windows of all
/// regular users: no tasks, no inner loop. Step size, decay and stopping
/// rule come from `meta`.
pub fn joint_train_no_meta(
    model: &Model,
    pool: &TrainingPool,
    joint: &JointConfig,
    meta: &MetaConfig,
    init: ModelParams,
    seed: u64,
) -> Result<TrainOutcome> {
    joint_train_observed(model, pool, joint, meta, init, seed, |_, _| Ok(()))
}

/// As [`joint_train_no_meta`], calling `observe` after every step.
pub fn joint_train_observed(
    model: &Model,
    pool: &TrainingPool,
    joint: &JointConfig,
    meta: &MetaConfig,
    init: ModelParams,
    seed: u64,
    mut observe: impl FnMut(&TracePoint, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    meta.validate().map_err(Error::InvalidConfig)?;
    let mut params = init;
    let mut adam = AdamState::default();
    let mut trace = Vec::new();
    let mut plateau = Plateau::new(meta.eval_window, meta.patience, meta.min_improvement);
    let mut converged = false;
    for step in 0..joint.steps {
        let mut rng = seed::rng(seed, &format!("joint/step/{step}"));
        let hops = model.sample_hops(&mut rng);
        let batch = (0..joint.batch_size)
            .map(|_| pool.random_example(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (mut tape, node) = model.embed_tape(&params, &hops)?;
        let table = tape.value(node).clone();
        let theta2 = params.partition(Partition::Theta2);
        let eval = model.examples_loss(&table, &theta2, &batch, true)?;
        let d_table = eval.table.expect("table gradient requested");
        let mut grads = Model::theta1_gradients(&mut tape, node, &d_table)?;
        grads.extend(eval.theta2);
        adam.update(&mut params, &grads, meta.outer_lr, meta);
        let point = TracePoint {
            step: step + 1,
            query_loss: eval.loss,
        };
        observe(&point, &params)?;
        trace.push(point);
        if plateau.push(eval.loss) {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        adam,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_world, PreparedDataset, SplitSpec, SyntheticWorldSpec};
    use crate::params::ModelConfig;
    use std::sync::Arc;

    fn data() -> PreparedDataset {
        let world = generate_synthetic_world(&SyntheticWorldSpec {
            item_count: 90,
            user_count: 50,
            length_min: 20,
            length_max: 30,
            ..SyntheticWorldSpec::default()
        });
        PreparedDataset::from_synthetic(world, SplitSpec::default(), 1).unwrap()
    }

    #[test]
    fn popularity_is_user_independent() {
        let ds = data();
        let pool = TrainingPool::from_dataset(&ds, 2, 10, 1);
        let pop = PopularityModel::fit(&pool);
        let total: u64 = pop.counts.iter().sum();
        assert_eq!(total as usize, pool.users.iter().map(|u| u.history.len()).sum::<usize>());
        let q = |user| EvalQuery {
            user,
            history: vec![user],
            candidates: vec![1, 2, 3],
        };
        assert_eq!(pop.score(&q(0)).unwrap(), pop.score(&q(7)).unwrap());
    }

    #[test]
    fn bpr_zero_epochs_is_init_and_training_lowers_loss() {
        let ds = data();
        let pool = TrainingPool::from_dataset(&ds, 2, 10, 1);
        let cfg = BprConfig {
            epochs: 0,
            ..BprConfig::default()
        };
        let m0 = train_bpr(&pool, ds.user_count(), &cfg, 4).unwrap();
        let mut init = BprMfModel::init(ds.user_count(), ds.item_count(), 32, 4);
        for h in &ds.new {
            init.users.row_slice_mut(h.user).iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(m0.items, init.items);
        assert_eq!(m0.users, init.users);
        let triples = bpr_triples(&pool, 500, 9).unwrap();
        let m10 = train_bpr(&pool, ds.user_count(), &BprConfig { epochs: 10, ..cfg }, 4).unwrap();
        assert!(m10.loss(&triples) < m0.loss(&triples));
    }

    #[test]
    fn cold_user_uses_mean_item_factor() {
        let mut m = BprMfModel::init(2, 3, 2, 0);
        m.users.row_slice_mut(1).iter_mut().for_each(|x| *x = 0.0);
        m.items = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]);
        assert_eq!(m.user_vector(1, &[0, 1]), vec![0.5, 0.5]);
    }

    #[test]
    fn joint_training_is_reproducible_and_keeps_shapes() {
        let ds = data();
        let cfg = ModelConfig {
            dim: 6,
            neighbor_cap: 8,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone(), Arc::new(ds.graph()));
        let pool = TrainingPool::from_dataset(&ds, 2, 10, 1);
        let init = model.init_params(&mut seed::rng(0, "init"));
        let joint = JointConfig {
            steps: 3,
            batch_size: 16,
        };
        let a = joint_train_no_meta(&model, &pool, &joint, &MetaConfig::default(), init.clone(), 2).unwrap();
        let b = joint_train_no_meta(&model, &pool, &joint, &MetaConfig::default(), init, 2).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.params.check_shapes(&cfg).is_ok());
    }
}
