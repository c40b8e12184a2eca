//! Episodic meta-training.
//!
//! A task is a handful of regular users, each contributing a support and a
//! query set of next-item examples. The inner loop adapts θ2 by plain
//! gradient steps on the support loss with θ1 frozen; the outer loop
//! updates θ1 and θ2 with Adam on the query loss at the adapted θ2.
//!
//! Meta-gradients come in two orders. First-order treats the adapted θ2 as
//! a constant. Exact mode walks back through the inner steps, replacing
//! every Hessian-vector product by a central difference of gradients.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::data::{sample_negatives, window_ending_at, BehaviorSequence, PreparedDataset};
use crate::diffusion::HopSamples;
use crate::error::{Error, Result};
use crate::loss::RankingExample;
use crate::model::{Model, ENTITIES};
use crate::params::{ModelParams, Partition};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaOrder {
    FirstOrder,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (support) step size.
    pub inner_lr: f64,
    /// Outer Adam step size.
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub weight_decay: f64,
    /// Tasks per outer step.
    pub task_batch: usize,
    pub order: MetaOrder,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Users per task.
    pub n_way: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub max_outer_steps: usize,
    /// Outer steps averaged into one convergence window.
    pub eval_window: usize,
    /// Windows without improvement before stopping.
    pub patience: usize,
    pub min_improvement: f64,
    pub fine_tune_steps: usize,
    /// Step size at meta-test; the inner step size when unset.
    pub fine_tune_lr: Option<f64>,
    /// Length of the central-difference probe in exact mode.
    pub hvp_eps: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 1e-4,
            outer_lr: 1e-2,
            inner_steps: 1,
            weight_decay: 5e-4,
            task_batch: 16,
            order: MetaOrder::FirstOrder,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_way: 15,
            k_support: 5,
            k_query: 15,
            max_outer_steps: 2000,
            eval_window: 10,
            patience: 5,
            min_improvement: 1e-4,
            fine_tune_steps: 5,
            fine_tune_lr: None,
            hvp_eps: 1e-4,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let rates = [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("adam_eps", self.adam_eps),
            ("hvp_eps", self.hvp_eps),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if self.weight_decay < 0.0 {
            return Err("weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err("Adam moments must lie in [0, 1)".into());
        }
        if let Some(lr) = self.fine_tune_lr {
            if !(lr > 0.0) {
                return Err("fine_tune_lr must be positive".into());
            }
        }
        if self.n_way == 0 || self.k_support == 0 || self.k_query == 0 || self.task_batch == 0 {
            return Err("task shape must be non-empty".into());
        }
        if self.eval_window == 0 || self.patience == 0 {
            return Err("eval_window and patience must be positive".into());
        }
        Ok(())
    }

    pub fn fine_tune_rate(&self) -> f64 {
        self.fine_tune_lr.unwrap_or(self.inner_lr)
    }
}

/// One regular user's training history (held-out item removed).
#[derive(Clone, Debug)]
pub struct TrainUser {
    pub user: usize,
    pub history: Vec<usize>,
    pub seen: Arc<BTreeSet<usize>>,
}

/// The users meta-training draws tasks from, with the windowing settings.
#[derive(Clone, Debug)]
pub struct TrainingPool {
    pub users: Vec<TrainUser>,
    pub item_count: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub k_neg: usize,
}

impl TrainingPool {
    pub fn from_dataset(ds: &PreparedDataset, t_min: usize, t_max: usize, k_neg: usize) -> Self {
        let users = ds
            .train_histories()
            .map(|(user, items)| TrainUser {
                user,
                history: items.to_vec(),
                seen: Arc::new(ds.seen.get(&user).cloned().unwrap_or_default()),
            })
            .collect();
        TrainingPool {
            users,
            item_count: ds.item_count(),
            t_min,
            t_max,
            k_neg,
        }
    }

    /// Distinct target positions a user offers: every position preceded by
    /// at least `t_min` items.
    pub fn usable(&self, idx: usize) -> usize {
        self.users[idx].history.len().saturating_sub(self.t_min)
    }

    pub fn eligible(&self, needed: usize) -> Vec<usize> {
        (0..self.users.len()).filter(|&i| self.usable(i) >= needed).collect()
    }

    /// The first `ceil(fraction * n)` users of a seeded shuffle.
    pub fn subset(&self, fraction: f64, seed: u64) -> TrainingPool {
        let n = self.users.len();
        let keep = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
        let mut rng = seed::rng(seed, "pool/subset");
        let mut picked: Vec<usize> = index::sample(&mut rng, n, keep).into_vec();
        picked.sort_unstable();
        TrainingPool {
            users: picked.into_iter().map(|i| self.users[i].clone()).collect(),
            ..self.clone()
        }
    }

    /// Example predicting `history[pos]` of pool user `idx`.
    pub fn example_at<R: Rng + ?Sized>(&self, idx: usize, pos: usize, rng: &mut R) -> Result<RankingExample> {
        let u = &self.users[idx];
        let sequence = window_ending_at(u.user, &u.history, pos, self.t_min, self.t_max, rng);
        let negatives = sample_negatives(&u.seen, self.item_count, self.k_neg, rng)?;
        Ok(RankingExample {
            sequence,
            negatives,
        })
    }

    /// A uniformly drawn training example from a uniformly drawn user.
    pub fn random_example<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RankingExample> {
        let eligible = self.eligible(1);
        if eligible.is_empty() {
            return Err(Error::InsufficientUsers {
                needed: 1,
                available: 0,
            });
        }
        let idx = eligible[rng.random_range(0..eligible.len())];
        let pos = rng.random_range(self.t_min..self.users[idx].history.len());
        self.example_at(idx, pos, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskUser {
    pub user: usize,
    pub support: Vec<RankingExample>,
    pub query: Vec<RankingExample>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaTask {
    pub users: Vec<TaskUser>,
}

impl MetaTask {
    pub fn support(&self) -> Vec<RankingExample> {
        self.users.iter().flat_map(|u| u.support.iter().cloned()).collect()
    }

    pub fn query(&self) -> Vec<RankingExample> {
        self.users.iter().flat_map(|u| u.query.iter().cloned()).collect()
    }
}

/// Draws `n_way` distinct users, then `k_support + k_query` distinct target
/// positions per user; the first `k_support` form the support set.
pub fn sample_task<R: Rng + ?Sized>(pool: &TrainingPool, config: &MetaConfig, rng: &mut R) -> Result<MetaTask> {
    let per_user = config.k_support + config.k_query;
    let eligible = pool.eligible(per_user);
    if eligible.len() < config.n_way {
        return Err(Error::InsufficientUsers {
            needed: config.n_way,
            available: eligible.len(),
        });
    }
    let mut users = Vec::with_capacity(config.n_way);
    for pick in index::sample(rng, eligible.len(), config.n_way) {
        let idx = eligible[pick];
        let positions: Vec<usize> = index::sample(rng, pool.usable(idx), per_user)
            .into_iter()
            .map(|p| p + pool.t_min)
            .collect();
        let mut examples = Vec::with_capacity(per_user);
        for pos in positions {
            examples.push(pool.example_at(idx, pos, rng)?);
        }
        let query = examples.split_off(config.k_support);
        users.push(TaskUser {
            user: pool.users[idx].user,
            support: examples,
            query,
        });
    }
    Ok(MetaTask { users })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Support,
    Query,
}

/// A bilevel objective: a shared input `phi` (fixed during adaptation) and
/// adapted parameters `theta`.
pub trait TaskObjective: Sync {
    /// Loss on one half with gradients w.r.t. `theta` and, when asked,
    /// w.r.t. `phi`.
    fn evaluate(
        &self,
        phi: &ModelParams,
        theta: &ModelParams,
        half: Half,
        want_phi: bool,
    ) -> Result<(f64, Gradients, Gradients)>;
}

/// One task of the recommender; `phi` holds the entity table.
pub struct ModelTask<'a> {
    pub model: &'a Model,
    pub support: Vec<RankingExample>,
    pub query: Vec<RankingExample>,
}

impl<'a> ModelTask<'a> {
    pub fn new(model: &'a Model, task: &MetaTask) -> Self {
        ModelTask {
            model,
            support: task.support(),
            query: task.query(),
        }
    }
}

impl TaskObjective for ModelTask<'_> {
    fn evaluate(
        &self,
        phi: &ModelParams,
        theta: &ModelParams,
        half: Half,
        want_phi: bool,
    ) -> Result<(f64, Gradients, Gradients)> {
        let examples = match half {
            Half::Support => &self.support,
            Half::Query => &self.query,
        };
        let eval = self
            .model
            .examples_loss(phi.tensor(ENTITIES), theta, examples, want_phi)?;
        let mut dphi = Gradients::new();
        if let Some(t) = eval.table {
            dphi.insert(ENTITIES.to_string(), t);
        }
        Ok((eval.loss, eval.theta2, dphi))
    }
}

fn axpy_grads(dst: &mut Gradients, scale: f64, src: &Gradients) {
    for (k, g) in src {
        match dst.get_mut(k) {
            Some(d) => d.axpy(scale, g),
            None => {
                let mut t = Tensor::zeros(g.shape());
                t.axpy(scale, g);
                dst.insert(k.clone(), t);
            }
        }
    }
}

fn grads_norm(g: &Gradients) -> f64 {
    g.values().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// `theta - lr * g` as a new parameter set.
fn stepped(theta: &ModelParams, lr: f64, g: &Gradients) -> ModelParams {
    let mut out = theta.clone();
    out.add_scaled(-lr, g);
    out
}

/// Inner-loop trajectory `theta_0 .. theta_steps` on the support half.
pub fn adapt_trajectory<O: TaskObjective + ?Sized>(
    obj: &O,
    phi: &ModelParams,
    theta: &ModelParams,
    lr: f64,
    steps: usize,
) -> Result<Vec<ModelParams>> {
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(theta.clone());
    for _ in 0..steps {
        let cur = traj.last().expect("non-empty");
        let (_, g, _) = obj.evaluate(phi, cur, Half::Support, false)?;
        let next = stepped(cur, lr, &g);
        traj.push(next);
    }
    Ok(traj)
}

/// Adapted θ2 after `inner_steps` support steps. θ1 never enters: the
/// result is a fresh copy of θ2 only.
pub fn inner_adapt(
    model: &Model,
    table: &Tensor,
    theta2: &ModelParams,
    support: &[RankingExample],
    config: &MetaConfig,
) -> Result<ModelParams> {
    adapt_examples(model, table, theta2, support, config.inner_lr, config.inner_steps)
}

fn adapt_examples(
    model: &Model,
    table: &Tensor,
    theta2: &ModelParams,
    support: &[RankingExample],
    lr: f64,
    steps: usize,
) -> Result<ModelParams> {
    let mut theta = theta2.partition(Partition::Theta2);
    if support.is_empty() {
        return Ok(theta);
    }
    for _ in 0..steps {
        let eval = model.examples_loss(table, &theta, support, false)?;
        theta.add_scaled(-lr, &eval.theta2);
    }
    Ok(theta)
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub query_loss: f64,
    pub d_phi: Gradients,
    pub d_theta: Gradients,
    pub adapted: ModelParams,
}

/// Gradient of the query loss at the adapted parameters w.r.t. the
/// pre-adaptation `phi` and `theta`.
pub fn meta_gradient<O: TaskObjective + ?Sized>(
    obj: &O,
    phi: &ModelParams,
    theta: &ModelParams,
    lr: f64,
    steps: usize,
    order: MetaOrder,
    hvp_eps: f64,
) -> Result<MetaGradient> {
    let traj = adapt_trajectory(obj, phi, theta, lr, steps)?;
    let adapted = traj.last().expect("non-empty").clone();
    let (query_loss, g_theta, g_phi) = obj.evaluate(phi, &adapted, Half::Query, true)?;
    let mut v = g_theta;
    let mut d_phi = g_phi;
    if order == MetaOrder::Exact {
        for theta_k in traj[..steps].iter().rev() {
            let norm = grads_norm(&v);
            if norm == 0.0 {
                break;
            }
            let h = hvp_eps / norm;
            let (_, gp, fp) = obj.evaluate(phi, &stepped(theta_k, -h, &v), Half::Support, true)?;
            let (_, gm, fm) = obj.evaluate(phi, &stepped(theta_k, h, &v), Half::Support, true)?;
            // d/dθ_k of θ_{k+1} = I - lr H, and d/dφ adds -lr * mixed term.
            let c = -lr / (2.0 * h);
            axpy_grads(&mut d_phi, c, &fp);
            axpy_grads(&mut d_phi, -c, &fm);
            axpy_grads(&mut v, c, &gp);
            axpy_grads(&mut v, -c, &gm);
        }
    }
    Ok(MetaGradient {
        query_loss,
        d_phi,
        d_theta: v,
        adapted,
    })
}

/// Adam moments per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    /// One Adam step over every tensor of `params` (a missing gradient is a
    /// zero gradient), then decoupled decay `p -= lr * wd * p`.
    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64, config: &MetaConfig) {
        self.step += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = lr * config.weight_decay;
        for (name, p) in params.iter_mut() {
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).expect("moment").data_mut();
            let v = self.v.get_mut(name).expect("moment").data_mut();
            let g = grads.get(name).map(Tensor::data);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + config.adam_eps);
                *x -= decay * *x;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub query_loss: f64,
}

/// θ1 and θ2 gradients of a batch of tasks, summed over tasks. Tasks run
/// in parallel; the sum is taken in task order.
pub fn task_batch_gradients(
    model: &Model,
    params: &ModelParams,
    hops: &HopSamples,
    tasks: &[MetaTask],
    config: &MetaConfig,
) -> Result<(f64, Gradients)> {
    let (mut tape, table_node) = model.embed_tape(params, hops)?;
    let mut phi = ModelParams::default();
    phi.insert(ENTITIES, tape.value(table_node).clone());
    let theta2 = params.partition(Partition::Theta2);
    let results: Vec<Result<MetaGradient>> = tasks
        .par_iter()
        .map(|task| {
            let obj = ModelTask::new(model, task);
            meta_gradient(
                &obj,
                &phi,
                &theta2,
                config.inner_lr,
                config.inner_steps,
                config.order,
                config.hvp_eps,
            )
        })
        .collect();
    let mut d_theta2 = Gradients::new();
    let mut d_table = Tensor::zeros(phi.tensor(ENTITIES).shape());
    let mut loss = 0.0;
    for r in results {
        let mg = r?;
        loss += mg.query_loss;
        axpy_grads(&mut d_theta2, 1.0, &mg.d_theta);
        if let Some(t) = mg.d_phi.get(ENTITIES) {
            d_table.axpy(1.0, t);
        }
    }
    let mut grads = Model::theta1_gradients(&mut tape, table_node, &d_table)?;
    grads.extend(d_theta2);
    Ok((loss / tasks.len() as f64, grads))
}

/// One outer step: sample tasks and hops, meta-gradient, Adam.
pub fn outer_update(
    model: &Model,
    params: &mut ModelParams,
    adam: &mut AdamState,
    tasks: &[MetaTask],
    hops: &HopSamples,
    config: &MetaConfig,
) -> Result<f64> {
    let (loss, grads) = task_batch_gradients(model, params, hops, tasks, config)?;
    adam.update(params, &grads, config.outer_lr, config);
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub trace: Vec<TracePoint>,
    pub converged: bool,
}

/// Tracks windowed loss means and reports a plateau.
#[derive(Clone, Debug)]
pub struct Plateau {
    window: usize,
    patience: usize,
    min_improvement: f64,
    acc: Vec<f64>,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(window: usize, patience: usize, min_improvement: f64) -> Self {
        Plateau {
            window,
            patience,
            min_improvement,
            acc: Vec::new(),
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one step's loss; true once `patience` consecutive windows
    /// failed to beat the best window by more than `min_improvement`.
    pub fn push(&mut self, loss: f64) -> bool {
        self.acc.push(loss);
        if self.acc.len() < self.window {
            return false;
        }
        let mean = self.acc.iter().sum::<f64>() / self.acc.len() as f64;
        self.acc.clear();
        if mean < self.best - self.min_improvement {
            self.best = mean;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

/// Meta-trains from `init` until the step cap or a loss plateau. Every
/// step's randomness derives from `(seed, step)`.
pub fn meta_train(
    model: &Model,
    pool: &TrainingPool,
    config: &MetaConfig,
    init: ModelParams,
    seed: u64,
) -> Result<TrainOutcome> {
    meta_train_observed(model, pool, config, init, seed, |_, _| Ok(()))
}

/// As [`meta_train`], calling `observe` after every outer step.
pub fn meta_train_observed(
    model: &Model,
    pool: &TrainingPool,
    config: &MetaConfig,
    init: ModelParams,
    seed: u64,
    mut observe: impl FnMut(&TracePoint, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate().map_err(Error::InvalidConfig)?;
    let mut params = init;
    let mut adam = AdamState::default();
    let mut trace = Vec::new();
    let mut plateau = Plateau::new(config.eval_window, config.patience, config.min_improvement);
    let mut converged = false;
    for step in 0..config.max_outer_steps {
        let mut rng = seed::rng(seed, &format!("meta/step/{step}"));
        let hops = model.sample_hops(&mut rng);
        let tasks = (0..config.task_batch)
            .map(|_| sample_task(pool, config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let loss = outer_update(model, &mut params, &mut adam, &tasks, &hops, config)?;
        let point = TracePoint {
            step: step + 1,
            query_loss: loss,
        };
        observe(&point, &params)?;
        trace.push(point);
        if plateau.push(loss) {
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

/// Fine-tuning examples from a short history: one per position after the
/// first, using the longest window up to `t_max`. Negatives are drawn
/// deterministically from `(seed, user)`.
pub fn adaptation_examples(
    user: usize,
    history: &[usize],
    seen: &BTreeSet<usize>,
    item_count: usize,
    t_max: usize,
    k_neg: usize,
    seed: u64,
) -> Result<Vec<RankingExample>> {
    let mut rng = seed::rng(seed, &format!("finetune/user/{user}"));
    (1..history.len())
        .map(|p| {
            let sequence = BehaviorSequence {
                user,
                items: history[p.saturating_sub(t_max)..p].to_vec(),
                target: history[p],
            };
            let negatives = sample_negatives(seen, item_count, k_neg, &mut rng)?;
            Ok(RankingExample {
                sequence,
                negatives,
            })
        })
        .collect()
}

/// `(item, score)` pairs by descending score, ascending item id on ties.
pub fn rank_items(candidates: &[usize], scores: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = candidates.iter().copied().zip(scores.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Adapts a copy of θ2 on `support` for `steps` steps, then ranks the
/// candidates given the scoring window. An empty support scores with the
/// unadapted parameters.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune_and_predict(
    model: &Model,
    table: &Tensor,
    params: &ModelParams,
    support: &[RankingExample],
    window: &[usize],
    candidates: &[usize],
    steps: usize,
    lr: f64,
) -> Result<Vec<(usize, f64)>> {
    let theta = adapt_examples(model, table, params, support, lr, steps)?;
    let scores = model.score_candidates(table, &theta, window, candidates)?;
    Ok(rank_items(candidates, &scores))
}
