//! Named model parameters and the θ1/θ2 partition.
//!
//! Every trainable tensor lives in one flat, name-ordered map. The name
//! prefix decides the partition: `theta1/` holds entity embeddings and
//! diffusion weights, `theta2/` holds the sequence encoder and scorer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Aggregator, Gradients};
use crate::tensor::Tensor;

pub const INHERENT: &str = "theta1/inherent";

pub fn conv_name(layer: usize, part: &str) -> String {
    format!("theta1/diffusion/{layer}/{part}")
}

pub const ATT_W3: &str = "theta2/attention/w3";
pub const ATT_W4: &str = "theta2/attention/w4";
pub const ATT_W5: &str = "theta2/attention/w5";
pub const ATT_BW_W3: &str = "theta2/attention_bw/w3";
pub const ATT_BW_W4: &str = "theta2/attention_bw/w4";
pub const ATT_BW_W5: &str = "theta2/attention_bw/w5";
pub const ENC_W6: &str = "theta2/encoder/w6";
pub const ENC_B3: &str = "theta2/encoder/b3";
pub const MLP_HIDDEN_W: &str = "theta2/scorer/hidden_w";
pub const MLP_HIDDEN_B: &str = "theta2/scorer/hidden_b";
pub const MLP_OUT_W: &str = "theta2/scorer/out_w";
pub const MLP_OUT_B: &str = "theta2/scorer/out_b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    InnerProduct,
    Mlp,
}

/// Which modules are active. The two ablations replace a module with its
/// trivial stand-in while keeping every parameter shape unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Inherent embeddings feed the sequence encoder directly.
    NoDiffusion,
    /// The preference vector is the mean of the window's item embeddings.
    NoSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub neighbor_cap: usize,
    pub aggregator: Aggregator,
    pub scorer: ScorerKind,
    /// Separate W3..W5 for the backward attention pass.
    pub untie_directions: bool,
    pub ablation: Ablation,
    pub t_min: usize,
    pub t_max: usize,
    /// Sampled negatives per training positive.
    pub k_neg: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            depth: 2,
            neighbor_cap: 50,
            aggregator: Aggregator::Mean,
            scorer: ScorerKind::InnerProduct,
            untie_directions: false,
            ablation: Ablation::Full,
            t_min: 2,
            t_max: 10,
            k_neg: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 {
            return Err("dim must be positive".into());
        }
        if self.depth == 0 {
            return Err("depth must be at least 1".into());
        }
        if self.neighbor_cap == 0 {
            return Err("neighbor_cap must be at least 1".into());
        }
        if self.t_min < 1 || self.t_min > self.t_max {
            return Err(format!("bad window bounds [{}, {}]", self.t_min, self.t_max));
        }
        if self.k_neg == 0 {
            return Err("k_neg must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Theta1,
    Theta2,
}

pub fn partition_of(name: &str) -> Option<Partition> {
    if name.starts_with("theta1/") {
        Some(Partition::Theta1)
    } else if name.starts_with("theta2/") {
        Some(Partition::Theta2)
    } else {
        None
    }
}

/// A flat name → tensor map. Also used for adapted θ2 copies and for
/// gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data)
}

impl ModelParams {
    /// Random initialization for a graph of `entity_count` entities.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, entity_count: usize, rng: &mut R) -> Self {
        let d = config.dim;
        let dense = |rng: &mut R, out: usize, inp: usize| uniform(rng, out, inp, 1.0 / (inp as f64).sqrt());
        let mut p = ModelParams::default();
        p.insert(INHERENT, uniform(rng, entity_count, d, 1.0 / (d as f64).sqrt()));
        for k in 0..config.depth {
            p.insert(conv_name(k, "w1"), dense(rng, d, d));
            p.insert(conv_name(k, "b1"), Tensor::zeros(&[1, d]));
            p.insert(conv_name(k, "w2"), dense(rng, d, 2 * d));
            p.insert(conv_name(k, "b2"), Tensor::zeros(&[1, d]));
        }
        p.insert(ATT_W3, dense(rng, d, 1));
        p.insert(ATT_W4, dense(rng, d, d));
        p.insert(ATT_W5, dense(rng, d, d));
        if config.untie_directions {
            p.insert(ATT_BW_W3, dense(rng, d, 1));
            p.insert(ATT_BW_W4, dense(rng, d, d));
            p.insert(ATT_BW_W5, dense(rng, d, d));
        }
        p.insert(ENC_W6, dense(rng, d, 2 * d));
        p.insert(ENC_B3, Tensor::zeros(&[1, d]));
        if config.scorer == ScorerKind::Mlp {
            p.insert(MLP_HIDDEN_W, dense(rng, d, 2 * d));
            p.insert(MLP_HIDDEN_B, Tensor::zeros(&[1, d]));
            p.insert(MLP_OUT_W, dense(rng, 1, d));
            p.insert(MLP_OUT_B, Tensor::zeros(&[1, 1]));
        }
        p
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Panics on a missing name; used where the name is one of the constants above.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// The tensors of one partition, as an independent copy.
    pub fn partition(&self, which: Partition) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| partition_of(k) == Some(which))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites the tensors named in `other`.
    pub fn overwrite(&mut self, other: &ModelParams) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// `self[name] += scale * grads[name]` for every gradient present.
    pub fn add_scaled(&mut self, scale: f64, grads: &Gradients) {
        for (name, g) in grads {
            if let Some(t) = self.tensors.get_mut(name) {
                t.axpy(scale, g);
            }
        }
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    /// Number of entity rows in the inherent table.
    pub fn entity_count(&self) -> usize {
        self.tensor(INHERENT).rows()
    }

    /// Checks that every tensor has the shape `config` prescribes.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), String> {
        let reference = ModelParams::init(config, self.entity_count(), &mut crate::seed::rng(0, "shape-check"));
        for (name, t) in &reference.tensors {
            match self.tensors.get(name) {
                None => return Err(format!("missing tensor `{name}`")),
                Some(have) if have.shape() != t.shape() => {
                    return Err(format!(
                        "tensor `{name}` has shape {:?}, config expects {:?}",
                        have.shape(),
                        t.shape()
                    ))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(format!("unexpected tensor `{extra}`"));
        }
        Ok(())
    }
}
