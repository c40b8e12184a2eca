//! Fixtures shared by the kernel benchmarks.

use std::sync::Arc;

use metacsr::data::{generate_synthetic_world, PreparedDataset, SplitSpec, SyntheticWorldSpec};
use metacsr::meta::TrainingPool;
use metacsr::model::Model;
use metacsr::params::{ModelConfig, ModelParams};
use metacsr::seed;

pub struct Fixture {
    pub dataset: PreparedDataset,
    pub model: Model,
    pub params: ModelParams,
    pub pool: TrainingPool,
}

/// A generated world of `items` items and `users` users with a model of width `dim`.
pub fn fixture(items: usize, users: usize, dim: usize) -> Fixture {
    let spec = SyntheticWorldSpec {
        item_count: items,
        user_count: users,
        ..SyntheticWorldSpec::default()
    };
    let split = SplitSpec {
        regular_fraction: 0.8,
        ..SplitSpec::default()
    };
    let dataset = PreparedDataset::from_synthetic(generate_synthetic_world(&spec), split, 0).expect("dataset");
    let config = ModelConfig {
        dim,
        neighbor_cap: 20,
        ..ModelConfig::default()
    };
    let model = Model::new(config, Arc::new(dataset.graph()));
    let params = model.init_params(&mut seed::rng(0, "init"));
    let pool = TrainingPool::from_dataset(&dataset, model.config.t_min, model.config.t_max, model.config.k_neg);
    Fixture {
        dataset,
        model,
        params,
        pool,
    }
}
