//! Run configuration, artifact layout and the experiment modes behind the CLI.
//!
//! Everything a run writes lives under `output_dir`:
//!
//! ```text
//! config.toml            the effective configuration
//! data/                  prepared dataset
//! checkpoint.ckpt        trained parameters and optimizer state
//! trace.csv              step,query_loss
//! report-<scenario>.json / .csv, users-<scenario>.csv
//! <mode>.record.json     experiment records
//! ```
//!
//! CSV artifacts open with a `# config-hash <hex>` line; JSON artifacts carry
//! the hash in a field.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{joint_train_observed, train_bpr, BprConfig, JointConfig, PopularityModel};
use crate::checkpoint::{quantize, Checkpoint};
use crate::data::{
    generate_synthetic_world, parse_interactions, LogFormat, PreparedDataset, SplitSpec, SyntheticWorldSpec,
};
use crate::error::{Error, Result};
use crate::eval::{build_queries, ModelScorer, Scenario};
use crate::meta::{meta_train_observed, MetaConfig, TracePoint, TrainOutcome, TrainingPool};
use crate::metrics::{auc, default_cutoffs, evaluate, Evaluation, MetricsReport, ReportMeta, Scorer};
use crate::model::Model;
use crate::params::{Ablation, ModelConfig, ModelParams};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// `user::item::rating::timestamp` lines.
    Movielens { path: PathBuf },
    /// `user<TAB>item[<TAB>rating]<TAB>timestamp` lines.
    Tsv { path: PathBuf },
    Synthetic(SyntheticWorldSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainer {
    /// Episodic training with inner adaptation.
    Meta,
    /// Plain mini-batches over all regular-user windows.
    Joint,
}

/// Evaluation settings. They do not enter the config hash, so one checkpoint
/// can be evaluated under several of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub scenario: Scenario,
    pub negatives: usize,
    pub cutoffs: Vec<usize>,
    /// Fine-tune step counts at which `ablate` also records cold AUC.
    pub adaptation_steps: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            scenario: Scenario::Cold,
            negatives: 100,
            cutoffs: default_cutoffs(),
            adaptation_steps: vec![0, 5, 50],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub trainer: Trainer,
    /// Share of regular users available to training.
    pub train_fraction: f64,
    pub data: DataSource,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub joint: JointConfig,
    pub bpr: BprConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    /// The desk profile: d=32, neighbor cap 20, four tasks per outer step,
    /// joint batches matched to the examples of one outer step.
    fn default() -> Self {
        let meta = MetaConfig {
            inner_lr: 0.1,
            task_batch: 4,
            ..MetaConfig::default()
        };
        let joint = JointConfig {
            steps: meta.max_outer_steps,
            batch_size: meta.task_batch * meta.n_way * (meta.k_support + meta.k_query),
        };
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            trainer: Trainer::Meta,
            train_fraction: 1.0,
            data: DataSource::Synthetic(SyntheticWorldSpec::default()),
            split: SplitSpec {
                regular_fraction: 300.0 / 360.0,
                ..SplitSpec::default()
            },
            model: ModelConfig {
                dim: 32,
                neighbor_cap: 20,
                ..ModelConfig::default()
            },
            meta,
            joint,
            bpr: BprConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    /// Full-width embeddings, the reference step sizes and batch of 16 tasks.
    pub fn reference() -> Self {
        let meta = MetaConfig::default();
        RunConfig {
            model: ModelConfig::default(),
            split: SplitSpec::default(),
            joint: JointConfig {
                steps: meta.max_outer_steps,
                batch_size: meta.task_batch * meta.n_way * (meta.k_support + meta.k_query),
            },
            meta,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `dotted.key=value` overrides. Values are read as TOML
    /// literals, falling back to plain strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let last = parts.pop().unwrap_or_default();
            let mut table = &mut root;
            for p in parts {
                table = table
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::InvalidConfig(format!("`{p}` in `{key}` is not a table")))?;
            }
            table.insert(last.to_string(), value);
        }
        *self = root.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if let Err(m) = self.model.validate() {
            return bad(m);
        }
        if let Err(m) = self.meta.validate() {
            return bad(m);
        }
        if let Err(m) = self.split.validate() {
            return bad(m);
        }
        if let DataSource::Synthetic(s) = &self.data {
            if let Err(m) = s.validate() {
                return bad(m);
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        if self.eval.negatives == 0 || self.eval.cutoffs.is_empty() {
            return bad("eval needs negatives and cutoffs".into());
        }
        if self.joint.batch_size == 0 {
            return bad("joint batch_size must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 over the configuration minus `output_dir` and `eval`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.eval = EvalSettings::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.ckpt")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.output_dir.join("trace.csv")
    }

    pub fn report_path(&self, scenario: Scenario, ext: &str) -> PathBuf {
        self.output_dir.join(format!("report-{}.{ext}", scenario.as_str()))
    }

    pub fn record_path(&self, mode: &str) -> PathBuf {
        self.output_dir.join(format!("{mode}.record.json"))
    }

    fn report_meta(&self) -> ReportMeta {
        ReportMeta {
            seed: self.seed,
            config_hash: self.hash(),
            timestamp: None,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style content hash: `blob <len>\0<bytes>` per file, then the sorted
/// `name hash` lines hashed together.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut outer = Sha256::new();
    for p in entries {
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()));
        h.update(&bytes);
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        outer.update(format!("{name} {}\n", hex(&h.finalize())));
    }
    Ok(hex(&outer.finalize()))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn hashed_csv(hash: &str, body: &str) -> String {
    format!("# config-hash {hash}\n{body}")
}

/// Reads a harness CSV, returning its config hash and the remaining text.
pub fn read_hashed_csv(path: &Path) -> Result<(String, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first.strip_prefix("# config-hash ").ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "missing config-hash line".into(),
    })?;
    Ok((hash.to_string(), rest.to_string()))
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("step,query_loss\n");
    for p in trace {
        s.push_str(&format!("{},{}\n", p.step, p.query_loss));
    }
    s
}

/// Cold AUC after a given number of fine-tune steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPoint {
    pub steps: usize,
    pub auc: f64,
}

/// One trained (or fitted) model inside an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    /// The swept value, for sweeps.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub setting: Option<f64>,
    pub report: MetricsReport,
    #[serde(default)]
    pub trace: Vec<TracePoint>,
    #[serde(default)]
    pub adaptation: Vec<AdaptationPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub mode: String,
    pub config_hash: String,
    /// Content hash of the prepared dataset directory.
    pub input_hash: String,
    pub config: RunConfig,
    pub runs: Vec<RunResult>,
    /// Not part of reproducibility.
    pub wall_clock_secs: f64,
}

impl ExperimentRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Reads the configured raw log (or generates the world) and splits it.
pub fn build_dataset(cfg: &RunConfig) -> Result<PreparedDataset> {
    cfg.validate()?;
    match &cfg.data {
        DataSource::Movielens { path } => {
            let log = parse_interactions(path, LogFormat::MovielensDcolon)?;
            PreparedDataset::from_parsed(log, cfg.split.clone(), cfg.seed)
        }
        DataSource::Tsv { path } => {
            let log = parse_interactions(path, LogFormat::Tsv)?;
            PreparedDataset::from_parsed(log, cfg.split.clone(), cfg.seed)
        }
        DataSource::Synthetic(spec) => {
            PreparedDataset::from_synthetic(generate_synthetic_world(spec), cfg.split.clone(), cfg.seed)
        }
    }
}

/// Writes the dataset directory and `config.toml`.
pub fn run_prepare(cfg: &RunConfig) -> Result<PreparedDataset> {
    let ds = build_dataset(cfg)?;
    ds.save(&cfg.data_dir())?;
    write_file(&cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    Ok(ds)
}

fn load_dataset(cfg: &RunConfig) -> Result<PreparedDataset> {
    cfg.validate()?;
    PreparedDataset::load(&cfg.data_dir())
}

fn model_for(config: &ModelConfig, ds: &PreparedDataset) -> Model {
    Model::new(config.clone(), Arc::new(ds.graph()))
}

fn pool_for(cfg: &RunConfig, ds: &PreparedDataset) -> TrainingPool {
    let pool = TrainingPool::from_dataset(ds, cfg.model.t_min, cfg.model.t_max, cfg.model.k_neg);
    if cfg.train_fraction < 1.0 {
        pool.subset(cfg.train_fraction, cfg.seed)
    } else {
        pool
    }
}

/// Trains under `cfg` with `trainer`, calling `observe` after every step.
pub fn train_model(
    cfg: &RunConfig,
    ds: &PreparedDataset,
    trainer: Trainer,
    observe: impl FnMut(&TracePoint, &ModelParams) -> Result<()>,
) -> Result<(Model, TrainOutcome)> {
    let model = model_for(&cfg.model, ds);
    let pool = pool_for(cfg, ds);
    let init = model.init_params(&mut seed::rng(cfg.seed, "init"));
    let outcome = match trainer {
        Trainer::Meta => meta_train_observed(&model, &pool, &cfg.meta, init, cfg.seed, observe)?,
        Trainer::Joint => joint_train_observed(&model, &pool, &cfg.joint, &cfg.meta, init, cfg.seed, observe)?,
    };
    Ok((model, outcome))
}

/// Trains and writes the checkpoint and loss trace.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ds = load_dataset(cfg)?;
    let (_, mut outcome) = train_model(cfg, &ds, cfg.trainer, |_, _| Ok(()))?;
    outcome.params = quantize(&outcome.params);
    let hash = cfg.hash();
    Checkpoint {
        config_hash: hash.clone(),
        params: outcome.params.clone(),
        adam: Some(outcome.adam.clone()),
    }
    .save(&cfg.checkpoint_path())?;
    write_file(&cfg.trace_path(), hashed_csv(&hash, &trace_csv(&outcome.trace)))?;
    write_file(&cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    Ok(outcome)
}

/// Fine-tune steps used when scoring a scenario: cold users adapt, regular
/// users are scored directly.
fn scenario_steps(cfg: &RunConfig, scenario: Scenario) -> usize {
    match scenario {
        Scenario::Cold => cfg.meta.fine_tune_steps,
        Scenario::Warm => 0,
    }
}

fn evaluate_params(
    cfg: &RunConfig,
    ds: &PreparedDataset,
    model: &Model,
    params: &ModelParams,
    scenario: Scenario,
    steps: usize,
) -> Result<Evaluation> {
    let queries = build_queries(ds, scenario, cfg.eval.negatives)?;
    let scorer = ModelScorer::new(model, params, ds, steps, cfg.meta.fine_tune_rate(), cfg.seed)?;
    evaluate(&scorer, &queries)
}

fn report_for(cfg: &RunConfig, eval: &Evaluation, scenario: Scenario) -> Result<MetricsReport> {
    eval.report(&cfg.eval.cutoffs, scenario.as_str(), cfg.report_meta())
}

/// Evaluates the saved checkpoint on `cfg.eval.scenario` and writes the
/// report (JSON and CSV) and per-user results.
pub fn run_evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    let ds = load_dataset(cfg)?;
    let ck = Checkpoint::load(&cfg.checkpoint_path())?;
    ck.check_hash(&cfg.hash())?;
    ck.params
        .check_shapes(&cfg.model)
        .map_err(|m| Error::Checkpoint(format!("does not fit the model: {m}")))?;
    if ck.params.entity_count() != ds.entity_count() {
        return Err(Error::Checkpoint(format!(
            "{} entities, dataset has {}",
            ck.params.entity_count(),
            ds.entity_count()
        )));
    }
    let scenario = cfg.eval.scenario;
    let model = model_for(&cfg.model, &ds);
    let eval = evaluate_params(cfg, &ds, &model, &ck.params, scenario, scenario_steps(cfg, scenario))?;
    let report = report_for(cfg, &eval, scenario)?;
    let hash = cfg.hash();
    write_file(&cfg.report_path(scenario, "json"), report.to_json())?;
    write_file(&cfg.report_path(scenario, "csv"), hashed_csv(&hash, &report.to_csv()))?;
    write_file(
        &cfg.output_dir.join(format!("users-{}.csv", scenario.as_str())),
        hashed_csv(&hash, &eval.per_user_csv()),
    )?;
    Ok(report)
}

/// The rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoDiffusion,
    NoSequence,
    NoMeta,
    Popularity,
    Bpr,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoDiffusion,
        Variant::NoSequence,
        Variant::NoMeta,
        Variant::Popularity,
        Variant::Bpr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDiffusion => "no-diffusion",
            Variant::NoSequence => "no-sequence",
            Variant::NoMeta => "no-meta",
            Variant::Popularity => "popularity",
            Variant::Bpr => "bpr",
        }
    }
}

fn fixed_scorer_result(cfg: &RunConfig, ds: &PreparedDataset, label: &str, scorer: &dyn Scorer) -> Result<RunResult> {
    let scenario = cfg.eval.scenario;
    let queries = build_queries(ds, scenario, cfg.eval.negatives)?;
    let eval = evaluate(scorer, &queries)?;
    Ok(RunResult {
        label: label.to_string(),
        setting: None,
        report: report_for(cfg, &eval, scenario)?,
        trace: Vec::new(),
        adaptation: Vec::new(),
    })
}

/// Trains and evaluates one model. For the cold scenario the AUC after each
/// of `adaptation_steps` fine-tune steps is recorded as well.
fn trained_result(
    cfg: &RunConfig,
    ds: &PreparedDataset,
    label: &str,
    trainer: Trainer,
    adaptation_steps: &[usize],
) -> Result<RunResult> {
    let (model, outcome) = train_model(cfg, ds, trainer, |_, _| Ok(()))?;
    let params = quantize(&outcome.params);
    let scenario = cfg.eval.scenario;
    let eval = evaluate_params(cfg, ds, &model, &params, scenario, scenario_steps(cfg, scenario))?;
    let mut adaptation = Vec::new();
    if scenario == Scenario::Cold {
        for &steps in adaptation_steps {
            let auc = if steps == scenario_steps(cfg, scenario) {
                auc(&eval.queries)?
            } else {
                auc(&evaluate_params(cfg, ds, &model, &params, scenario, steps)?.queries)?
            };
            adaptation.push(AdaptationPoint { steps, auc });
        }
    }
    Ok(RunResult {
        label: label.to_string(),
        setting: None,
        report: report_for(cfg, &eval, scenario)?,
        trace: outcome.trace,
        adaptation,
    })
}

/// Evaluates `variant` on `ds` under `cfg`.
pub fn run_variant(cfg: &RunConfig, ds: &PreparedDataset, variant: Variant) -> Result<RunResult> {
    let label = variant.as_str();
    let steps = &cfg.eval.adaptation_steps;
    let with_ablation = |a: Ablation| {
        let mut c = cfg.clone();
        c.model.ablation = a;
        c
    };
    match variant {
        Variant::Full => trained_result(&with_ablation(Ablation::Full), ds, label, Trainer::Meta, steps),
        Variant::NoDiffusion => trained_result(&with_ablation(Ablation::NoDiffusion), ds, label, Trainer::Meta, steps),
        Variant::NoSequence => trained_result(&with_ablation(Ablation::NoSequence), ds, label, Trainer::Meta, steps),
        Variant::NoMeta => trained_result(&with_ablation(Ablation::Full), ds, label, Trainer::Joint, steps),
        Variant::Popularity => {
            let pool = pool_for(cfg, ds);
            fixed_scorer_result(cfg, ds, label, &PopularityModel::fit(&pool))
        }
        Variant::Bpr => {
            let pool = pool_for(cfg, ds);
            let bpr = train_bpr(&pool, ds.user_count(), &cfg.bpr, cfg.seed)?;
            fixed_scorer_result(cfg, ds, label, &bpr)
        }
    }
}

fn record(cfg: &RunConfig, mode: &str, runs: Vec<RunResult>, started: Instant) -> Result<ExperimentRecord> {
    let rec = ExperimentRecord {
        mode: mode.to_string(),
        config_hash: cfg.hash(),
        input_hash: content_hash(&cfg.data_dir())?,
        config: cfg.clone(),
        runs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_file(&cfg.record_path(mode), rec.to_json())?;
    Ok(rec)
}

/// Every variant on the prepared dataset.
pub fn run_ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let ds = load_dataset(cfg)?;
    let runs = variants.iter().map(|&v| run_variant(cfg, &ds, v)).collect::<Result<_>>()?;
    record(cfg, "ablate", runs, started)
}

/// Meta-trains on 10%, 20%, ..., 100% of the regular users.
pub fn run_sweep_fraction(cfg: &RunConfig) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let ds = load_dataset(cfg)?;
    let mut runs = Vec::new();
    for tenth in 1..=10 {
        let mut c = cfg.clone();
        c.train_fraction = tenth as f64 / 10.0;
        let mut r = trained_result(&c, &ds, "full", Trainer::Meta, &[])?;
        r.setting = Some(c.train_fraction);
        runs.push(r);
    }
    record(cfg, "sweep-fraction", runs, started)
}

pub const LENGTH_SWEEP: [usize; 5] = [5, 10, 15, 20, 25];

/// Meta-trains with each window length in [`LENGTH_SWEEP`].
pub fn run_sweep_length(cfg: &RunConfig) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let ds = load_dataset(cfg)?;
    let mut runs = Vec::new();
    for t in LENGTH_SWEEP {
        let mut c = cfg.clone();
        c.model.t_max = t;
        c.model.t_min = c.model.t_min.min(t);
        let mut r = trained_result(&c, &ds, "full", Trainer::Meta, &[])?;
        r.setting = Some(t as f64);
        runs.push(r);
    }
    record(cfg, "sweep-length", runs, started)
}

/// Tidy CSVs built from experiment records.
#[derive(Clone, Debug, PartialEq)]
pub struct Export {
    /// `mode,label,setting,scenario,metric,N,value`
    pub metrics: String,
    /// `mode,label,setting,step,query_loss`
    pub traces: String,
    /// `mode,label,setting,fine_tune_steps,auc`
    pub adaptation: String,
}

/// Merges records into tidy CSVs. All records must share one config hash.
pub fn export_records(records: &[ExperimentRecord]) -> Result<Export> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.config_hash != first.config_hash) {
            return Err(Error::ConfigMismatch {
                expected: first.config_hash.clone(),
                found: other.config_hash.clone(),
            });
        }
    }
    let mut metrics = String::from("mode,label,setting,scenario,metric,N,value\n");
    let mut traces = String::from("mode,label,setting,step,query_loss\n");
    let mut adaptation = String::from("mode,label,setting,fine_tune_steps,auc\n");
    for rec in records {
        for run in &rec.runs {
            let setting = run.setting.map(|s| s.to_string()).unwrap_or_default();
            let key = format!("{},{},{}", rec.mode, run.label, setting);
            for row in run.report.to_csv().lines().skip(1) {
                metrics.push_str(&format!("{key},{},{row}\n", run.report.scenario));
            }
            for p in &run.trace {
                traces.push_str(&format!("{key},{},{}\n", p.step, p.query_loss));
            }
            for a in &run.adaptation {
                adaptation.push_str(&format!("{key},{},{}\n", a.steps, a.auc));
            }
        }
    }
    Ok(Export {
        metrics,
        traces,
        adaptation,
    })
}

/// Loads records and writes `metrics.csv`, `traces.csv` and `adaptation.csv`
/// into `out_dir`.
pub fn run_export(paths: &[PathBuf], out_dir: &Path) -> Result<Export> {
    let records = paths.iter().map(|p| ExperimentRecord::load(p)).collect::<Result<Vec<_>>>()?;
    let export = export_records(&records)?;
    let hash = records.first().map(|r| r.config_hash.as_str()).unwrap_or("none");
    write_file(&out_dir.join("metrics.csv"), hashed_csv(hash, &export.metrics))?;
    write_file(&out_dir.join("traces.csv"), hashed_csv(hash, &export.traces))?;
    write_file(&out_dir.join("adaptation.csv"), hashed_csv(hash, &export.adaptation))?;
    Ok(export)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        for cfg in [RunConfig::default(), RunConfig::reference()] {
            let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
        let mut cfg = RunConfig::default();
        cfg.data = DataSource::Movielens {
            path: "ratings.dat".into(),
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[model]\ndim = 8\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.dim, 8);
        assert_eq!(cfg.model.t_max, 10);
        assert!(RunConfig::from_toml("sed = 9\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["model.dim=16", "meta.order=\"exact\"", "seed=4", "output_dir=out/x"])
            .unwrap();
        assert_eq!(cfg.model.dim, 16);
        assert_eq!(cfg.meta.order, crate::meta::MetaOrder::Exact);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert!(cfg.apply_overrides(&["model.nope=1"]).is_err());
        assert!(cfg.apply_overrides(&["dim"]).is_err());
    }

    #[test]
    fn hash_ignores_location_and_eval() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.eval.scenario = Scenario::Warm;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn export_refuses_mixed_hashes() {
        let cfg = RunConfig::default();
        let rec = |hash: &str| ExperimentRecord {
            mode: "ablate".into(),
            config_hash: hash.into(),
            input_hash: String::new(),
            config: cfg.clone(),
            runs: Vec::new(),
            wall_clock_secs: 0.0,
        };
        assert!(export_records(&[rec("a"), rec("a")]).is_ok());
        assert!(matches!(
            export_records(&[rec("a"), rec("b")]),
            Err(Error::ConfigMismatch { .. })
        ));
    }
}
