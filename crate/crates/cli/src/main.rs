use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use metacsr::eval::Scenario;
use metacsr::harness::{self, RunConfig, Variant};

#[derive(Parser)]
#[command(name = "metacsr", version, about = "Cold-start sequential recommendation with meta-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; the desk profile when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Base profile for keys the configuration file leaves out.
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any key, e.g. `--set meta.max_outer_steps=300`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Cold,
    Warm,
}

#[derive(Subcommand)]
enum Command {
    /// Parse or generate the interaction log and write the split dataset.
    Prepare(Common),
    /// Train on the prepared dataset; writes the checkpoint and loss trace.
    Train(Common),
    /// Evaluate the checkpoint; writes report JSON/CSV and per-user CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
    },
    /// Train and evaluate the model variants and baselines.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of full,no-diffusion,no-sequence,no-meta,popularity,bpr.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Train on 10%..100% of the regular users.
    SweepFraction(Common),
    /// Train with window lengths 5, 10, 15, 20, 25.
    SweepLength(Common),
    /// Merge experiment records into tidy CSVs.
    Export {
        /// `*.record.json` files.
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match c.profile {
        Profile::Desk => RunConfig::default(),
        Profile::Reference => RunConfig::reference(),
    };
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
        let mut overrides = Vec::new();
        flatten("", &toml::Value::Table(file), &mut overrides);
        cfg.apply_overrides(&overrides)
            .with_context(|| format!("applying {}", path.display()))?;
    }
    cfg.apply_overrides(&c.overrides)?;
    if let Some(o) = &c.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Leaf `key=value` pairs of a TOML value, so a file only overrides the
/// keys it names and the profile supplies the rest.
fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) if !t.contains_key("kind") || prefix.is_empty() => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push(format!("{prefix}={}", inline(v))),
    }
}

fn inline(v: &toml::Value) -> String {
    match v {
        toml::Value::Table(t) => {
            let parts: Vec<String> = t.iter().map(|(k, v)| format!("{k} = {}", inline(v))).collect();
            format!("{{ {} }}", parts.join(", "))
        }
        other => other.to_string(),
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Ok(Variant::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| {
            Variant::ALL
                .into_iter()
                .find(|v| v.as_str() == n.trim())
                .with_context(|| format!("unknown variant `{n}`"))
        })
        .collect()
}

fn print_record(rec: &harness::ExperimentRecord) {
    for run in &rec.runs {
        let setting = run.setting.map(|s| format!(" {s}")).unwrap_or_default();
        println!(
            "{}{}: auc {:.4} map {:.4} hit@10 {:.4} ndcg@10 {:.4}",
            run.label,
            setting,
            run.report.auc,
            run.report.map,
            at(&run.report.cutoffs, &run.report.hit, 10),
            at(&run.report.cutoffs, &run.report.ndcg, 10),
        );
    }
}

fn at(cutoffs: &[usize], values: &[f64], n: usize) -> f64 {
    cutoffs.iter().position(|&c| c == n).map_or(f64::NAN, |i| values[i])
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Prepare(c) => {
            let cfg = load_config(&c)?;
            let ds = harness::run_prepare(&cfg)?;
            println!(
                "{} users ({} regular, {} new), {} items -> {}",
                ds.user_count(),
                ds.regular.len(),
                ds.new.len(),
                ds.item_count(),
                cfg.data_dir().display()
            );
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = harness::run_train(&cfg)?;
            let last = out.trace.last().map_or(f64::NAN, |p| p.query_loss);
            println!(
                "{} steps (converged: {}), final loss {last:.4} -> {}",
                out.trace.len(),
                out.converged,
                cfg.checkpoint_path().display()
            );
        }
        Command::Eval { common, scenario } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = scenario {
                cfg.eval.scenario = match s {
                    ScenarioArg::Cold => Scenario::Cold,
                    ScenarioArg::Warm => Scenario::Warm,
                };
            }
            let r = harness::run_evaluate(&cfg)?;
            println!(
                "{} ({} users): auc {:.4} map {:.4} hit@10 {:.4} ndcg@10 {:.4}",
                r.scenario,
                r.user_count,
                r.auc,
                r.map,
                at(&r.cutoffs, &r.hit, 10),
                at(&r.cutoffs, &r.ndcg, 10)
            );
        }
        Command::Ablate { common, variants } => {
            let cfg = load_config(&common)?;
            print_record(&harness::run_ablate(&cfg, &parse_variants(&variants)?)?);
        }
        Command::SweepFraction(c) => print_record(&harness::run_sweep_fraction(&load_config(&c)?)?),
        Command::SweepLength(c) => print_record(&harness::run_sweep_length(&load_config(&c)?)?),
        Command::Export { records, out } => {
            harness::run_export(&records, &out)?;
            println!("wrote metrics.csv, traces.csv, adaptation.csv -> {}", out.display());
        }
    }
    Ok(())
}
