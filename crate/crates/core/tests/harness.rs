use metacsr::data::SyntheticWorldSpec;
use metacsr::harness::{export_records, run_ablate, run_prepare, DataSource, RunConfig, Variant};
use metacsr::Error;

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.data = DataSource::Synthetic(SyntheticWorldSpec {
        item_count: 80,
        chain_count: 2,
        user_count: 40,
        ..Default::default()
    });
    cfg.eval.negatives = 20;
    cfg
}

#[test]
fn export_refuses_mixed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_prepare(&cfg).unwrap();
    let a = run_ablate(&cfg, &[Variant::Popularity]).unwrap();
    assert_eq!(export_records(&[a.clone(), a.clone()]).unwrap().metrics.lines().count(), 1 + 2 * (2 + 2 * 20));

    let mut other = tiny(dir.path());
    other.seed += 1;
    let mut b = a.clone();
    b.config_hash = other.hash();
    assert!(matches!(export_records(&[a, b]), Err(Error::ConfigMismatch { .. })));
}

#[test]
fn hash_ignores_output_dir_and_eval_settings() {
    let a = tiny(std::path::Path::new("/one"));
    let mut b = tiny(std::path::Path::new("/two"));
    b.eval.negatives = 50;
    assert_eq!(a.hash(), b.hash());
    b.model.dim = 16;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn popularity_is_stable_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_prepare(&cfg).unwrap();
    let a = run_ablate(&cfg, &[Variant::Popularity]).unwrap();
    let b = run_ablate(&cfg, &[Variant::Popularity]).unwrap();
    assert_eq!(a.runs[0].report, b.runs[0].report);
    assert_eq!(a.input_hash, b.input_hash);
}
