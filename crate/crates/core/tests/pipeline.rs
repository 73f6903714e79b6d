mod common;

use std::fs;

use graft::pipeline::{emit_plot, run_pipeline, run_stage, RunMode, RunReport, Stage, Store, Variant};
use graft::Error;

use common::tiny;

#[test]
fn resumed_run_reproduces_the_report() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path()).unwrap();
    run_pipeline(&cfg, &store, RunMode::Fresh).unwrap();
    let first = fs::read(store.path(Stage::Eval.artifact())).unwrap();

    for s in [Stage::Grpo, Stage::Adapt, Stage::Eval] {
        fs::remove_file(store.path(s.artifact())).unwrap();
    }
    let sft_before = fs::read(store.path(Stage::Sft.artifact())).unwrap();
    run_pipeline(&cfg, &store, RunMode::Resume).unwrap();
    assert_eq!(fs::read(store.path(Stage::Sft.artifact())).unwrap(), sft_before);
    assert_eq!(fs::read(store.path(Stage::Eval.artifact())).unwrap(), first);

    run_pipeline(&cfg, &store, RunMode::From(Stage::Adapt)).unwrap();
    assert_eq!(fs::read(store.path(Stage::Eval.artifact())).unwrap(), first);
}

#[test]
fn missing_upstream_checkpoint_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path()).unwrap();
    let err = run_stage(Stage::Sft, &tiny(), &store).unwrap_err();
    assert!(matches!(&err, Error::StageDependency { missing, .. } if missing == Stage::MakeTrajectories.artifact()));
    assert_eq!(err.exit_code(), 3);
    assert!(!store.exists(Stage::Sft));
}

#[test]
fn checkpoints_from_another_config_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path()).unwrap();
    let cfg = tiny();
    run_stage(Stage::PretrainGnn, &cfg, &store).unwrap();
    let mut other = cfg.clone();
    other.gnn.hidden = 8;
    let err = run_stage(Stage::TrainTokenizer, &other, &store).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("pretrain-gnn"), "{err}");
    // a change that only concerns later stages keeps the checkpoint usable
    let mut later = cfg.clone();
    later.grpo.lr *= 2.0;
    run_stage(Stage::TrainTokenizer, &later, &store).unwrap();
}

#[test]
fn ablations_share_only_unaffected_stages() {
    let full = tiny();
    let with = |v| {
        let mut c = full.clone();
        c.variant = v;
        c
    };
    for v in [Variant::NoAlign, Variant::NoConf] {
        let c = with(v);
        assert_eq!(c.stage_hash(Stage::Sft), full.stage_hash(Stage::Sft));
        assert_ne!(c.stage_hash(Stage::Grpo), full.stage_hash(Stage::Grpo));
    }
    for v in [Variant::NoEncoder, Variant::NoDiff] {
        let c = with(v);
        assert_eq!(c.stage_hash(Stage::PretrainGnn), full.stage_hash(Stage::PretrainGnn));
        assert_ne!(c.stage_hash(Stage::TrainTokenizer), full.stage_hash(Stage::TrainTokenizer));
    }
}

#[test]
fn every_variant_runs_and_is_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path()).unwrap();
    for v in Variant::ALL {
        let mut cfg = tiny();
        cfg.variant = v;
        let report = run_pipeline(&cfg, &store, RunMode::Resume).unwrap();
        assert_eq!(report.variant, v.label());
        assert_eq!(RunReport::load(&store).unwrap().variant, v.label());
        let m = report.metrics;
        assert!((m.delta.micro - (m.adapted.micro - m.baseline.micro)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&m.adapted.micro) && (0.0..=1.0).contains(&m.adapted.macro_));
    }
}

#[test]
fn plot_data_covers_all_three_domains() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path()).unwrap();
    run_pipeline(&cfg, &store, RunMode::Fresh).unwrap();
    let out = dir.path().join("emb.csv");
    emit_plot(&cfg, &store, &out).unwrap();
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 60);
    for domain in ["source", "target", "adapted"] {
        assert_eq!(rows.iter().filter(|r| r.ends_with(&format!(",{domain}"))).count(), 60);
    }
}
