//! End-to-end pipeline behavior on a miniature configuration: staging,
//! resume markers, snapshot round-trips, and report determinism.

mod common;

use oolab::config::RunConfig;
use oolab::pipeline::Pipeline;
use oolab::report::report_hash;
use oolab::training::ScheduleKind;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::reference();
    cfg.seeds = vec![0];
    cfg.task = common::small_task(0);
    cfg.task.n_train = 320;
    cfg.task.n_test = 96;
    cfg.model = common::small_dims();
    cfg.train_clean.epochs = 6;
    cfg.train_clean.lr = 0.03;
    cfg.train_robust.epochs = 2;
    cfg.train_robust.lr = 0.03;
    cfg.train_robust.inner_steps = Some(3);
    cfg.train_robust.schedule = ScheduleKind::Alternating;
    cfg.attack.epsilon = 0.5;
    cfg.attack.steps = 4;
    cfg.eval.appendix_samples = 48;
    cfg
}

#[test]
fn reproduce_emits_all_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run_a = dir.path().join("a");
    let pipeline = Pipeline::new(tiny_config(), &run_a).unwrap();
    let report = pipeline.cmd_reproduce().unwrap();

    // Run-directory contract.
    for artifact in [
        "config.toml",
        "data/seed0/train.bin",
        "data/seed0/test.bin",
        "ckpt/seed0/concat.ckpt",
        "ckpt/seed0/robust.ckpt",
        "ckpt/seed0/oracle-2.ckpt",
        "curves/seed0/robust.csv",
        "attacks/seed0/concat.adaptive.m0.bin",
        "attacks/seed0/transfer.m2.bin",
        "report.json",
        "tables.csv",
        "run_meta.json",
    ] {
        assert!(run_a.join(artifact).exists(), "missing {artifact}");
    }

    // The snapshot re-parses to an equal configuration.
    let snapshot = RunConfig::load(&run_a.join("config.toml")).unwrap();
    assert_eq!(snapshot, tiny_config());

    // tables.csv covers every requested model row.
    let csv = std::fs::read_to_string(run_a.join("tables.csv")).unwrap();
    for model in [
        "concat", "mean", "early", "gated", "lel", "robust", "robust-aligned", "end2end-at",
        "oracle",
    ] {
        assert!(
            csv.contains(&format!("\n{model},")) || csv.starts_with(&format!("{model},")),
            "csv lacks rows for {model}"
        );
    }

    // A second identical run produces a byte-identical report.
    let run_b = dir.path().join("b");
    let pipeline_b = Pipeline::new(tiny_config(), &run_b).unwrap();
    let report_b = pipeline_b.cmd_reproduce().unwrap();
    assert_eq!(
        report_hash(&report).unwrap(),
        report_hash(&report_b).unwrap()
    );
    assert_eq!(
        std::fs::read(run_a.join("report.json")).unwrap(),
        std::fs::read(run_b.join("report.json")).unwrap()
    );
}

#[test]
fn stages_resume_from_done_markers() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let pipeline = Pipeline::new(tiny_config(), &run).unwrap();
    pipeline.cmd_generate().unwrap();
    let train_bytes = std::fs::read(run.join("data/seed0/train.bin")).unwrap();

    // Corrupt the dataset, then regenerate: the done-marker short-circuits
    // and the corrupted file stays (resume never silently redoes work)...
    std::fs::write(run.join("data/seed0/train.bin"), b"garbage").unwrap();
    pipeline.cmd_generate().unwrap();
    assert_eq!(
        std::fs::read(run.join("data/seed0/train.bin")).unwrap(),
        b"garbage"
    );

    // ...and the next stage reports the corruption with its stage name.
    let err = pipeline.cmd_train().unwrap_err().to_string();
    assert!(err.contains("train"), "unexpected error: {err}");

    // Removing the marker regenerates the data bit-identically.
    std::fs::remove_file(run.join("markers/generate.seed0.done")).unwrap();
    pipeline.cmd_generate().unwrap();
    assert_eq!(
        std::fs::read(run.join("data/seed0/train.bin")).unwrap(),
        train_bytes
    );
}

#[test]
fn mismatched_config_in_existing_run_dir_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    Pipeline::new(tiny_config(), &run).unwrap();
    let mut other = tiny_config();
    other.attack.epsilon = 0.9;
    assert!(Pipeline::new(other, &run).is_err());
}

#[test]
fn zero_epoch_models_sit_at_chance_with_detection_near_floor() {
    let mut cfg = tiny_config();
    cfg.train_clean.epochs = 0;
    cfg.train_robust.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let pipeline = Pipeline::new(cfg, &run).unwrap();
    let report = pipeline.cmd_reproduce().unwrap();
    let seed_report = &report.per_seed[0];
    for (name, metrics) in &seed_report.models {
        if let Some(clean) = metrics.clean_acc {
            assert!(
                (clean - 0.25).abs() < 0.2,
                "untrained {name} clean accuracy {clean}"
            );
        }
        if let Some(det) = &metrics.detection {
            assert!(
                (det.pooled - 0.25).abs() < 0.2,
                "untrained {name} pooled detection {}",
                det.pooled
            );
        }
    }
}
