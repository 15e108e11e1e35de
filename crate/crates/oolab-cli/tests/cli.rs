//! Smoke tests for the `oolab` binary: argument handling, a miniature
//! end-to-end run, and resume behavior.

use std::process::Command;

fn oolab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oolab"))
}

fn tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
seeds = [0]

[task]
modalities = 3
classes = 4
latent_dim = 5
private_dim = 3
input_dims = [8, 8, 8]
redundancy = 0.9
noise_sigma = 0.1
n_train = 200
n_test = 64
seed = 0

[model]
feature_dim = 6
extractor_hidden = 10
tail_hidden = 8
expert_hidden = 8
fused_dim = 6
detector_hidden = 10

[train_clean]
lr = 0.03
epochs = 4
batch_size = 50

[train_robust]
lr = 0.03
epochs = 1
batch_size = 50
grad_clip = 20.0
inner_steps = 2

[attack]
epsilon = 0.5
steps = 3

[eval]
appendix_samples = 32
"#,
    )
    .unwrap();
    path
}

#[test]
fn missing_out_dir_is_an_error() {
    let out = oolab().arg("generate-data").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn reproduce_then_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run = dir.path().join("run");

    let out = oolab()
        .args(["reproduce", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run)
        .args(["--jobs", "2"])
        .env("OODLAB_LOG", "error")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("concat"), "summary missing: {stdout}");
    assert!(run.join("report.json").exists());
    assert!(run.join("tables.csv").exists());

    // `report` re-prints the summary from the stored report.
    let out = oolab()
        .args(["report", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run)
        .env("OODLAB_LOG", "error")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("robust"));

    // Rerunning reproduce resumes from markers and succeeds quickly.
    let out = oolab()
        .args(["reproduce", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run)
        .env("OODLAB_LOG", "error")
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn model_subset_flag_limits_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run = dir.path().join("subset");
    let out = oolab()
        .args(["reproduce", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run)
        .args(["--models", "concat,mean,robust"])
        .env("OODLAB_LOG", "error")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(run.join("tables.csv")).unwrap();
    assert!(csv.contains("\nconcat,"));
    assert!(!csv.contains("\ngated,"));
}
