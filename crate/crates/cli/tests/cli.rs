use std::path::{Path, PathBuf};
use std::process::Command;

use mbj::train::{Task, Variant};
use mbj_cli::compare::compare;
use mbj_cli::config::{CifarSpec, DatasetSpec, ExperimentConfig, JitterConfig};
use mbj_cli::run::{self, read_summary};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mbj"));
    c.env("RUST_LOG", "error");
    c
}

const TINY: &str = r#"
task = "classification"

[dataset.synthetic]
classes = 3
dim = 8
max_count = 60
reduced_class = 2
reduced_count = 8
test_per_class = 20
scale = 0.4

[model]
hidden_dim = 16
embedding_dim = 8

[schedule]
phase1_epochs = 3
phase2_epochs = 2
phase1_lr = 0.05
lr_milestones = []
batch_size = 32
augment = false
"#;

fn tiny(output: &Path, variant: Variant) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(TINY).unwrap();
    c.output = output.to_path_buf();
    c.variant = variant;
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn config_round_trips() {
    for task in [Task::Classification, Task::MetricLearning] {
        let c = ExperimentConfig::default_for(task);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
    let mut c = ExperimentConfig::default_for(Task::Classification);
    c.dataset = DatasetSpec::Cifar(CifarSpec {
        classes: 100,
        reduced_class: Some(3),
        ..CifarSpec::default()
    });
    c.data_root = Some("/data".into());
    c.variant = Variant::FrRj;
    c.schedule.phase2_lr = Some(1e-4);
    c.schedule.jitter_sigma = Some(0.25);
    c.schedule.memory_capacity = Some(7);
    c.schedule.loss.eta = 1.0 / 15.0;
    c.jitter = JitterConfig {
        samples: vec![4],
        prototypes: vec![0, 1],
        observe_epochs: 2,
        phase2: true,
    };
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
}

#[test]
fn unknown_key_is_named_and_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "[schedule]\nphase1_epoch = 3\n");
    let out = bin().args(["train", "-c"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase1_epoch"));
    let err = ExperimentConfig::from_toml("typo = 1").unwrap_err();
    assert!(err.to_string().contains("`typo`"), "{err}");
}

#[test]
fn missing_dataset_exits_with_data_status() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "[dataset.cifar]\nclasses = 10\n");
    let out = bin()
        .env("MBJ_DATA_ROOT", dir.path().join("nowhere"))
        .args(["train", "-c"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn same_config_and_seed_give_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run::train(&tiny(&a, Variant::Mbj)).unwrap();
    run::train(&tiny(&b, Variant::Mbj)).unwrap();
    for file in ["summary.csv", "metrics.jsonl", "feature_bank.csv"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn baseline_emits_no_bank_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    run::train(&tiny(&base, Variant::Baseline)).unwrap();
    for file in ["config.toml", "phase1.ckpt", "final.ckpt", "metrics.jsonl", "summary.csv", "profile.csv"] {
        assert!(base.join(file).exists(), "{file}");
    }
    assert!(!base.join("feature_bank.csv").exists());
    assert!(!base.join("prototype_bank.csv").exists());
    let rows = read_summary(&base.join("summary.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.model.as_str()).collect::<Vec<_>>(), ["phase1", "baseline"]);
}

#[test]
fn compare_reports_deltas_against_the_first_run() {
    let dir = tempfile::tempdir().unwrap();
    let (base, mbj) = (dir.path().join("base"), dir.path().join("mbj"));
    run::train(&tiny(&base, Variant::Baseline)).unwrap();
    run::train(&tiny(&mbj, Variant::Mbj)).unwrap();

    let same = compare(&[base.clone(), base.clone()]).unwrap();
    assert!(same.deltas(1).iter().flatten().all(|&d| d == 0.0));

    let c = compare(&[base.clone(), mbj.clone()]).unwrap();
    let b = read_summary(&base.join("summary.csv")).unwrap().pop().unwrap();
    let m = read_summary(&mbj.join("summary.csv")).unwrap().pop().unwrap();
    assert_eq!(c.deltas(1)[0], Some(100.0 * (m.top1.unwrap() - b.top1.unwrap())));

    let csv = dir.path().join("cmp.csv");
    let out = bin().arg("compare").args([&base, &mbj]).arg("--csv").arg(&csv).output().unwrap();
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("run,model,top1,many,medium,few,delta_top1"));
}

#[test]
fn eval_reproduces_the_final_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run::train(&tiny(&out, Variant::Mbj)).unwrap();
    let last = read_summary(&out.join("summary.csv")).unwrap().pop().unwrap();
    assert_eq!(run::eval(&out, "final").unwrap(), last);
}

#[test]
fn jitter_traces_are_recorded_and_summarized() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = tiny(&out, Variant::Mbj);
    c.jitter = JitterConfig {
        samples: vec![0],
        prototypes: vec![2],
        observe_epochs: 2,
        phase2: true,
    };
    run::train(&c).unwrap();
    let rows = run::jitter_stats(&out, None).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(out.join("jitter").join("observe_prototype_c2.csv").exists());
}
