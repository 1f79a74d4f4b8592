use std::path::Path;
use std::process::{Command, Output};

use ilf_core::backend::MockScript;
use ilf_core::model::{write_dataset, Task};

const TRAIN: [u32; 3] = [201, 202, 203];
const TEST: u32 = 301;

fn key(i: u32) -> String {
    format!("assert f{i}(0) == {i}\n")
}
fn buggy(i: u32) -> String {
    format!("def f{i}(x):\n    return x - {i}")
}
fn fixed(i: u32) -> String {
    format!("def f{i}(x):\n    return x + {i}")
}
fn feedback(i: u32) -> String {
    format!("Add {i} instead of subtracting it.")
}

fn write_script(path: &Path, script: &MockScript) {
    std::fs::write(path, serde_json::to_string(script).unwrap()).unwrap();
}

/// Writes the dataset, mock scripts and config into `dir`.
fn setup(dir: &Path) -> std::path::PathBuf {
    let ids = [101].into_iter().chain(TRAIN).chain([TEST]);
    let tasks: Vec<Task> = ids
        .map(|i| {
            Task::new(
                i,
                format!("Write f{i}(x) returning x plus {i}."),
                vec![format!("assert f{i}(0) == {i}"), format!("assert f{i}(2) == {}", i + 2)],
            )
            .unwrap()
        })
        .collect();
    write_dataset(std::fs::File::create(dir.join("tasks.jsonl")).unwrap(), &tasks).unwrap();

    let mut base = MockScript::always(&["def f():\n    return 0"]);
    let mut refiner = MockScript::always(&["def f():\n    return 0"]);
    let mut critic = MockScript::default();
    for i in [101].into_iter().chain(TRAIN) {
        base = base.rule(&[&key(i)], &[&buggy(i)]);
        refiner = refiner.rule(&[&key(i), &feedback(i)], &[&fixed(i), &buggy(i)]);
        critic = critic.rule(&[&key(i)], &[&feedback(i)]);
    }
    base = base.rule(&[&key(TEST)], &[&fixed(TEST), &buggy(TEST), &buggy(TEST), &buggy(TEST)]);
    let tuned = MockScript::always(&[]).rule(&[&key(TEST)], &[&fixed(TEST), &buggy(TEST)]);
    for (name, script) in [("base", &base), ("refiner", &refiner), ("critic", &critic), ("tuned", &tuned)] {
        write_script(&dir.join(format!("{name}.json")), script);
    }

    let config = r#"
dataset = "tasks.jsonl"
samples_per_task = 10
parallelism = 2
trainer_poll_interval_ms = 1
trainer_timeout_secs = 10

[backends]
policy = "base"
refiner = "refiner"
feedback = "critic"
trainer = "trainer"

[feedback]
source = "model"

[splits]
refine = { start = 100, end = 199 }
train = { start = 200, end = 299 }
test = { start = 300, end = 399 }

[models.base]
kind = "mock"
script_path = "base.json"
[models.refiner]
kind = "mock"
script_path = "refiner.json"
[models.critic]
kind = "mock"
script_path = "critic.json"
[models.tuned]
kind = "mock"
script_path = "tuned.json"

[trainers.trainer]
kind = "mock"
outcomes = [{ min_examples = 0, backend_ref = "tuned" }]
"#;
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn ilf(args: &[&str], config: &Path, run_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilf"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--run-dir")
        .arg(run_dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn stage_verbs_run_a_model_feedback_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let run = tmp.path().join("run");

    let early = ilf(&["refine"], &config, &run);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("needs collect-feedback"));

    for verb in ["sample", "collect-feedback", "refine", "assemble", "finetune", "evaluate"] {
        let out = stdout_ok(&ilf(&[verb], &config, &run));
        assert!(out.ends_with(": complete\n"), "{verb}: {out}");
    }
    let again = stdout_ok(&ilf(&["evaluate"], &config, &run));
    assert!(again.contains("already complete"));

    let report = stdout_ok(&ilf(&["report"], &config, &run));
    assert!(report.contains("Dataset final: 3 examples"), "{report}");

    let audit = stdout_ok(&ilf(&["audit"], &config, &run));
    let audit: serde_json::Value = serde_json::from_str(&audit).unwrap();
    assert_eq!(audit["traced"], 3);

    let final_set = std::fs::read_to_string(run.join("datasets/final.jsonl")).unwrap();
    assert_eq!(final_set.lines().count(), 3);

    let ablation = stdout_ok(&ilf(&["shuffled-ablation"], &config, &run));
    assert!(ablation.contains("refined 3 annotations"), "{ablation}");
}

#[test]
fn scaling_run_writes_points() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let run = tmp.path().join("run");
    stdout_ok(&ilf(&["sample"], &config, &run));
    let out = stdout_ok(&ilf(&["scaling-run", "--k", "1,3"], &config, &run));
    assert!(out.contains("wrote"), "{out}");
    let points: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("scaling.json")).unwrap()).unwrap();
    assert_eq!(points["1"]["dataset_size"], 1);
    assert_eq!(points["3"]["dataset_size"], 3);
}

#[test]
fn export_annotations_requires_sampling_first() {
    let tmp = tempfile::tempdir().unwrap();
    let config = setup(tmp.path());
    let run = tmp.path().join("run");
    let out_path = tmp.path().join("export.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_ilf"))
        .args(["export-annotations", "--out"])
        .arg(&out_path)
        .arg("--config")
        .arg(&config)
        .arg("--run-dir")
        .arg(&run)
        .output()
        .unwrap();
    assert!(!out.status.success());

    stdout_ok(&ilf(&["sample"], &config, &run));
    let out = Command::new(env!("CARGO_BIN_EXE_ilf"))
        .args(["export-annotations", "--out"])
        .arg(&out_path)
        .arg("--config")
        .arg(&config)
        .arg("--run-dir")
        .arg(&run)
        .output()
        .unwrap();
    assert!(stdout_ok(&out).contains("wrote 0 accepted annotations"));
    assert!(run.join("annotation_queue.json").exists());
}
