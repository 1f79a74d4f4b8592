//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Set `ILF_MBPP_PATH` to an MBPP jsonl file to enable the real-benchmark
//! smoke check; without it that line reports SKIP.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use ilf_core::annotation::{accept_annotation, AuthorKind, FeedbackAnnotation, RefinementSubmission};
use ilf_core::metrics::{aggregate, pass_at_k, TaskTally};
use ilf_core::model::{load_dataset_file, render_task, ProgramOrigin, ProgramSample, SamplingInfo, Task};
use ilf_core::pipeline::{check_split_hygiene, run_scaling_experiment, Pipeline, PipelineContext, Stage};
use ilf_core::prompting::RefinePromptTemplate;
use ilf_core::sandbox::{eval_source, EvalOutcome, FailureKind, SandboxConfig, TestResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Status {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Status;

fn main() {
    let checks: [(&str, Check); 9] = [
        ("pass@k matches enumeration and Monte Carlo", pass_at_k_oracles),
        ("one-or-more-correct fraction for 321 of 974", counting_identity),
        ("sandbox fixture outcomes", eval_fixtures),
        ("annotation filter agrees with oracle", annotation_filter),
        ("final examples trace to failing originals", lineage),
        ("matched feedback beats shuffled feedback", matched_vs_shuffled),
        ("pass@1 non-decreasing in annotated tasks", scaling),
        ("reruns and resumed runs are byte-identical", determinism),
        ("gold programs pass on real MBPP tasks", mbpp_smoke),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let status = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Status::Fail(msg)
        });
        let secs = started.elapsed().as_secs_f64();
        match status {
            Status::Pass(d) => println!("PASS  {name} ({secs:.1}s): {d}"),
            Status::Skip(d) => println!("SKIP  {name}: {d}"),
            Status::Fail(d) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn status(ok: bool, detail: String) -> Status {
    if ok {
        Status::Pass(detail)
    } else {
        Status::Fail(detail)
    }
}

fn enumerate_pass_at_k(n: u32, c: u32, k: u32) -> f64 {
    // Samples 0..c are the correct ones.
    let correct_mask = (1u32 << c) - 1;
    let (mut hits, mut total) = (0u64, 0u64);
    for subset in 0u32..(1 << n) {
        if subset.count_ones() != k {
            continue;
        }
        total += 1;
        if subset & correct_mask != 0 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

fn pass_at_k_oracles() -> Status {
    let mut exact = 0;
    for n in 1..=12u32 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k(n as u64, c as u64, k as u64).unwrap();
                let want = enumerate_pass_at_k(n, c, k);
                if got != want {
                    return Status::Fail(format!("n={n} c={c} k={k}: {got} != {want}"));
                }
                exact += 1;
            }
        }
    }

    const TRIALS: u32 = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for c in [1u32, 3, 10, 20] {
        for k in [1u32, 5, 10] {
            let p = pass_at_k(30, c as u64, k as u64).unwrap();
            let mut pool: Vec<u32> = (0..30).collect();
            let mut hits = 0u32;
            for _ in 0..TRIALS {
                // Partial Fisher-Yates: the first k slots are a uniform k-subset.
                let mut hit = false;
                for i in 0..k as usize {
                    let j = rng.random_range(i..30);
                    pool.swap(i, j);
                    hit |= pool[i] < c;
                }
                hits += hit as u32;
            }
            let estimate = hits as f64 / TRIALS as f64;
            let se = (p * (1.0 - p) / TRIALS as f64).sqrt();
            let z = if se == 0.0 { 0.0 } else { (estimate - p).abs() / se };
            if z > 3.0 || (se == 0.0 && estimate != p) {
                return Status::Fail(format!("n=30 c={c} k={k}: estimate {estimate} vs {p} ({z:.2} SE)"));
            }
            worst = worst.max(z);
        }
    }
    Status::Pass(format!("{exact} exact cases; 12 Monte Carlo cases, worst {worst:.2} SE"))
}

fn counting_identity() -> Status {
    let tallies: Vec<TaskTally> = (1..=974)
        .map(|i| TaskTally {
            task_id: i,
            n: 30,
            c: if i <= 321 { 0 } else { 1 + i as u64 % 30 },
        })
        .collect();
    let report = aggregate(&tallies, &[1]).unwrap();
    let ok = (report.one_plus_correct - 0.670).abs() <= 0.001;
    status(ok, format!("one_plus_correct = {:.4}", report.one_plus_correct))
}

struct Fixture {
    name: &'static str,
    program: &'static str,
    expect: Option<FailureKind>,
}

const fn fx(name: &'static str, program: &'static str, expect: Option<FailureKind>) -> Fixture {
    Fixture { name, program, expect }
}

fn eval_fixtures() -> Status {
    use FailureKind::*;
    let timeout = Duration::from_secs(2);
    let config = SandboxConfig::default().with_timeout(timeout);
    let task = render_task(
        &Task::new(
            1,
            "Write a function add(a, b) that returns the sum of a and b.",
            vec![
                "assert add(1, 2) == 3".into(),
                "assert add(-4, 4) == 0".into(),
                "assert add(10, 5) == 15".into(),
            ],
        )
        .unwrap(),
    );
    let fixtures = [
        fx("plain", "def add(a, b):\n    return a + b", None),
        fx("builtin", "def add(a, b):\n    return sum([a, b])", None),
        fx("import", "import operator\n\ndef add(a, b):\n    return operator.add(a, b)", None),
        fx("lambda", "add = lambda a, b: a + b", None),
        fx("prints", "def add(a, b):\n    print('adding', a, b)\n    return a + b", None),
        fx("class", "class A:\n    @staticmethod\n    def f(a, b):\n        return a + b\n\nadd = A.f", None),
        fx("recursive", "def add(a, b):\n    return a if b == 0 else (add(a + 1, b - 1) if b > 0 else add(a - 1, b + 1))", None),
        fx("off by one", "def add(a, b):\n    return a + b + 1", Some(AssertionFailure)),
        fx("returns str", "def add(a, b):\n    return str(a + b)", Some(AssertionFailure)),
        fx("returns none", "def add(a, b):\n    pass", Some(AssertionFailure)),
        fx("partly right", "def add(a, b):\n    return a + b if a > 0 else 1", Some(AssertionFailure)),
        fx("zero division", "def add(a, b):\n    return (a + b) / 0", Some(RuntimeError)),
        fx("name error", "def add(a, b):\n    return a + c", Some(RuntimeError)),
        fx("syntax error", "def add(a, b)\n    return a + b", Some(RuntimeError)),
        fx("raises", "def add(a, b):\n    raise ValueError('no')", Some(RuntimeError)),
        fx("wrong name", "def plus(a, b):\n    return a + b", Some(RuntimeError)),
        fx("early exit", "import sys\nsys.exit(0)", Some(RuntimeError)),
        fx("hard exit", "import os\nos._exit(0)", Some(RuntimeError)),
        fx("deep recursion", "def add(a, b):\n    return add(a, b)", Some(RuntimeError)),
        fx("busy loop", "def add(a, b):\n    while True:\n        pass", Some(Timeout)),
        fx("sleep", "import time\n\ndef add(a, b):\n    time.sleep(60)\n    return a + b", Some(Timeout)),
        fx("looping child", "import os\nif os.fork() == 0:\n    while True:\n        pass\nos.wait()", Some(Timeout)),
        fx("stdout flood", "def add(a, b):\n    while True:\n        print('x' * 4096)", Some(ResourceLimit)),
        fx("stderr flood", "import sys\nwhile True:\n    sys.stderr.write('y' * 4096)", Some(ResourceLimit)),
        fx("forking flood", "import os\nfor _ in range(3):\n    os.fork()\nwhile True:\n    print('z' * 4096)", Some(ResourceLimit)),
    ];
    let mut slowest_timeout = Duration::ZERO;
    for f in &fixtures {
        let started = Instant::now();
        let out = match eval_source(f.program, &task, &config) {
            Ok(out) => out,
            Err(e) => return Status::Fail(format!("{}: {e}", f.name)),
        };
        let elapsed = started.elapsed();
        if out.failure_kind != f.expect || out.passed != f.expect.is_none() || !out.is_consistent() {
            return Status::Fail(format!("{}: expected {:?}, got {:?}", f.name, f.expect, out));
        }
        if f.expect == Some(Timeout) {
            if elapsed > timeout + Duration::from_secs(2) {
                return Status::Fail(format!("{}: took {elapsed:?}", f.name));
            }
            slowest_timeout = slowest_timeout.max(elapsed);
        }
    }
    Status::Pass(format!(
        "{} fixtures; slowest timeout case {:.2}s against a {}s limit",
        fixtures.len(),
        slowest_timeout.as_secs_f64(),
        timeout.as_secs()
    ))
}

/// Full-matrix Levenshtein over chars.
fn oracle_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    d[0] = (0..=b.len()).collect();
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    const ALPHABET: &[char] = &['a', 'b', 'x', ' ', '\n', '(', ')', '+', '1', 'é', 'λ'];
    (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn mutate(rng: &mut ChaCha8Rng, text: &str, edits: usize) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    for _ in 0..edits {
        let pos = rng.random_range(0..=chars.len());
        match rng.random_range(0..3) {
            0 => chars.insert(pos, random_text(rng, 1).chars().next().unwrap()),
            1 if pos < chars.len() => {
                chars.remove(pos);
            }
            _ if pos < chars.len() => chars[pos] = random_text(rng, 1).chars().next().unwrap(),
            _ => chars.push('z'),
        }
    }
    chars.into_iter().collect()
}

fn outcome(passed: bool) -> EvalOutcome {
    EvalOutcome {
        passed,
        failure_kind: (!passed).then_some(FailureKind::AssertionFailure),
        duration: Duration::ZERO,
        per_test: vec![TestResult {
            test_index: 0,
            passed,
            message: String::new(),
        }],
    }
}

fn annotation_filter() -> Status {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut accepted, mut rejected) = (0, 0);
    for i in 0..100 {
        let len = rng.random_range(1..40);
        let original = random_text(&mut rng, len);
        let edits = rng.random_range(0..original.chars().count().max(2));
        let refinement = mutate(&mut rng, &original, edits);
        let refinement = if refinement.is_empty() { "r".to_string() } else { refinement };
        let tests_pass = rng.random_bool(0.8);
        let verified = rng.random_bool(0.8);

        let mut target = ProgramSample::new(
            format!("p{i}"),
            1,
            original.clone(),
            ProgramOrigin::BaseModel,
            "base",
            SamplingInfo {
                temperature: 0.8,
                index: 0,
            },
        )
        .unwrap();
        target.eval = Some(outcome(false));
        let annotation = FeedbackAnnotation {
            id: format!("a{i}"),
            task_id: 1,
            target_program: target,
            feedback_text: "fix it".into(),
            author: AuthorKind::Human,
            bug_tags: Vec::new(),
            bugs_addressed: None,
            verified_correct: verified,
        };
        let mut submission = RefinementSubmission::new(&annotation, refinement.clone());
        submission.eval = Some(outcome(tests_pass));
        let verdict = accept_annotation(&annotation, &submission).unwrap();

        let distance = oracle_levenshtein(&original, &refinement);
        let max_len = original.chars().count().max(refinement.chars().count());
        let want = tests_pass && verified && (distance as f64) < 0.5 * max_len as f64;
        if verdict.is_accept() != want {
            return Status::Fail(format!(
                "pair {i}: {original:?} -> {refinement:?} distance {distance}, verdict {verdict:?}, oracle {want}"
            ));
        }
        if want {
            accepted += 1;
        } else {
            rejected += 1;
        }
    }
    Status::Pass(format!("100 pairs agree ({accepted} accepted, {rejected} rejected)"))
}

fn human_run(run_dir: &Path, export: &Path) -> Pipeline {
    let mut pipeline = Pipeline::open(context(config(Some(export)), default_trainer()), run_dir).unwrap();
    pipeline.run_stage(Stage::Sample).unwrap();
    if !export.exists() {
        let records = annotate_via_service(pipeline.state(), &pipeline.context().rendered);
        write_export(export, &records);
    }
    pipeline.run_all().unwrap();
    pipeline
}

fn lineage() -> Status {
    let tmp = tempfile::tempdir().unwrap();
    let pipeline = human_run(&tmp.path().join("run"), &tmp.path().join("export.jsonl"));
    let report = pipeline.audit().unwrap();
    let splits = pipeline.state().splits.clone().unwrap();
    let mut examples = pipeline.dataset("final").unwrap();
    examples.extend(pipeline.dataset("refiner").unwrap());
    let hygiene = check_split_hygiene(&splits, &examples);
    let tasks = corpus().len();
    let ok = tasks >= 8 && report.is_complete() && report.final_examples > 0 && hygiene.is_empty();
    status(
        ok,
        format!(
            "{tasks} tasks; {}/{} examples traced; {} violations; {} hygiene violations",
            report.traced,
            report.final_examples,
            report.violations.len(),
            hygiene.len()
        ),
    )
}

fn matched_vs_shuffled() -> Status {
    let mut pipeline = Pipeline::in_memory(context(config(None), default_trainer()));
    pipeline.run_until(Stage::Refine).unwrap();
    pipeline.run_shuffled_ablation().unwrap();
    let reports = &pipeline.state().reports;
    let (m, s) = (&reports["refine_matched"], &reports["refine_shuffled"]);
    let ok = m.pass_at_k[&1] > s.pass_at_k[&1];
    status(
        ok,
        format!(
            "pass@1 {:.3} vs {:.3}; pass@10 {:.3} vs {:.3}",
            m.pass_at_k[&1], s.pass_at_k[&1], m.pass_at_k[&10], s.pass_at_k[&10]
        ),
    )
}

fn scaling() -> Status {
    let ctx = PipelineContext::new(config(None), corpus(), scaling_registry(), RefinePromptTemplate::default()).unwrap();
    let mut base = Pipeline::in_memory(ctx);
    base.run_stage(Stage::Sample).unwrap();
    let points = run_scaling_experiment(base.context(), base.state(), &[2, 4, 8]).unwrap();
    let pass1: Vec<f64> = points.values().map(|p| p.report.pass_at_k[&1]).collect();
    let ok = pass1.len() == 3 && pass1.windows(2).all(|w| w[0] <= w[1]);
    let detail = points
        .values()
        .map(|p| format!("k={} examples={} pass@1={:.3}", p.k, p.dataset_size, p.report.pass_at_k[&1]))
        .collect::<Vec<_>>()
        .join("; ");
    status(ok, detail)
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if rel != "timings.jsonl" {
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn determinism() -> Status {
    let tmp = tempfile::tempdir().unwrap();
    let export = tmp.path().join("export.jsonl");
    human_run(&tmp.path().join("a"), &export);
    human_run(&tmp.path().join("b"), &export);
    let (a, b) = (read_tree(&tmp.path().join("a")), read_tree(&tmp.path().join("b")));
    if a != b {
        let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
        return Status::Fail(format!("reruns differ in {differing:?}"));
    }

    let resumed = tmp.path().join("resumed");
    for stage in Stage::ALL {
        let mut pipeline = Pipeline::open(context(config(Some(&export)), default_trainer()), &resumed).unwrap();
        if !pipeline.run_stage(stage).unwrap() {
            return Status::Fail(format!("stage {stage} did not run after reopening"));
        }
    }
    let r = read_tree(&resumed);
    if r != a {
        let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != r.get(*k)).collect();
        return Status::Fail(format!("resumed run differs in {differing:?}"));
    }
    Status::Pass(format!(
        "{} files identical across two runs and a run reopened before each of {} stages",
        a.len(),
        Stage::ALL.len()
    ))
}

fn mbpp_smoke() -> Status {
    let Ok(path) = std::env::var("ILF_MBPP_PATH") else {
        return Status::Skip("ILF_MBPP_PATH not set".into());
    };
    let tasks = match load_dataset_file(&path) {
        Ok(t) => t,
        Err(e) => return Status::Fail(format!("{path}: {e}")),
    };
    let config = SandboxConfig::default();
    let sample: Vec<&Task> = tasks.iter().filter(|t| t.gold_program.is_some()).take(20).collect();
    if sample.len() < 20 {
        return Status::Fail(format!("only {} tasks with gold programs", sample.len()));
    }
    let mut passed = 0;
    let mut failures = Vec::new();
    for task in &sample {
        let gold = task.gold_program.as_deref().unwrap();
        match eval_source(gold, &render_task(task), &config) {
            Ok(out) if out.passed => passed += 1,
            Ok(out) => failures.push(format!("{}: {:?}", task.id, out.failure_kind)),
            Err(e) => failures.push(format!("{}: {e}", task.id)),
        }
    }
    status(passed >= 19, format!("{passed}/20 gold programs pass; failures {failures:?}"))
}
