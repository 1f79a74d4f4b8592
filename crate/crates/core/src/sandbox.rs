//! Unit-test verification of candidate programs in isolated child processes.
//!
//! Every held-out test runs in its own process: the script is the setup code,
//! the candidate program and one assertion, written to a fresh scratch
//! directory. The child is placed in its own process group so the whole tree
//! can be killed on timeout or output overflow, and gets resource limits
//! (CPU, address space, file size) plus a private network namespace where the
//! host allows it. Those isolation measures are best effort; the timeout and
//! output cap are always enforced by the supervisor.
//!
//! Candidate misbehaviour never surfaces as an `Err`: it is reported through
//! [`FailureKind`]. `Err` is reserved for infrastructure faults such as a
//! missing interpreter.

use std::io::{self, Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ProgramSample, RenderedTask, TaskId};

pub const SCRIPT_PLACEHOLDER: &str = "{script}";
const SCRIPT_NAME: &str = "main.py";
const SANDBOX_PATH: &str = "/usr/local/bin:/usr/bin:/bin";
const POLL_INTERVAL: Duration = Duration::from_millis(5);
/// How long to wait for pipe readers after the process group is gone.
const READER_GRACE: Duration = Duration::from_millis(500);
const MAX_MESSAGE_CHARS: usize = 400;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("interpreter `{0}` could not be started: {1}")]
    InterpreterUnavailable(String, #[source] io::Error),
    #[error("scratch directory could not be prepared: {0}")]
    ScratchDir(#[source] io::Error),
    #[error("invalid sandbox configuration: {0}")]
    InvalidConfig(String),
    #[error("no task {0} available for evaluation")]
    UnknownTask(TaskId),
    #[error("program text is empty")]
    EmptyProgram,
    #[error("process supervision failed: {0}")]
    Supervision(#[source] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// argv template; `{script}` is replaced by the script path. If absent,
    /// the script path is appended.
    pub interpreter_command: Vec<String>,
    /// Wall-clock budget for each test execution.
    #[serde(with = "duration_secs")]
    pub wall_clock_timeout: Duration,
    /// Cap on captured bytes per output stream; exceeding it kills the child.
    pub max_output_bytes: usize,
    /// Address-space limit applied to the child (RLIMIT_AS).
    pub memory_limit_bytes: Option<u64>,
    /// Process-count limit (RLIMIT_NPROC). Counted per user by the kernel and
    /// ignored for privileged users, so it is off by default.
    pub max_processes: Option<u64>,
    /// Try to give the child an empty network namespace.
    pub isolate_network: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            interpreter_command: vec!["python3".into(), "-I".into(), SCRIPT_PLACEHOLDER.into()],
            wall_clock_timeout: Duration::from_secs(10),
            max_output_bytes: 1 << 20,
            memory_limit_bytes: Some(2 << 30),
            max_processes: None,
            isolate_network: true,
        }
    }
}

impl SandboxConfig {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.wall_clock_timeout = timeout;
        self
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.interpreter_command.is_empty() || self.interpreter_command[0].is_empty() {
            return Err(SandboxError::InvalidConfig("interpreter command is empty".into()));
        }
        if self.wall_clock_timeout.is_zero() {
            return Err(SandboxError::InvalidConfig("timeout must be positive".into()));
        }
        if self.max_output_bytes == 0 {
            return Err(SandboxError::InvalidConfig("max_output_bytes must be positive".into()));
        }
        Ok(())
    }

    fn argv(&self, script: &str) -> Vec<String> {
        let mut substituted = false;
        let mut argv: Vec<String> = self
            .interpreter_command
            .iter()
            .map(|arg| {
                if arg.contains(SCRIPT_PLACEHOLDER) {
                    substituted = true;
                    arg.replace(SCRIPT_PLACEHOLDER, script)
                } else {
                    arg.clone()
                }
            })
            .collect();
        if !substituted {
            argv.push(script.to_string());
        }
        argv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    AssertionFailure,
    RuntimeError,
    Timeout,
    ResourceLimit,
    HarnessError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_index: usize,
    pub passed: bool,
    pub message: String,
}

/// The value of `Eval(x, t)` plus per-test diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_kind: Option<FailureKind>,
    #[serde(with = "duration_secs", default)]
    pub duration: Duration,
    pub per_test: Vec<TestResult>,
}

impl EvalOutcome {
    /// Outcome recorded when the harness itself failed; never `passed`.
    pub fn harness_error(message: impl Into<String>) -> Self {
        EvalOutcome {
            passed: false,
            failure_kind: Some(FailureKind::HarnessError),
            duration: Duration::ZERO,
            per_test: vec![TestResult {
                test_index: 0,
                passed: false,
                message: message.into(),
            }],
        }
    }

    /// Copy with the wall-clock duration zeroed, for byte-stable persistence.
    pub fn without_timing(&self) -> Self {
        EvalOutcome {
            duration: Duration::ZERO,
            ..self.clone()
        }
    }

    pub fn is_consistent(&self) -> bool {
        let all = !self.per_test.is_empty() && self.per_test.iter().all(|t| t.passed);
        self.passed == (all && self.failure_kind.is_none())
    }
}

pub mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

pub fn eval_program(
    program: &ProgramSample,
    task: &RenderedTask,
    config: &SandboxConfig,
) -> Result<EvalOutcome, SandboxError> {
    eval_source(&program.program_text, task, config)
}

/// Evaluates raw program text against the task's evaluation tests.
pub fn eval_source(
    program_text: &str,
    task: &RenderedTask,
    config: &SandboxConfig,
) -> Result<EvalOutcome, SandboxError> {
    config.validate()?;
    if program_text.trim().is_empty() {
        return Err(SandboxError::EmptyProgram);
    }
    let started = Instant::now();
    let tests = task.eval_tests();
    let mut per_test = Vec::with_capacity(tests.len());
    let mut failure_kind = None;
    let mut halted = false;
    for (index, test) in tests.iter().enumerate() {
        if halted {
            per_test.push(TestResult {
                test_index: index,
                passed: false,
                message: "not run: an earlier test exhausted its limits".into(),
            });
            continue;
        }
        let script = build_script(task.setup_code.as_deref(), program_text, test);
        let run = run_script(&script, config)?;
        if let Some(kind) = run.failure {
            failure_kind.get_or_insert(kind);
            halted = matches!(kind, FailureKind::Timeout | FailureKind::ResourceLimit);
        }
        per_test.push(TestResult {
            test_index: index,
            passed: run.failure.is_none(),
            message: run.message,
        });
    }
    Ok(EvalOutcome {
        passed: failure_kind.is_none(),
        failure_kind,
        duration: started.elapsed(),
        per_test,
    })
}

/// Evaluates many programs with a bounded worker pool. Output order matches
/// input order.
pub fn eval_batch<'t, F>(
    programs: &[ProgramSample],
    task_lookup: F,
    config: &SandboxConfig,
    parallelism: usize,
) -> Vec<Result<EvalOutcome, SandboxError>>
where
    F: Fn(TaskId) -> Option<&'t RenderedTask> + Sync,
{
    let eval_one = |p: &ProgramSample| match task_lookup(p.task_id) {
        Some(task) => eval_program(p, task, config),
        None => Err(SandboxError::UnknownTask(p.task_id)),
    };
    if parallelism <= 1 || programs.len() <= 1 {
        return programs.iter().map(eval_one).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| programs.par_iter().map(eval_one).collect()),
        Err(err) => {
            tracing::warn!(%err, "worker pool unavailable, evaluating sequentially");
            programs.iter().map(eval_one).collect()
        }
    }
}

/// One line of the evaluation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLogRecord {
    pub sample_id: String,
    pub task_id: TaskId,
    pub outcome: EvalOutcome,
}

pub fn write_eval_log<W: Write>(mut writer: W, records: &[EvalLogRecord]) -> io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

fn build_script(setup: Option<&str>, program: &str, test: &str) -> String {
    let mut script = String::new();
    if let Some(setup) = setup {
        script.push_str(setup);
        script.push('\n');
    }
    script.push_str(program);
    script.push_str("\n\n");
    script.push_str(test);
    script.push('\n');
    script
}

struct ScriptRun {
    failure: Option<FailureKind>,
    message: String,
}

fn run_script(body: &str, config: &SandboxConfig) -> Result<ScriptRun, SandboxError> {
    let scratch = tempfile::Builder::new()
        .prefix("ilf-eval-")
        .tempdir()
        .map_err(SandboxError::ScratchDir)?;
    // Completion marker: a program that exits early (sys.exit(0), os._exit)
    // must not count as passing.
    let sentinel = format!("__ilf_done_{:016x}__", rand::random::<u64>());
    let script = format!("{body}print({sentinel:?})\n");
    std::fs::write(scratch.path().join(SCRIPT_NAME), script).map_err(SandboxError::ScratchDir)?;

    let mut child = spawn_child(scratch.path(), config)?;
    let pgid = child.id() as libc::pid_t;
    let overflow = Arc::new(AtomicBool::new(false));
    let stdout = spawn_reader(child.stdout.take(), config.max_output_bytes, overflow.clone());
    let stderr = spawn_reader(child.stderr.take(), config.max_output_bytes, overflow.clone());

    let started = Instant::now();
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {}
            Err(err) => {
                kill_group(pgid);
                let _ = child.wait();
                return Err(SandboxError::Supervision(err));
            }
        }
        if overflow.load(Ordering::Relaxed) {
            kill_group(pgid);
            break wait_reaped(&mut child)?;
        }
        if started.elapsed() >= config.wall_clock_timeout {
            timed_out = true;
            kill_group(pgid);
            break wait_reaped(&mut child)?;
        }
        thread::sleep(POLL_INTERVAL);
    };
    // Descendants may still hold the pipes open.
    kill_group(pgid);
    let out = stdout.collect();
    let err = stderr.collect();
    drop(scratch);

    Ok(classify(
        status,
        timed_out,
        overflow.load(Ordering::Relaxed),
        &out,
        &err,
        &sentinel,
        config,
    ))
}

fn spawn_child(dir: &Path, config: &SandboxConfig) -> Result<Child, SandboxError> {
    let argv = config.argv(SCRIPT_NAME);
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(dir)
        .env_clear()
        .env("PATH", SANDBOX_PATH)
        .env("HOME", dir)
        .env("TMPDIR", dir)
        .env("LANG", "C.UTF-8")
        .env("PYTHONHASHSEED", "0")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);

    let cpu_secs = config.wall_clock_timeout.as_secs() + 1;
    let memory = config.memory_limit_bytes;
    let nproc = config.max_processes;
    let file_size = (config.max_output_bytes as u64).max(1 << 20) * 16;
    let isolate_network = config.isolate_network;
    // SAFETY: the closure only issues raw syscalls (setrlimit, unshare) and
    // does not allocate, which is permitted between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            set_limit(libc::RLIMIT_CPU, cpu_secs);
            set_limit(libc::RLIMIT_FSIZE, file_size);
            set_limit(libc::RLIMIT_CORE, 0);
            if let Some(bytes) = memory {
                set_limit(libc::RLIMIT_AS, bytes);
            }
            if let Some(n) = nproc {
                set_limit(libc::RLIMIT_NPROC, n);
            }
            if isolate_network {
                libc::unshare(libc::CLONE_NEWNET);
            }
            Ok(())
        });
    }
    cmd.spawn()
        .map_err(|err| SandboxError::InterpreterUnavailable(argv[0].clone(), err))
}

fn set_limit(resource: libc::__rlimit_resource_t, value: u64) {
    let limit = libc::rlimit {
        rlim_cur: value as libc::rlim_t,
        rlim_max: value as libc::rlim_t,
    };
    // SAFETY: plain syscall on a stack value.
    unsafe {
        libc::setrlimit(resource, &limit);
    }
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: signalling our own child's process group; ESRCH is harmless.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn wait_reaped(child: &mut Child) -> Result<ExitStatus, SandboxError> {
    child.wait().map_err(SandboxError::Supervision)
}

struct StreamReader {
    buf: Arc<Mutex<Vec<u8>>>,
    done: mpsc::Receiver<()>,
}

impl StreamReader {
    fn collect(self) -> String {
        let _ = self.done.recv_timeout(READER_GRACE);
        let buf = self.buf.lock().unwrap_or_else(|e| e.into_inner());
        String::from_utf8_lossy(&buf).into_owned()
    }
}

fn spawn_reader<R: Read + Send + 'static>(
    stream: Option<R>,
    cap: usize,
    overflow: Arc<AtomicBool>,
) -> StreamReader {
    let buf = Arc::new(Mutex::new(Vec::new()));
    let (tx, done) = mpsc::channel();
    let sink = buf.clone();
    thread::spawn(move || {
        if let Some(mut stream) = stream {
            let mut chunk = [0u8; 8192];
            loop {
                match stream.read(&mut chunk) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        let mut buf = sink.lock().unwrap_or_else(|e| e.into_inner());
                        let room = cap.saturating_sub(buf.len());
                        buf.extend_from_slice(&chunk[..n.min(room)]);
                        if n > room {
                            overflow.store(true, Ordering::Relaxed);
                            break;
                        }
                    }
                }
            }
        }
        let _ = tx.send(());
    });
    StreamReader { buf, done }
}

fn classify(
    status: ExitStatus,
    timed_out: bool,
    overflow: bool,
    stdout: &str,
    stderr: &str,
    sentinel: &str,
    config: &SandboxConfig,
) -> ScriptRun {
    let fail = |kind, message: String| ScriptRun {
        failure: Some(kind),
        message: truncate(&message),
    };
    if timed_out {
        return fail(
            FailureKind::Timeout,
            format!("timed out after {:.1}s", config.wall_clock_timeout.as_secs_f64()),
        );
    }
    if overflow {
        return fail(
            FailureKind::ResourceLimit,
            format!("output exceeded {} bytes", config.max_output_bytes),
        );
    }
    if let Some(signal) = status.signal() {
        let kind = match signal {
            libc::SIGXCPU | libc::SIGXFSZ | libc::SIGKILL => FailureKind::ResourceLimit,
            _ => FailureKind::RuntimeError,
        };
        return fail(kind, format!("killed by signal {signal}"));
    }
    let last_line = stderr
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
        .trim()
        .to_string();
    if status.success() {
        if stdout.lines().any(|l| l.trim_end() == sentinel) {
            return ScriptRun {
                failure: None,
                message: String::new(),
            };
        }
        return fail(
            FailureKind::RuntimeError,
            "program exited before the test completed".into(),
        );
    }
    let kind = if last_line.starts_with("AssertionError") {
        FailureKind::AssertionFailure
    } else if last_line.starts_with("MemoryError") {
        FailureKind::ResourceLimit
    } else {
        FailureKind::RuntimeError
    };
    let message = if last_line.is_empty() {
        format!("exit status {}", status.code().unwrap_or(-1))
    } else {
        last_line
    };
    fail(kind, message)
}

fn truncate(message: &str) -> String {
    if message.chars().count() <= MAX_MESSAGE_CHARS {
        message.to_string()
    } else {
        let mut s: String = message.chars().take(MAX_MESSAGE_CHARS).collect();
        s.push('…');
        s
    }
}
