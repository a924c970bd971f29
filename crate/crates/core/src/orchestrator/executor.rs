//! Launching processes under a resource envelope, either as a bare process
//! group or inside a container.

use std::collections::BTreeMap;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::monitor::{ResourceMonitor, ResourceSample, ResourceTrace};
use super::OrchestratorError;

/// CPU, memory and swap granted to one trial.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEnvelope {
    pub cpu_cores: u32,
    pub mem_limit_mb: u64,
    pub swap_limit_mb: u64,
    #[serde(default)]
    pub escalated: bool,
}

impl ResourceEnvelope {
    /// The same envelope with the memory limit raised.
    pub fn escalate(&self, mem_limit_mb: u64) -> ResourceEnvelope {
        ResourceEnvelope {
            mem_limit_mb,
            escalated: true,
            ..self.clone()
        }
    }
}

/// Replaces `@@` in `args` with the input path. When no argument mentions
/// `@@` the input is fed on stdin instead.
pub fn substitute_input(args: &[String], input: &Path) -> (Vec<String>, Option<PathBuf>) {
    let path = input.to_string_lossy();
    let mut used = false;
    let out = args
        .iter()
        .map(|a| {
            if a.contains("@@") {
                used = true;
                a.replace("@@", &path)
            } else {
                a.clone()
            }
        })
        .collect();
    (out, (!used).then(|| input.to_path_buf()))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunOutput {
    pub code: Option<i32>,
    pub signal: Option<i32>,
    pub timed_out: bool,
    pub stdout: String,
    pub stderr: String,
}

fn drain(mut pipe: impl Read + Send + 'static) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

fn kill_group(child: &Child) {
    // SAFETY: plain syscall; the child leads its own process group.
    unsafe {
        libc::kill(-(child.id() as i32), libc::SIGKILL);
    }
}

/// Runs a short-lived command to completion, killing its process group if
/// it outlives `timeout`. Output is captured.
pub fn run_with_timeout(
    mut cmd: Command,
    stdin: Option<&Path>,
    timeout: Duration,
) -> std::io::Result<RunOutput> {
    match stdin {
        Some(p) => cmd.stdin(std::fs::File::open(p)?),
        None => cmd.stdin(Stdio::null()),
    };
    cmd.stdout(Stdio::piped()).stderr(Stdio::piped()).process_group(0);
    let mut child = cmd.spawn()?;
    let out = drain(child.stdout.take().expect("piped"));
    let err = drain(child.stderr.take().expect("piped"));
    let deadline = Instant::now() + timeout;
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(&child);
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    Ok(RunOutput {
        code: status.code(),
        signal: status.signal(),
        timed_out,
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
    })
}

/// What a long-running launch should execute.
#[derive(Clone, Debug, Default)]
pub struct ProcessSpec {
    pub program: String,
    pub args: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub cwd: PathBuf,
    /// Container image; only used with a container runtime.
    pub image: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ExecOutcome {
    pub code: Option<i32>,
    pub signal: Option<i32>,
    /// Stopped at the deadline rather than exiting on its own.
    pub timed_out: bool,
    pub oom_killed: bool,
    pub trace: ResourceTrace,
}

/// Restricts the child to `count` cores starting at `first`.
fn pin_to_cores(cmd: &mut Command, first: usize, count: usize) {
    let ncpu = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cores: Vec<usize> = (0..count.max(1)).map(|i| (first + i) % ncpu).collect();
    // SAFETY: only async-signal-safe libc calls between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            for &c in &cores {
                libc::CPU_SET(c, &mut set);
            }
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
            Ok(())
        });
    }
}

/// Runs `spec` as a bare process group pinned to `envelope.cpu_cores`
/// cores starting at `core_offset`. The tree is killed at `duration`, or
/// as soon as its resident memory exceeds the envelope's limit.
pub fn run_bare(
    spec: &ProcessSpec,
    envelope: &ResourceEnvelope,
    duration: Duration,
    interval: Duration,
    core_offset: usize,
) -> Result<ExecOutcome, OrchestratorError> {
    let mut cmd = Command::new(&spec.program);
    cmd.args(&spec.args)
        .envs(&spec.env)
        .current_dir(&spec.cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .process_group(0);
    pin_to_cores(&mut cmd, core_offset, envelope.cpu_cores as usize);
    let mut child = cmd.spawn().map_err(|e| OrchestratorError::LaunchFailure {
        program: spec.program.clone(),
        reason: e.to_string(),
    })?;
    let limit = envelope.mem_limit_mb as f64;
    let hook = Box::new(move |s: &ResourceSample| s.rss_mb <= limit);
    let monitor = ResourceMonitor::spawn(child.id() as i32, interval, Some(hook));
    let deadline = Instant::now() + duration;
    let mut timed_out = false;
    let mut oom_killed = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) => {}
            Err(_) => break None,
        }
        if monitor.tripped() {
            oom_killed = true;
            kill_group(&child);
            break child.wait().ok();
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(&child);
            break child.wait().ok();
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    // Orphaned grandchildren share the group.
    kill_group(&child);
    let trace = monitor.finish();
    Ok(ExecOutcome {
        code: status.and_then(|s| s.code()),
        signal: status.and_then(|s| s.signal()),
        timed_out,
        oom_killed,
        trace,
    })
}

/// Arguments for `<runtime> run` that start `spec` detached under the
/// envelope. The working directory is bind-mounted at the same path.
pub fn container_run_args(name: &str, spec: &ProcessSpec, envelope: &ResourceEnvelope) -> Vec<String> {
    let cwd = spec.cwd.to_string_lossy().into_owned();
    let mut argv = vec![
        "run".to_string(),
        "-d".into(),
        "--name".into(),
        name.to_string(),
        format!("--cpus={}", envelope.cpu_cores),
        format!("--memory={}m", envelope.mem_limit_mb),
        format!("--memory-swap={}m", envelope.mem_limit_mb + envelope.swap_limit_mb),
        "-v".into(),
        format!("{cwd}:{cwd}"),
        "-w".into(),
        cwd,
    ];
    for (k, v) in &spec.env {
        argv.push("-e".into());
        argv.push(format!("{k}={v}"));
    }
    argv.push(spec.image.clone().unwrap_or_else(|| "ubuntu:22.04".into()));
    argv.push(spec.program.clone());
    argv.extend(spec.args.iter().cloned());
    argv
}

fn runtime_output(runtime: &Path, args: &[&str]) -> Result<String, OrchestratorError> {
    let out = Command::new(runtime)
        .args(args)
        .stderr(Stdio::null())
        .output()
        .map_err(|e| OrchestratorError::LaunchFailure {
            program: runtime.display().to_string(),
            reason: e.to_string(),
        })?;
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Runs `spec` in a container through the runtime's command line. The
/// container's init process tree is sampled from the host.
pub fn run_container(
    runtime: &Path,
    name: &str,
    spec: &ProcessSpec,
    envelope: &ResourceEnvelope,
    duration: Duration,
    interval: Duration,
) -> Result<ExecOutcome, OrchestratorError> {
    let _ = runtime_output(runtime, &["rm", "-f", name]);
    let status = Command::new(runtime)
        .args(container_run_args(name, spec, envelope))
        .stdout(Stdio::null())
        .status()
        .map_err(|e| OrchestratorError::LaunchFailure {
            program: runtime.display().to_string(),
            reason: e.to_string(),
        })?;
    if !status.success() {
        return Err(OrchestratorError::LaunchFailure {
            program: runtime.display().to_string(),
            reason: format!("`run` exited with {status}"),
        });
    }
    let pid: i32 = runtime_output(runtime, &["inspect", "-f", "{{.State.Pid}}", name])?
        .parse()
        .unwrap_or(0);
    let monitor = ResourceMonitor::spawn(pid, interval, None);
    let deadline = Instant::now() + duration;
    let mut timed_out = false;
    loop {
        let running = runtime_output(runtime, &["inspect", "-f", "{{.State.Running}}", name])?;
        if running != "true" {
            break;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            let _ = runtime_output(runtime, &["kill", name]);
            break;
        }
        std::thread::sleep(interval.min(Duration::from_secs(1)));
    }
    let trace = monitor.finish();
    let oom = runtime_output(runtime, &["inspect", "-f", "{{.State.OOMKilled}}", name])?;
    let code = runtime_output(runtime, &["inspect", "-f", "{{.State.ExitCode}}", name])?
        .parse()
        .ok();
    let _ = runtime_output(runtime, &["rm", "-f", name]);
    Ok(ExecOutcome {
        code,
        signal: None,
        timed_out,
        oom_killed: oom == "true",
        trace,
    })
}

/// Runs a crash input against a sanitizer build and returns stderr, which
/// holds the sanitizer report if one fired.
pub fn sanitizer_transcript(
    binary: &Path,
    args: &[String],
    input: &Path,
    timeout: Duration,
) -> std::io::Result<String> {
    let (args, stdin) = substitute_input(args, input);
    let mut cmd = Command::new(binary);
    cmd.args(args)
        .env("ASAN_OPTIONS", "abort_on_error=0:symbolize=1:detect_leaks=1")
        .env("ASAN_SYMBOLIZER_PATH", std::env::var("ASAN_SYMBOLIZER_PATH").unwrap_or_default());
    Ok(run_with_timeout(cmd, stdin.as_deref(), timeout)?.stderr)
}

/// Runs a crash input under `gdb -batch` and returns its output: the
/// signal line and a backtrace when the program faults. `extra` commands
/// run after the backtrace (e.g. an exploitability classifier).
pub fn debugger_transcript(
    gdb: &Path,
    binary: &Path,
    args: &[String],
    input: &Path,
    extra: &[String],
    timeout: Duration,
) -> std::io::Result<String> {
    let (args, stdin) = substitute_input(args, input);
    let run = match &stdin {
        Some(p) => format!("run < '{}'", p.display()),
        None => "run".to_string(),
    };
    let mut cmd = Command::new(gdb);
    cmd.args(["-q", "-nx", "-batch", "-ex", "set pagination off", "-ex", &run, "-ex", "bt"]);
    for e in extra {
        cmd.args(["-ex", e]);
    }
    cmd.arg("--args").arg(binary).args(args);
    let out = run_with_timeout(cmd, None, timeout)?;
    Ok(out.stdout + &out.stderr)
}

/// Whether one execution of a crash input misbehaved: killed by a signal,
/// or a sanitizer reported an error.
pub fn crashed(out: &RunOutput) -> bool {
    out.signal.is_some() || out.stderr.contains("ERROR: ") && out.stderr.contains("Sanitizer")
}

/// Re-executes `input` against each labelled binary and records whether
/// it crashed there.
pub fn reexecute(
    input: &Path,
    binaries: &[(String, PathBuf)],
    args: &[String],
    timeout: Duration,
) -> std::io::Result<BTreeMap<String, bool>> {
    let mut outcomes = BTreeMap::new();
    for (label, binary) in binaries {
        let (argv, stdin) = substitute_input(args, input);
        let mut cmd = Command::new(binary);
        cmd.args(argv);
        let out = run_with_timeout(cmd, stdin.as_deref(), timeout)?;
        outcomes.insert(label.clone(), crashed(&out) && !out.timed_out);
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_substitution() {
        let args = vec!["-d".to_string(), "@@".to_string()];
        let (a, s) = substitute_input(&args, Path::new("/x/in"));
        assert_eq!(a, vec!["-d", "/x/in"]);
        assert!(s.is_none());
        let (a, s) = substitute_input(&["-q".to_string()], Path::new("/x/in"));
        assert_eq!(a, vec!["-q"]);
        assert_eq!(s.unwrap(), PathBuf::from("/x/in"));
    }

    #[test]
    fn timeout_kills_the_group() {
        let mut cmd = Command::new("sh");
        cmd.args(["-c", "sleep 30 & sleep 30"]);
        let t0 = Instant::now();
        let out = run_with_timeout(cmd, None, Duration::from_millis(200)).unwrap();
        assert!(out.timed_out);
        assert!(t0.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn signal_counts_as_crash() {
        let mut cmd = Command::new("sh");
        cmd.args(["-c", "kill -SEGV $$"]);
        let out = run_with_timeout(cmd, None, Duration::from_secs(5)).unwrap();
        assert_eq!(out.signal, Some(libc::SIGSEGV));
        assert!(crashed(&out));
        let ok = run_with_timeout(Command::new("true"), None, Duration::from_secs(5)).unwrap();
        assert!(!crashed(&ok));
    }

    #[test]
    fn bare_run_stops_at_deadline() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ProcessSpec {
            program: "sleep".into(),
            args: vec!["30".into()],
            cwd: dir.path().to_path_buf(),
            ..Default::default()
        };
        let env = ResourceEnvelope {
            cpu_cores: 1,
            mem_limit_mb: 2048,
            swap_limit_mb: 1024,
            escalated: false,
        };
        let out = run_bare(&spec, &env, Duration::from_millis(300), Duration::from_millis(100), 0).unwrap();
        assert!(out.timed_out);
        assert!(!out.oom_killed);
        assert!(!out.trace.samples.is_empty());
    }

    #[test]
    fn memory_limit_trips() {
        let dir = tempfile::tempdir().unwrap();
        // python allocates and touches ~64 MB, far above a 16 MB limit.
        let spec = ProcessSpec {
            program: "python3".into(),
            args: vec!["-c".into(), "import time; b = bytearray(64 << 20); time.sleep(30)".into()],
            cwd: dir.path().to_path_buf(),
            ..Default::default()
        };
        let env = ResourceEnvelope {
            cpu_cores: 1,
            mem_limit_mb: 16,
            swap_limit_mb: 0,
            escalated: false,
        };
        let out = run_bare(&spec, &env, Duration::from_secs(20), Duration::from_millis(100), 0).unwrap();
        assert!(out.oom_killed);
        assert!(!out.timed_out);
    }

    #[test]
    fn container_arguments() {
        let spec = ProcessSpec {
            program: "afl-fuzz".into(),
            args: vec!["-i".into(), "seeds".into()],
            cwd: PathBuf::from("/w"),
            image: Some("fuzz:latest".into()),
            ..Default::default()
        };
        let env = ResourceEnvelope {
            cpu_cores: 1,
            mem_limit_mb: 2048,
            swap_limit_mb: 1024,
            escalated: false,
        };
        let argv = container_run_args("t1", &spec, &env);
        assert!(argv.contains(&"--cpus=1".to_string()));
        assert!(argv.contains(&"--memory=2048m".to_string()));
        assert!(argv.contains(&"--memory-swap=3072m".to_string()));
        assert_eq!(&argv[argv.len() - 4..], ["fuzz:latest", "afl-fuzz", "-i", "seeds"]);
    }
}
