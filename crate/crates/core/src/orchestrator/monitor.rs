//! Process-tree resource sampling from `/proc`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const LOW_CPU_PERCENT: f64 = 80.0;
/// Consecutive low samples before the trial is flagged.
pub const LOW_CPU_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub t_s: f64,
    pub cpu_percent: f64,
    pub rss_mb: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceTrace {
    pub samples: Vec<ResourceSample>,
    /// Cumulative over the whole trial.
    pub disk_read_mb: f64,
    pub disk_write_mb: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TraceLine {
    Sample(ResourceSample),
    Totals { disk_read_mb: f64, disk_write_mb: f64 },
}

impl ResourceTrace {
    pub fn max_rss_mb(&self) -> f64 {
        self.samples.iter().map(|s| s.rss_mb).fold(0.0, f64::max)
    }

    /// One JSON object per sample, then a final totals line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut out, &TraceLine::Sample(s.clone()))?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut out,
            &TraceLine::Totals {
                disk_read_mb: self.disk_read_mb,
                disk_write_mb: self.disk_write_mb,
            },
        )?;
        out.write_all(b"\n")
    }

    pub fn read_jsonl(input: impl BufRead) -> std::io::Result<ResourceTrace> {
        let mut trace = ResourceTrace::default();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                TraceLine::Sample(s) => trace.samples.push(s),
                TraceLine::Totals {
                    disk_read_mb,
                    disk_write_mb,
                } => {
                    trace.disk_read_mb = disk_read_mb;
                    trace.disk_write_mb = disk_write_mb;
                }
            }
        }
        Ok(trace)
    }

    pub fn load(path: &Path) -> std::io::Result<ResourceTrace> {
        ResourceTrace::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// True when CPU stays below [`LOW_CPU_PERCENT`] for at least
    /// [`LOW_CPU_WINDOW`] consecutive samples after the first.
    pub fn low_cpu_warning(&self) -> bool {
        let mut run = 0;
        for s in self.samples.iter().skip(1) {
            if s.cpu_percent < LOW_CPU_PERCENT {
                run += 1;
                if run >= LOW_CPU_WINDOW {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    }
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as u64
    } else {
        4096
    }
}

fn clock_ticks() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if v > 0 {
        v as f64
    } else {
        100.0
    }
}

struct ProcStat {
    zombie: bool,
    ppid: i32,
    cpu_ticks: u64,
    start_ticks: u64,
}

fn read_stat(pid: i32) -> Option<ProcStat> {
    let text = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // The command name is parenthesized and may contain spaces.
    let after = &text[text.rfind(')')? + 2..];
    let fields: Vec<&str> = after.split_whitespace().collect();
    // fields[0] is state (field 3 of the full line).
    Some(ProcStat {
        zombie: matches!(fields.first(), Some(&"Z") | Some(&"X")),
        ppid: fields.get(1)?.parse().ok()?,
        cpu_ticks: fields.get(11)?.parse::<u64>().ok()? + fields.get(12)?.parse::<u64>().ok()?,
        start_ticks: fields.get(19)?.parse().ok()?,
    })
}

fn read_rss_bytes(pid: i32, page: u64) -> Option<u64> {
    let text = std::fs::read_to_string(format!("/proc/{pid}/statm")).ok()?;
    let resident: u64 = text.split_whitespace().nth(1)?.parse().ok()?;
    Some(resident * page)
}

fn read_io(pid: i32) -> Option<(u64, u64)> {
    let text = std::fs::read_to_string(format!("/proc/{pid}/io")).ok()?;
    let mut read = None;
    let mut write = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("read_bytes:") {
            read = v.trim().parse().ok();
        } else if let Some(v) = line.strip_prefix("write_bytes:") {
            write = v.trim().parse().ok();
        }
    }
    Some((read?, write?))
}

fn uptime_s() -> Option<f64> {
    std::fs::read_to_string("/proc/uptime")
        .ok()?
        .split_whitespace()
        .next()?
        .parse()
        .ok()
}

/// Root plus all of its live descendants.
pub fn process_tree(root: i32) -> Vec<i32> {
    let mut children: BTreeMap<i32, Vec<i32>> = BTreeMap::new();
    let mut alive = BTreeSet::new();
    if let Ok(entries) = std::fs::read_dir("/proc") {
        for entry in entries.flatten() {
            let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<i32>().ok()) else {
                continue;
            };
            if let Some(stat) = read_stat(pid) {
                if !stat.zombie {
                    alive.insert(pid);
                }
                children.entry(stat.ppid).or_default().push(pid);
            }
        }
    }
    let mut tree = Vec::new();
    let mut seen = BTreeSet::new();
    let mut stack = vec![root];
    while let Some(pid) = stack.pop() {
        if !seen.insert(pid) {
            continue;
        }
        if alive.contains(&pid) {
            tree.push(pid);
        }
        if let Some(kids) = children.get(&pid) {
            stack.extend(kids);
        }
    }
    tree
}

/// Stateful sampler that turns successive `/proc` snapshots into samples.
pub struct TreeSampler {
    root: i32,
    page: u64,
    ticks_per_s: f64,
    started: Instant,
    last: Option<(Instant, BTreeMap<i32, u64>)>,
    io_peak: BTreeMap<i32, (u64, u64)>,
}

impl TreeSampler {
    pub fn new(root: i32) -> TreeSampler {
        TreeSampler {
            root,
            page: page_size(),
            ticks_per_s: clock_ticks(),
            started: Instant::now(),
            last: None,
            io_peak: BTreeMap::new(),
        }
    }

    /// `None` once the root process is gone.
    pub fn sample(&mut self) -> Option<ResourceSample> {
        let now = Instant::now();
        let pids = process_tree(self.root);
        if pids.is_empty() {
            return None;
        }
        let mut ticks = BTreeMap::new();
        let mut rss = 0u64;
        let mut lifetime_cpu = 0.0;
        let uptime = uptime_s();
        for &pid in &pids {
            let Some(stat) = read_stat(pid) else { continue };
            ticks.insert(pid, stat.cpu_ticks);
            rss += read_rss_bytes(pid, self.page).unwrap_or(0);
            if let Some(up) = uptime {
                let age = up - stat.start_ticks as f64 / self.ticks_per_s;
                if age > 0.0 {
                    lifetime_cpu += stat.cpu_ticks as f64 / self.ticks_per_s / age;
                }
            }
            if let Some((r, w)) = read_io(pid) {
                let peak = self.io_peak.entry(pid).or_insert((0, 0));
                peak.0 = peak.0.max(r);
                peak.1 = peak.1.max(w);
            }
        }
        let cpu_percent = match &self.last {
            Some((when, prev)) => {
                let elapsed = now.duration_since(*when).as_secs_f64();
                let delta: u64 = ticks
                    .iter()
                    .map(|(pid, t)| t.saturating_sub(prev.get(pid).copied().unwrap_or(0)))
                    .sum();
                if elapsed > 0.0 {
                    100.0 * delta as f64 / self.ticks_per_s / elapsed
                } else {
                    0.0
                }
            }
            None => 100.0 * lifetime_cpu,
        };
        self.last = Some((now, ticks));
        Some(ResourceSample {
            t_s: now.duration_since(self.started).as_secs_f64(),
            cpu_percent,
            rss_mb: rss as f64 / (1024.0 * 1024.0),
        })
    }

    pub fn disk_totals_mb(&self) -> (f64, f64) {
        let (r, w) = self
            .io_peak
            .values()
            .fold((0u64, 0u64), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        let mb = 1024.0 * 1024.0;
        (r as f64 / mb, w as f64 / mb)
    }
}

/// Called with each sample; returning `false` stops monitoring.
pub type SampleHook = Box<dyn FnMut(&ResourceSample) -> bool + Send>;

/// Background sampling loop for a running process tree.
pub struct ResourceMonitor {
    stop: mpsc::Sender<()>,
    handle: JoinHandle<ResourceTrace>,
    tripped: Arc<AtomicBool>,
}

impl ResourceMonitor {
    pub fn spawn(root: i32, interval: Duration, mut hook: Option<SampleHook>) -> ResourceMonitor {
        let (stop, stopped) = mpsc::channel();
        let tripped = Arc::new(AtomicBool::new(false));
        let flag = tripped.clone();
        let handle = std::thread::spawn(move || {
            let mut sampler = TreeSampler::new(root);
            let mut trace = ResourceTrace::default();
            let mut next = Instant::now();
            loop {
                match sampler.sample() {
                    Some(s) => {
                        let keep_going = hook.as_mut().map_or(true, |h| h(&s));
                        trace.samples.push(s);
                        if !keep_going {
                            flag.store(true, Ordering::SeqCst);
                        }
                    }
                    None => break,
                }
                next += interval;
                let wait = next.saturating_duration_since(Instant::now());
                match stopped.recv_timeout(wait) {
                    Err(mpsc::RecvTimeoutError::Timeout) => {}
                    _ => break,
                }
            }
            let (r, w) = sampler.disk_totals_mb();
            trace.disk_read_mb = r;
            trace.disk_write_mb = w;
            trace
        });
        ResourceMonitor {
            stop,
            handle,
            tripped,
        }
    }

    /// Whether the hook asked to stop (e.g. a memory limit was exceeded).
    pub fn tripped(&self) -> bool {
        self.tripped.load(Ordering::SeqCst)
    }

    pub fn finish(self) -> ResourceTrace {
        let _ = self.stop.send(());
        self.handle.join().unwrap_or_default()
    }
}

/// Samples `root`'s process tree every `interval` until it exits or
/// `max_duration` passes.
pub fn monitor_resources(root: i32, interval: Duration, max_duration: Duration) -> ResourceTrace {
    let deadline = Instant::now() + max_duration;
    let mut sampler = TreeSampler::new(root);
    let mut trace = ResourceTrace::default();
    let mut next = Instant::now();
    while Instant::now() <= deadline {
        match sampler.sample() {
            Some(s) => trace.samples.push(s),
            None => break,
        }
        next += interval;
        if next > deadline {
            break;
        }
        std::thread::sleep(next.saturating_duration_since(Instant::now()));
    }
    let (r, w) = sampler.disk_totals_mb();
    trace.disk_read_mb = r;
    trace.disk_write_mb = w;
    trace
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(cpu: &[f64]) -> ResourceTrace {
        ResourceTrace {
            samples: cpu
                .iter()
                .enumerate()
                .map(|(i, &c)| ResourceSample {
                    t_s: i as f64,
                    cpu_percent: c,
                    rss_mb: 1.0,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn low_cpu_needs_a_sustained_run() {
        assert!(!trace(&[0., 99., 99., 50., 99., 99.]).low_cpu_warning());
        assert!(trace(&[99., 10., 20., 30., 40., 50.]).low_cpu_warning());
        assert!(!trace(&[10., 99., 99.]).low_cpu_warning());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut t = trace(&[1.5, 2.5]);
        t.disk_read_mb = 3.0;
        t.disk_write_mb = 4.25;
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert_eq!(ResourceTrace::read_jsonl(&buf[..]).unwrap(), t);
    }

    #[test]
    fn samples_own_process() {
        let me = std::process::id() as i32;
        let mut sampler = TreeSampler::new(me);
        let s = sampler.sample().unwrap();
        assert!(s.rss_mb > 0.0);
        assert!(process_tree(me).contains(&me));
    }

    #[test]
    fn vanished_root_yields_empty_trace() {
        let mut child = std::process::Command::new("true").spawn().unwrap();
        let pid = child.id() as i32;
        child.wait().unwrap();
        let t = monitor_resources(pid, Duration::from_millis(50), Duration::from_secs(1));
        assert!(t.samples.is_empty());
    }
}
