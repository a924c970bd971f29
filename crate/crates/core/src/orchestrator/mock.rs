//! Deterministic simulated fuzzer. Bugs are found after exponentially
//! distributed delays; crash transcripts are rendered in the same text
//! formats the real tools produce so the full triage path is exercised.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{MockAdapter, MockBug, MockTarget};
use super::monitor::{ResourceSample, ResourceTrace};
use crate::model::canonicalize_vuln_type;
use crate::model::VulnKind;

/// Re-discoveries of one bug are capped so long runs stay small.
pub const MAX_DUPLICATES_PER_BUG: usize = 20;
pub const MAX_COVERAGE_INPUTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockFuzzerProfile {
    pub rng_seed: u64,
    /// Planted bugs with their per-hour discovery hazard.
    pub catalog: Vec<(MockBug, f64)>,
    pub crash_rate_per_hour: f64,
    pub coverage_rate_per_hour: f64,
    pub total_lines: u32,
    pub cpu_percent: f64,
    pub rss_mb: f64,
}

impl MockFuzzerProfile {
    /// Combines a fuzzer's skill with a target's bug catalog.
    pub fn new(adapter: &MockAdapter, target: &MockTarget, rng_seed: u64) -> MockFuzzerProfile {
        let catalog = target
            .bugs
            .iter()
            .map(|b| {
                let hazard = adapter
                    .hazard_overrides
                    .get(&b.id)
                    .copied()
                    .unwrap_or(b.hazard_per_hour * adapter.skill);
                (b.clone(), hazard.max(0.0))
            })
            .collect();
        MockFuzzerProfile {
            rng_seed,
            catalog,
            crash_rate_per_hour: adapter.crash_rate_per_hour,
            coverage_rate_per_hour: adapter.coverage_rate_per_hour,
            total_lines: target.total_lines,
            cpu_percent: adapter.cpu_percent,
            rss_mb: adapter.rss_mb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum MockEvent {
    /// A crashing input for catalog bug `bug`; variant 0 is the first hit.
    Crash { time_s: f64, bug: usize, variant: u32 },
    /// A coverage-increasing input executing lines `lo..=hi` plus the
    /// entry block.
    Coverage { time_s: f64, lo: u32, hi: u32 },
}

impl MockEvent {
    pub fn time_s(&self) -> f64 {
        match self {
            MockEvent::Crash { time_s, .. } | MockEvent::Coverage { time_s, .. } => *time_s,
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Arrival times of a Poisson process with `rate_per_s` on `(from, until]`.
fn arrivals(rng: &mut ChaCha8Rng, rate_per_s: f64, from: f64, until: f64, cap: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let Ok(exp) = Exp::new(rate_per_s) else {
        return out;
    };
    if rate_per_s <= 0.0 {
        return out;
    }
    let mut t = from;
    while out.len() < cap {
        t += exp.sample(rng);
        if t > until {
            break;
        }
        out.push(t);
    }
    out
}

/// The event stream of one simulated trial. Each bug and the coverage
/// process draw from their own ChaCha stream, so the stream is a pure
/// function of the profile and duration.
pub fn mock_fuzz(profile: &MockFuzzerProfile, duration_s: f64) -> Vec<MockEvent> {
    let mut events = Vec::new();
    for (i, (_, hazard)) in profile.catalog.iter().enumerate() {
        let mut rng = stream(profile.rng_seed, i as u64 + 1);
        let first = arrivals(&mut rng, hazard / 3600.0, 0.0, duration_s, 1);
        let Some(&t0) = first.first() else { continue };
        events.push(MockEvent::Crash {
            time_s: t0,
            bug: i,
            variant: 0,
        });
        let dups = arrivals(
            &mut rng,
            profile.crash_rate_per_hour / 3600.0,
            t0,
            duration_s,
            MAX_DUPLICATES_PER_BUG,
        );
        for (k, t) in dups.into_iter().enumerate() {
            events.push(MockEvent::Crash {
                time_s: t,
                bug: i,
                variant: k as u32 + 1,
            });
        }
    }
    let mut rng = stream(profile.rng_seed, 0);
    let total = profile.total_lines.max(1);
    let span = (total / 10).max(1);
    for t in arrivals(
        &mut rng,
        profile.coverage_rate_per_hour / 3600.0,
        0.0,
        duration_s,
        MAX_COVERAGE_INPUTS,
    ) {
        let lo = rng.random_range(1..=total);
        let hi = (lo + rng.random_range(0..span)).min(total);
        events.push(MockEvent::Coverage { time_s: t, lo, hi });
    }
    events.sort_by(|a, b| a.time_s().total_cmp(&b.time_s()));
    events
}

/// Body of a saved coverage input, readable by the mock coverage source.
pub fn coverage_input(lo: u32, hi: u32, total_lines: u32) -> String {
    format!("MOCKCOV 1-{},{lo}-{hi}\n", total_lines.clamp(1, 10))
}

/// Synthetic resource trace sampled every `interval_s`.
pub fn mock_trace(profile: &MockFuzzerProfile, duration_s: f64, interval_s: f64) -> ResourceTrace {
    let mut rng = stream(profile.rng_seed, u64::MAX);
    let n = (duration_s / interval_s).floor() as usize;
    let samples = (0..=n)
        .map(|k| {
            let frac = k as f64 / n.max(1) as f64;
            ResourceSample {
                t_s: k as f64 * interval_s,
                cpu_percent: (profile.cpu_percent + rng.random_range(-1.0..1.0)).clamp(0.0, 100.0),
                rss_mb: profile.rss_mb * (0.5 + 0.5 * frac),
            }
        })
        .collect();
    ResourceTrace {
        samples,
        disk_read_mb: 0.5 * duration_s / 60.0,
        disk_write_mb: (2.0 + 0.1 * rng.random_range(0.0..1.0)) * duration_s / 60.0,
    }
}

/// Contents of a mock crash file.
pub fn crash_input(bug: &MockBug, variant: u32) -> String {
    format!("MOCKCRASH {} {variant}\n", bug.id)
}

fn addr(seed: &str, salt: u32) -> u64 {
    let h = Sha256::digest(format!("{seed}/{salt}").as_bytes());
    0x5555_0000_0000 | (u64::from_le_bytes(h[..8].try_into().unwrap()) & 0xffff_fff0)
}

fn source_line(depth: usize, variant: u32) -> u32 {
    // Deeper frames move between variants; function names do not.
    10 + 17 * depth as u32 + if depth == 0 { 0 } else { variant % 4 }
}

fn program_frames(bug: &MockBug) -> Vec<String> {
    let mut frames = bug.frames.clone();
    if frames.last().map(String::as_str) != Some("main") {
        frames.push("main".into());
    }
    frames
}

fn asan_label(kind: &VulnKind) -> (&str, &str) {
    match kind {
        VulnKind::Segv => ("SEGV on unknown address 0x000000000000", "SEGV"),
        VulnKind::FloatPointException => ("FPE on unknown address 0x555555555229", "FPE"),
        VulnKind::UseAfterFree => ("heap-use-after-free on address 0x603000000010", "heap-use-after-free"),
        VulnKind::FreeError => ("attempting double-free on 0x602000000010 in thread T0:", "double-free"),
        VulnKind::ExcessiveMemoryAllocation => (
            "requested allocation size 0xffffffffffffffff exceeds maximum supported size of 0x10000000000 (thread T0)",
            "allocation-size-too-big",
        ),
        VulnKind::MemcpyParamOverlap => (
            "memcpy-param-overlap: memory ranges [0x602000000010,0x602000000020) and [0x602000000018, 0x602000000028) overlap",
            "memcpy-param-overlap",
        ),
        _ => ("", ""),
    }
}

/// AddressSanitizer output for one crash, or the program's ordinary
/// output when the sanitizer does not detect this bug.
pub fn sanitizer_transcript(bug: &MockBug, variant: u32) -> String {
    if !bug.sanitizer_detects {
        return "processing input\n".to_string();
    }
    let kind = canonicalize_vuln_type(&bug.vuln).kind;
    let pid = 1000 + variant;
    let mut out = String::new();
    let mut frames: Vec<(String, String)> = Vec::new();
    let leak = kind == VulnKind::MemoryLeak;
    if bug.interceptor || leak {
        let name = if leak { "__interceptor_malloc" } else { "__interceptor_memcpy" };
        frames.push((
            name.to_string(),
            "../../../../src/libsanitizer/asan/asan_interceptors.cpp:145".into(),
        ));
    }
    for (d, f) in program_frames(bug).iter().enumerate() {
        frames.push((f.clone(), format!("/src/mock/{}.c:{}", bug.id, source_line(d, variant))));
    }
    if !leak {
        frames.push((
            "__libc_start_call_main".into(),
            "../sysdeps/nptl/libc_start_call_main.h:58".into(),
        ));
        frames.push(("__libc_start_main_impl".into(), "../csu/libc-start.c:392".into()));
    }

    out.push_str("=================================================================\n");
    let summary = if leak {
        let _ = writeln!(out, "=={pid}==ERROR: LeakSanitizer: detected memory leaks\n");
        out.push_str("Direct leak of 40 byte(s) in 1 object(s) allocated from:\n");
        "40 byte(s) leaked in 1 allocation(s).".to_string()
    } else {
        let (h, s) = asan_label(&kind);
        let (h, s) = if h.is_empty() {
            let raw = bug.vuln.clone();
            (format!("{raw} on address 0x602000000011 at pc 0x555555555229"), raw)
        } else {
            (h.to_string(), s.to_string())
        };
        let _ = writeln!(out, "=={pid}==ERROR: AddressSanitizer: {h}");
        s
    };
    for (i, (name, loc)) in frames.iter().enumerate() {
        let _ = writeln!(out, "    #{i} 0x{:x} in {name} {loc}", addr(name, variant));
    }
    if !leak {
        let _ = writeln!(
            out,
            "    #{} 0x{:x} in _start (/src/mock/{}.asan+0x11c4)",
            frames.len(),
            addr("_start", variant),
            bug.id
        );
    }
    out.push('\n');
    let first_program = program_frames(bug)[0].clone();
    if leak {
        let _ = writeln!(out, "SUMMARY: AddressSanitizer: {summary}");
    } else {
        let _ = writeln!(
            out,
            "SUMMARY: AddressSanitizer: {summary} /src/mock/{}.c:{} in {first_program}",
            bug.id,
            source_line(0, variant)
        );
        let _ = writeln!(out, "=={pid}==ABORTING");
    }
    out
}

fn signal_of(kind: &VulnKind) -> (&'static str, &'static str) {
    match kind {
        VulnKind::FloatPointException => ("SIGFPE", "Arithmetic exception"),
        VulnKind::ExcessiveMemoryAllocation | VulnKind::FreeError => ("SIGABRT", "Aborted"),
        _ => ("SIGSEGV", "Segmentation fault"),
    }
}

/// GDB batch output for one crash, followed by an exploitability
/// classifier block when the bug declares one.
pub fn debugger_transcript(bug: &MockBug, variant: u32) -> String {
    if !bug.debugger_detects {
        return format!("processing input\n[Inferior 1 (process {}) exited normally]\n", 2000 + variant);
    }
    let kind = canonicalize_vuln_type(&bug.vuln).kind;
    let (sig, desc) = signal_of(&kind);
    let frames = program_frames(bug);
    let mut out = String::from("[Thread debugging using libthread_db enabled]\n");
    let _ = writeln!(out, "\nProgram received signal {sig}, {desc}.");
    let _ = writeln!(
        out,
        "0x{:x} in {} () at /src/mock/{}.c:{}",
        addr(&frames[0], variant),
        frames[0],
        bug.id,
        source_line(0, variant)
    );
    for (i, f) in frames.iter().enumerate() {
        let _ = writeln!(
            out,
            "#{i}  0x{:x} in {f} () at /src/mock/{}.c:{}",
            addr(f, variant),
            bug.id,
            source_line(i, variant)
        );
    }
    if let Some(category) = &bug.exploitable {
        let h = hex::encode(Sha256::digest(frames.join("/").as_bytes()));
        out.push_str("Description: Mock classification\n");
        out.push_str("Short description: MockFault (1/22)\n");
        let _ = writeln!(out, "Hash: {}.{}", &h[..32], &h[32..]);
        let _ = writeln!(out, "Exploitability Classification: {category}");
        out.push_str("Explanation: Synthetic crash.\n");
    }
    out
}
