//! Campaign planning, trial execution and the on-disk campaign layout:
//! `<out>/<fuzzer>/<target>/rep<k>/{crashes/, queue/, transcripts/,
//! trace.jsonl, trial.json}` plus `<out>/campaign.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{
    AdapterDescriptor, CampaignConfig, MockAdapter, MockTarget, ProcessTarget, TargetDescriptor,
};
use super::executor::{self, ProcessSpec, ResourceEnvelope};
use super::mock::{self, MockEvent, MockFuzzerProfile};
use super::monitor::ResourceTrace;
use super::seeds::{select_seeds, SeedSet};
use super::OrchestratorError;
use crate::model::{ToolId, ToolKind};

pub const TRIAL_FILE: &str = "trial.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const MANIFEST_FILE: &str = "campaign.json";
const TRANSCRIPT_TIMEOUT: Duration = Duration::from_secs(10);

/// Derives an independent 64-bit seed from the campaign seed and a label.
pub fn derive_seed(rng_seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(rng_seed.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub fuzzer: String,
    pub target: String,
    pub rep: u32,
    pub workdir: PathBuf,
    pub envelope: ResourceEnvelope,
    pub seeds: SeedSet,
    pub trial_seed: u64,
    pub duration_s: f64,
    pub monitor_interval_s: f64,
}

impl TrialPlan {
    pub fn trial_id(&self) -> String {
        trial_id(&self.fuzzer, &self.target, self.rep)
    }
}

pub fn trial_id(fuzzer: &str, target: &str, rep: u32) -> String {
    format!("{fuzzer}/{target}/rep{rep}")
}

/// One harvested crash input, relative to the trial directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashEntry {
    pub input: String,
    pub discovery_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExitStatus {
    /// Still running at the deadline and stopped, the normal case.
    DurationReached,
    Exited { code: i32 },
    Signaled { signal: i32 },
    OutOfMemory,
}

impl ExitStatus {
    pub fn is_abnormal(&self) -> bool {
        !matches!(self, ExitStatus::DurationReached | ExitStatus::Exited { code: 0 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub fuzzer: String,
    pub target: String,
    pub rep: u32,
    pub config_digest: String,
    pub trial_seed: u64,
    pub seed_digest: String,
    /// Seconds since the epoch; simulated trials start at 0.
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
    pub crashes: Vec<CrashEntry>,
    pub coverage_inputs: Vec<String>,
    pub trace: String,
    pub exit_status: ExitStatus,
    pub envelope: ResourceEnvelope,
    #[serde(default)]
    pub low_cpu_warning: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TrialRecord {
    pub fn trial_id(&self) -> String {
        trial_id(&self.fuzzer, &self.target, self.rep)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), OrchestratorError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(OrchestratorError::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

/// Seed set shared by every fuzzer on `target`.
fn target_seeds(config: &CampaignConfig, target: &str) -> Result<SeedSet, OrchestratorError> {
    let dir = match config.target_defs.get(target) {
        Some(TargetDescriptor::Process(t)) => t.seed_dir.clone(),
        Some(TargetDescriptor::Mock(t)) => t.seed_dir.clone(),
        None => return Err(OrchestratorError::UnknownTarget(target.to_string())),
    };
    let rng_seed = derive_seed(config.rng_seed, &["seeds", target]);
    match dir {
        Some(dir) => select_seeds(&dir, config.seed_count, config.seed_max_bytes, rng_seed),
        None => Ok(SeedSet {
            rng_seed,
            ..Default::default()
        }),
    }
}

/// One plan per (fuzzer, target, repetition), in that nesting order.
pub fn plan_campaign(config: &CampaignConfig, out: &Path) -> Result<Vec<TrialPlan>, OrchestratorError> {
    config.validate()?;
    for f in &config.fuzzers {
        if !config.adapters.contains_key(f) {
            return Err(OrchestratorError::UnknownFuzzer(f.clone()));
        }
    }
    let mut seed_sets = BTreeMap::new();
    for t in &config.targets {
        seed_sets.insert(t.clone(), target_seeds(config, t)?);
    }
    let envelope = ResourceEnvelope {
        cpu_cores: config.cpu_cores_per_trial,
        mem_limit_mb: config.mem_limit_mb,
        swap_limit_mb: config.swap_limit_mb,
        escalated: false,
    };
    let mut plans = Vec::new();
    for fuzzer in &config.fuzzers {
        for target in &config.targets {
            for rep in 0..config.repetitions {
                plans.push(TrialPlan {
                    fuzzer: fuzzer.clone(),
                    target: target.clone(),
                    rep,
                    workdir: out.join(fuzzer).join(target).join(format!("rep{rep}")),
                    envelope: envelope.clone(),
                    seeds: seed_sets[target].clone(),
                    trial_seed: derive_seed(
                        config.rng_seed,
                        &["trial", fuzzer, target, &rep.to_string()],
                    ),
                    duration_s: config.duration_s,
                    monitor_interval_s: config.monitor_interval_s,
                });
            }
        }
    }
    Ok(plans)
}

fn fresh_dir(path: &Path) -> Result<(), OrchestratorError> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(OrchestratorError::io(path))?;
    }
    for sub in ["crashes", "queue", "transcripts"] {
        let p = path.join(sub);
        fs::create_dir_all(&p).map_err(OrchestratorError::io(&p))?;
    }
    Ok(())
}

/// Runs one trial, retrying once at the escalated memory limit when the
/// first attempt runs out of memory, and writes its artifacts.
pub fn run_trial(
    plan: &TrialPlan,
    config: &CampaignConfig,
    core_offset: usize,
) -> Result<TrialRecord, OrchestratorError> {
    let mut record = attempt(plan, config, core_offset)?;
    if record.exit_status == ExitStatus::OutOfMemory && !plan.envelope.escalated {
        log::warn!(
            "{} ran out of memory at {} MB; retrying at {} MB",
            plan.trial_id(),
            plan.envelope.mem_limit_mb,
            config.mem_escalation_mb
        );
        let retry = TrialPlan {
            envelope: plan.envelope.escalate(config.mem_escalation_mb),
            ..plan.clone()
        };
        record = attempt(&retry, config, core_offset)?;
    }
    write_json(&plan.workdir.join(TRIAL_FILE), &record)?;
    Ok(record)
}

fn attempt(
    plan: &TrialPlan,
    config: &CampaignConfig,
    core_offset: usize,
) -> Result<TrialRecord, OrchestratorError> {
    fresh_dir(&plan.workdir)?;
    let adapter = config
        .adapters
        .get(&plan.fuzzer)
        .ok_or_else(|| OrchestratorError::UnknownFuzzer(plan.fuzzer.clone()))?;
    let target = config
        .target_defs
        .get(&plan.target)
        .ok_or_else(|| OrchestratorError::UnknownTarget(plan.target.clone()))?;
    let mut record = TrialRecord {
        fuzzer: plan.fuzzer.clone(),
        target: plan.target.clone(),
        rep: plan.rep,
        config_digest: config.digest(),
        trial_seed: plan.trial_seed,
        seed_digest: plan.seeds.digest(),
        start_s: 0.0,
        end_s: 0.0,
        duration_s: plan.duration_s,
        crashes: Vec::new(),
        coverage_inputs: Vec::new(),
        trace: TRACE_FILE.to_string(),
        exit_status: ExitStatus::DurationReached,
        envelope: plan.envelope.clone(),
        low_cpu_warning: false,
        warnings: plan.seeds.warning.iter().cloned().collect(),
    };
    let trace = match (adapter, target) {
        (AdapterDescriptor::Mock(a), TargetDescriptor::Mock(t)) => {
            run_mock(plan, config, a, t, &mut record)?
        }
        (
            AdapterDescriptor::Process {
                launch,
                crash_glob,
                coverage_glob,
                env,
                image,
            },
            TargetDescriptor::Process(t),
        ) => {
            let launch = Launch {
                template: launch,
                crash_glob,
                coverage_glob,
                env,
                image: image.as_deref(),
            };
            run_process(plan, config, &launch, t, core_offset, &mut record)?
        }
        _ => {
            return Err(OrchestratorError::Config(format!(
                "fuzzer `{}` and target `{}` are not both mock or both process",
                plan.fuzzer, plan.target
            )))
        }
    };
    record.low_cpu_warning = trace.low_cpu_warning();
    if record.low_cpu_warning {
        log::warn!("{}: sustained CPU utilization below 80%", plan.trial_id());
        record
            .warnings
            .push("sustained CPU utilization below 80%".to_string());
    }
    let trace_path = plan.workdir.join(TRACE_FILE);
    let file = fs::File::create(&trace_path).map_err(OrchestratorError::io(&trace_path))?;
    trace
        .write_jsonl(std::io::BufWriter::new(file))
        .map_err(OrchestratorError::io(&trace_path))?;
    Ok(record)
}

fn tool_kinds(config: &CampaignConfig) -> Vec<(ToolId, ToolKind)> {
    config
        .triage
        .tools_by_priority()
        .filter_map(|t| config.triage.tool_kinds.get(t).map(|k| (t.clone(), *k)))
        .collect()
}

/// Path of the transcript `tool` produced for a crash file.
pub fn transcript_path(trial_dir: &Path, crash_input: &str, tool: &ToolId) -> PathBuf {
    let name = Path::new(crash_input)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    trial_dir.join("transcripts").join(format!("{name}.{tool}.txt"))
}

fn write_file(path: &Path, contents: &str) -> Result<(), OrchestratorError> {
    fs::write(path, contents).map_err(OrchestratorError::io(path))
}

fn run_mock(
    plan: &TrialPlan,
    config: &CampaignConfig,
    adapter: &MockAdapter,
    target: &MockTarget,
    record: &mut TrialRecord,
) -> Result<ResourceTrace, OrchestratorError> {
    let profile = MockFuzzerProfile::new(adapter, target, plan.trial_seed);
    record.start_s = 0.0;
    record.end_s = plan.duration_s;
    let mut trace = mock::mock_trace(&profile, plan.duration_s, plan.monitor_interval_s);
    if profile.rss_mb > plan.envelope.mem_limit_mb as f64 {
        // The simulated process dies once its memory ramp crosses the limit.
        let cut = trace
            .samples
            .iter()
            .position(|s| s.rss_mb > plan.envelope.mem_limit_mb as f64)
            .unwrap_or(trace.samples.len());
        trace.samples.truncate(cut);
        record.exit_status = ExitStatus::OutOfMemory;
        record.end_s = trace.samples.last().map_or(0.0, |s| s.t_s);
        return Ok(trace);
    }
    let tools = tool_kinds(config);
    let (mut crash_n, mut queue_n) = (0usize, 0usize);
    for event in mock::mock_fuzz(&profile, plan.duration_s) {
        match event {
            MockEvent::Crash {
                time_s,
                bug,
                variant,
            } => {
                let bug = &profile.catalog[bug].0;
                let input = format!("crashes/id:{crash_n:06}");
                crash_n += 1;
                write_file(&plan.workdir.join(&input), &mock::crash_input(bug, variant))?;
                for (tool, kind) in &tools {
                    let text = match kind {
                        ToolKind::Sanitizer => mock::sanitizer_transcript(bug, variant),
                        ToolKind::Debugger => mock::debugger_transcript(bug, variant),
                    };
                    write_file(&transcript_path(&plan.workdir, &input, tool), &text)?;
                }
                record.crashes.push(CrashEntry {
                    input,
                    discovery_time_s: time_s,
                });
            }
            MockEvent::Coverage { lo, hi, .. } => {
                let input = format!("queue/id:{queue_n:06}");
                queue_n += 1;
                write_file(
                    &plan.workdir.join(&input),
                    &mock::coverage_input(lo, hi, profile.total_lines),
                )?;
                record.coverage_inputs.push(input);
            }
        }
    }
    Ok(trace)
}

struct Launch<'a> {
    template: &'a [String],
    crash_glob: &'a str,
    coverage_glob: &'a str,
    env: &'a BTreeMap<String, String>,
    image: Option<&'a str>,
}

fn expand_launch(template: &[String], vars: &[(&str, String)], target_args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for arg in template {
        if arg == "{target_args}" {
            out.extend(target_args.iter().cloned());
            continue;
        }
        let mut a = arg.clone();
        for (k, v) in vars {
            a = a.replace(k, v);
        }
        out.push(a);
    }
    out
}

fn epoch_s(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Files matching `pattern` under `dir`, sorted by path.
fn harvest(dir: &Path, pattern: &str) -> Vec<PathBuf> {
    let full = dir.join(pattern);
    let mut found: Vec<PathBuf> = glob::glob(&full.to_string_lossy())
        .map(|paths| paths.flatten().filter(|p| p.is_file()).collect())
        .unwrap_or_default();
    found.sort();
    found
}

fn run_process(
    plan: &TrialPlan,
    config: &CampaignConfig,
    launch: &Launch,
    target: &ProcessTarget,
    core_offset: usize,
    record: &mut TrialRecord,
) -> Result<ResourceTrace, OrchestratorError> {
    let seeds_dir = plan.workdir.join("seeds");
    let fuzz_out = plan.workdir.join("out");
    for d in [&seeds_dir, &fuzz_out] {
        fs::create_dir_all(d).map_err(OrchestratorError::io(d))?;
    }
    for (i, seed) in plan.seeds.files.iter().enumerate() {
        let name = seed.path.file_name().map_or_else(
            || format!("seed{i:04}"),
            |n| n.to_string_lossy().into_owned(),
        );
        fs::copy(&seed.path, seeds_dir.join(name)).map_err(OrchestratorError::io(&seed.path))?;
    }
    let vars = [
        ("{seeds}", seeds_dir.to_string_lossy().into_owned()),
        ("{out}", fuzz_out.to_string_lossy().into_owned()),
        ("{target}", target.binary.to_string_lossy().into_owned()),
    ];
    let argv = expand_launch(launch.template, &vars, &target.args);
    let Some((program, args)) = argv.split_first() else {
        return Err(OrchestratorError::Config(format!(
            "adapter `{}` has an empty launch command",
            plan.fuzzer
        )));
    };
    let spec = ProcessSpec {
        program: program.clone(),
        args: args.to_vec(),
        env: launch.env.clone(),
        cwd: plan.workdir.clone(),
        image: launch.image.map(str::to_string),
    };
    let duration = Duration::from_secs_f64(plan.duration_s);
    let interval = Duration::from_secs_f64(plan.monitor_interval_s);
    let start = SystemTime::now();
    let outcome = match &config.container_runtime {
        Some(rt) => {
            let name = format!("fuzzeval-{:016x}", plan.trial_seed);
            executor::run_container(rt, &name, &spec, &plan.envelope, duration, interval)?
        }
        None => executor::run_bare(&spec, &plan.envelope, duration, interval, core_offset)?,
    };
    let end = SystemTime::now();
    record.start_s = epoch_s(start);
    record.end_s = epoch_s(end).max(record.start_s);
    record.exit_status = if outcome.oom_killed {
        ExitStatus::OutOfMemory
    } else if outcome.timed_out {
        ExitStatus::DurationReached
    } else if let Some(signal) = outcome.signal {
        ExitStatus::Signaled { signal }
    } else {
        ExitStatus::Exited {
            code: outcome.code.unwrap_or(-1),
        }
    };
    if record.exit_status.is_abnormal() {
        log::warn!("{}: abnormal exit {:?}", plan.trial_id(), record.exit_status);
    }
    if record.exit_status == ExitStatus::OutOfMemory {
        return Ok(outcome.trace);
    }

    let tools = tool_kinds(config);
    let mut taken = BTreeSet::new();
    for (sub, pattern) in [("crashes", launch.crash_glob), ("queue", launch.coverage_glob)] {
        for src in harvest(&fuzz_out, pattern) {
            let base = src.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let mut rel = format!("{sub}/{base}");
            if !taken.insert(rel.clone()) {
                rel = format!("{sub}/{}-{base}", taken.len());
                taken.insert(rel.clone());
            }
            let dst = plan.workdir.join(&rel);
            fs::copy(&src, &dst).map_err(OrchestratorError::io(&src))?;
            if sub == "queue" {
                record.coverage_inputs.push(rel);
                continue;
            }
            // Discovery time is approximated by the file's mtime.
            let mtime = fs::metadata(&src)
                .and_then(|m| m.modified())
                .map_or(record.start_s, epoch_s);
            let t = (mtime - record.start_s).clamp(0.0, plan.duration_s);
            for (tool, kind) in &tools {
                let text = match kind {
                    ToolKind::Sanitizer => target.sanitizer_binary.as_ref().map(|b| {
                        executor::sanitizer_transcript(b, &target.args, &dst, TRANSCRIPT_TIMEOUT)
                    }),
                    ToolKind::Debugger => {
                        let extra = target
                            .exploitable_plugin
                            .as_ref()
                            .map(|p| vec![format!("source {}", p.display()), "exploitable".into()])
                            .unwrap_or_default();
                        let bin = target.debugger_binary.as_ref().unwrap_or(&target.binary);
                        Some(executor::debugger_transcript(
                            Path::new("gdb"),
                            bin,
                            &target.args,
                            &dst,
                            &extra,
                            TRANSCRIPT_TIMEOUT,
                        ))
                    }
                };
                match text {
                    Some(Ok(text)) => write_file(&transcript_path(&plan.workdir, &rel, tool), &text)?,
                    Some(Err(e)) => record.warnings.push(format!("{tool} transcript for {rel}: {e}")),
                    None => {}
                }
            }
            record.crashes.push(CrashEntry {
                input: rel,
                discovery_time_s: t,
            });
        }
    }
    record
        .crashes
        .sort_by(|a, b| a.discovery_time_s.total_cmp(&b.discovery_time_s).then(a.input.cmp(&b.input)));
    Ok(outcome.trace)
}

/// Stored at the campaign root; identifies the configuration the
/// directory belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub campaign_id: String,
    pub complete: bool,
    pub config: CampaignConfig,
    pub seed_sets: BTreeMap<String, SeedSet>,
    /// Targets whose trials all ran at the escalated memory limit.
    pub escalated_targets: Vec<String>,
}

impl CampaignManifest {
    pub fn load(out: &Path) -> Result<CampaignManifest, OrchestratorError> {
        let path = out.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(OrchestratorError::io(&path))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub campaign_id: String,
    pub trials: usize,
    pub executed: usize,
    pub resumed: usize,
    pub escalated_targets: Vec<String>,
    /// The directory already held this finished campaign; nothing ran.
    pub already_complete: bool,
}

/// Excludes concurrent invocations on one campaign directory. A lock left
/// by a dead process is taken over.
pub struct CampaignLock {
    path: PathBuf,
}

impl CampaignLock {
    pub fn acquire(out: &Path) -> Result<CampaignLock, OrchestratorError> {
        fs::create_dir_all(out).map_err(OrchestratorError::io(out))?;
        let path = out.join(".lock");
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    use std::io::Write;
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(CampaignLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder: Option<i32> = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse().ok());
                    // SAFETY: signal 0 only checks that the pid exists.
                    let alive = holder.is_some_and(|pid| unsafe { libc::kill(pid, 0) } == 0);
                    if alive {
                        return Err(OrchestratorError::Config(format!(
                            "{} is locked by process {}",
                            out.display(),
                            holder.unwrap_or_default()
                        )));
                    }
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(OrchestratorError::io(&path)(e)),
            }
        }
        Err(OrchestratorError::Config(format!("cannot lock {}", out.display())))
    }
}

impl Drop for CampaignLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn reusable(plan: &TrialPlan, digest: &str) -> Option<TrialRecord> {
    let record: TrialRecord = read_json(&plan.workdir.join(TRIAL_FILE))?;
    let same = record.config_digest == digest
        && record.trial_seed == plan.trial_seed
        && (record.envelope.escalated || !plan.envelope.escalated);
    same.then_some(record)
}

fn execute(
    plans: &[TrialPlan],
    config: &CampaignConfig,
    pool: &rayon::ThreadPool,
) -> Vec<Result<(TrialRecord, bool), OrchestratorError>> {
    let digest = config.digest();
    let cores = config.cpu_cores_per_trial as usize;
    pool.install(|| {
        plans
            .par_iter()
            .map(|plan| {
                if let Some(r) = reusable(plan, &digest) {
                    return Ok((r, false));
                }
                let slot = rayon::current_thread_index().unwrap_or(0);
                log::info!("running {}", plan.trial_id());
                run_trial(plan, config, slot * cores).map(|r| (r, true))
            })
            .collect()
    })
}

/// Runs (or resumes) every trial of the campaign in `out`. When any trial
/// of a target needed the escalated memory limit, every trial of that
/// target is brought to the same envelope so fuzzers stay comparable.
pub fn run_campaign(config: &CampaignConfig, out: &Path) -> Result<CampaignSummary, OrchestratorError> {
    let digest = config.digest();
    if let Ok(existing) = CampaignManifest::load(out) {
        if existing.campaign_id != digest {
            return Err(OrchestratorError::Config(format!(
                "{} holds campaign {} with a different configuration",
                out.display(),
                existing.campaign_id
            )));
        }
        if existing.complete {
            return Ok(CampaignSummary {
                campaign_id: digest,
                trials: config.fuzzers.len() * config.targets.len() * config.repetitions as usize,
                executed: 0,
                resumed: 0,
                escalated_targets: existing.escalated_targets,
                already_complete: true,
            });
        }
    }
    let mut plans = plan_campaign(config, out)?;
    let mut manifest = CampaignManifest {
        campaign_id: digest.clone(),
        complete: false,
        config: config.clone(),
        seed_sets: plans
            .iter()
            .map(|p| (p.target.clone(), p.seeds.clone()))
            .collect(),
        escalated_targets: Vec::new(),
    };
    fs::create_dir_all(out).map_err(OrchestratorError::io(out))?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .map_err(|e| OrchestratorError::Config(e.to_string()))?;
    let mut results = execute(&plans, config, &pool)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let escalated: BTreeSet<String> = results
        .iter()
        .filter(|(r, _)| r.envelope.escalated)
        .map(|(r, _)| r.target.clone())
        .collect();
    if !escalated.is_empty() {
        let redo: Vec<usize> = (0..plans.len())
            .filter(|&i| escalated.contains(&plans[i].target) && !results[i].0.envelope.escalated)
            .collect();
        for &i in &redo {
            plans[i].envelope = plans[i].envelope.escalate(config.mem_escalation_mb);
        }
        let subset: Vec<TrialPlan> = redo.iter().map(|&i| plans[i].clone()).collect();
        for (k, r) in execute(&subset, config, &pool).into_iter().enumerate() {
            results[redo[k]] = r?;
        }
    }

    let executed = results.iter().filter(|(_, ran)| *ran).count();
    manifest.complete = true;
    manifest.escalated_targets = escalated.into_iter().collect();
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(CampaignSummary {
        campaign_id: digest,
        trials: results.len(),
        executed,
        resumed: results.len() - executed,
        escalated_targets: manifest.escalated_targets,
        already_complete: false,
    })
}

/// Loads every trial record of a finished campaign, in plan order.
pub fn load_trials(out: &Path) -> Result<(CampaignManifest, Vec<(PathBuf, TrialRecord)>), OrchestratorError> {
    let manifest = CampaignManifest::load(out)?;
    let c = &manifest.config;
    let mut trials = Vec::new();
    for fuzzer in &c.fuzzers {
        for target in &c.targets {
            for rep in 0..c.repetitions {
                let dir = out.join(fuzzer).join(target).join(format!("rep{rep}"));
                let path = dir.join(TRIAL_FILE);
                let record: TrialRecord = read_json(&path).ok_or_else(|| {
                    OrchestratorError::Config(format!("missing or unreadable {}", path.display()))
                })?;
                trials.push((dir, record));
            }
        }
    }
    Ok((manifest, trials))
}
