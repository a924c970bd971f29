//! Campaign configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OrchestratorError;
use crate::model::TriageConfig;

fn default_duration() -> f64 {
    86_400.0
}
fn default_repetitions() -> u32 {
    30
}
fn default_cores() -> u32 {
    1
}
fn default_mem_limit() -> u64 {
    2048
}
fn default_swap_limit() -> u64 {
    1024
}
fn default_mem_escalation() -> u64 {
    8192
}
fn default_seed_count() -> usize {
    100
}
fn default_seed_max_bytes() -> u64 {
    1_048_576
}
fn default_parallelism() -> usize {
    1
}
fn default_interval() -> f64 {
    1.0
}
fn default_curve_points() -> usize {
    24
}

/// Everything needed to plan and run a campaign.
///
/// Resource defaults: one core, 2048 MB RAM, 1024 MB swap, 8192 MB after an
/// out-of-memory escalation. Trials run for 24 h with 30 repetitions and
/// 100 seeds of at most 1 MiB unless configured otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub rng_seed: u64,
    pub fuzzers: Vec<String>,
    pub targets: Vec<String>,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_cores")]
    pub cpu_cores_per_trial: u32,
    #[serde(default = "default_mem_limit")]
    pub mem_limit_mb: u64,
    #[serde(default = "default_swap_limit")]
    pub swap_limit_mb: u64,
    #[serde(default = "default_mem_escalation")]
    pub mem_escalation_mb: u64,
    #[serde(default = "default_seed_count")]
    pub seed_count: usize,
    #[serde(default = "default_seed_max_bytes")]
    pub seed_max_bytes: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_interval")]
    pub monitor_interval_s: f64,
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
    /// Container runtime executable; bare processes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container_runtime: Option<PathBuf>,
    #[serde(default)]
    pub adapters: BTreeMap<String, AdapterDescriptor>,
    #[serde(default, rename = "target")]
    pub target_defs: BTreeMap<String, TargetDescriptor>,
    #[serde(default)]
    pub triage: TriageConfig,
}

/// How to launch a fuzzer and where it leaves its findings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterDescriptor {
    /// A real fuzzer process. Launch arguments may use `{seeds}`, `{out}`,
    /// `{target}` and `{target_args}` placeholders.
    Process {
        launch: Vec<String>,
        crash_glob: String,
        coverage_glob: String,
        #[serde(default)]
        env: BTreeMap<String, String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image: Option<String>,
    },
    /// Deterministic simulated fuzzer.
    Mock(MockAdapter),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockAdapter {
    /// Multiplier applied to every target bug hazard.
    #[serde(default = "one")]
    pub skill: f64,
    /// Per-bug hazard overrides (per hour), keyed by bug id.
    #[serde(default)]
    pub hazard_overrides: BTreeMap<String, f64>,
    /// Re-discoveries of an already found bug, per hour.
    #[serde(default)]
    pub crash_rate_per_hour: f64,
    /// Coverage-increasing inputs per hour.
    #[serde(default)]
    pub coverage_rate_per_hour: f64,
    #[serde(default = "default_cpu")]
    pub cpu_percent: f64,
    #[serde(default = "default_rss")]
    pub rss_mb: f64,
}

fn one() -> f64 {
    1.0
}
fn default_cpu() -> f64 {
    98.0
}
fn default_rss() -> f64 {
    150.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetDescriptor {
    Process(ProcessTarget),
    Mock(MockTarget),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessTarget {
    pub binary: PathBuf,
    /// Target arguments; `@@` is replaced with the input path.
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_dir: Option<PathBuf>,
    /// Sanitizer-instrumented build used to produce triage transcripts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sanitizer_binary: Option<PathBuf>,
    /// Plain debug build run under the debugger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debugger_binary: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<GcovTarget>,
    /// GDB script providing an `exploitable` command; when set, the
    /// classifier runs after each debugger backtrace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploitable_plugin: Option<PathBuf>,
}

/// Build with gcc `--coverage` used to replay saved inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcovTarget {
    pub binary: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    /// Directory holding the `.gcno`/`.gcda` files.
    pub object_dir: PathBuf,
    pub sources: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockTarget {
    #[serde(default = "default_total_lines")]
    pub total_lines: u32,
    #[serde(default)]
    pub bugs: Vec<MockBug>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_dir: Option<PathBuf>,
}

fn default_total_lines() -> u32 {
    1000
}

/// A planted bug in a mock target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockBug {
    pub id: String,
    /// Function names from the crash site outward.
    pub frames: Vec<String>,
    /// Canonical vulnerability type.
    pub vuln: String,
    #[serde(default)]
    pub hazard_per_hour: f64,
    #[serde(default = "yes")]
    pub sanitizer_detects: bool,
    #[serde(default = "yes")]
    pub debugger_detects: bool,
    /// Prefix the trace with a sanitizer interceptor frame.
    #[serde(default)]
    pub interceptor: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploitable: Option<String>,
}

fn yes() -> bool {
    true
}

impl CampaignConfig {
    pub fn parse(text: &str) -> Result<CampaignConfig, OrchestratorError> {
        let config: CampaignConfig =
            toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<CampaignConfig, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            OrchestratorError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut config = CampaignConfig::parse(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for target in self.target_defs.values_mut() {
            match target {
                TargetDescriptor::Process(t) => {
                    fix(&mut t.binary);
                    t.seed_dir.as_mut().map(fix);
                    t.sanitizer_binary.as_mut().map(fix);
                    t.debugger_binary.as_mut().map(fix);
                    t.exploitable_plugin.as_mut().map(fix);
                    if let Some(cov) = &mut t.coverage {
                        fix(&mut cov.binary);
                        fix(&mut cov.object_dir);
                        cov.sources.iter_mut().for_each(fix);
                    }
                }
                TargetDescriptor::Mock(t) => {
                    t.seed_dir.as_mut().map(fix);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.fuzzers.is_empty() {
            return bad("at least one fuzzer is required");
        }
        if self.targets.is_empty() {
            return bad("at least one target is required");
        }
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if self.repetitions < 1 {
            return bad("repetitions must be at least 1");
        }
        if self.mem_escalation_mb < self.mem_limit_mb {
            return bad("mem_escalation_mb must be at least mem_limit_mb");
        }
        if self.cpu_cores_per_trial < 1 {
            return bad("cpu_cores_per_trial must be at least 1");
        }
        if !(self.monitor_interval_s > 0.0) {
            return bad("monitor_interval_s must be positive");
        }
        if self.curve_points < 1 {
            return bad("curve_points must be at least 1");
        }
        for (name, target) in &self.target_defs {
            if let TargetDescriptor::Mock(m) = target {
                for bug in &m.bugs {
                    if crate::model::canonicalize_vuln_type(&bug.vuln).kind.is_unknown() {
                        return Err(OrchestratorError::Config(format!(
                            "target {name}: bug {} has unrecognized vuln `{}`",
                            bug.id, bug.vuln
                        )));
                    }
                }
            }
        }
        self.triage
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        Ok(())
    }

    /// Digest over the normalized configuration, used as the campaign id.
    /// Parallelism is excluded: it does not affect any trial's outcome.
    pub fn digest(&self) -> String {
        let mut normalized = self.clone();
        normalized.parallelism = 0;
        let canonical = serde_json::to_vec(&normalized).expect("config serializes");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }
}
