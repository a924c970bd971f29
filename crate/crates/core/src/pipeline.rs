//! Campaign-level steps that turn stored trial artifacts into triage and
//! CVE-matching outputs under `<out>/triage/` and `<out>/cve/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cve::{confirm_match, extract_keywords, match_cves, AuditLog, CveDatabase, CveEntry, CveError, KeywordSet, MatchCandidate};
use crate::model::{AliasTable, CrashId, CrashSample, ToolId, ToolKind, TriageConfig};
use crate::orchestrator::campaign::{load_trials, transcript_path, CampaignManifest, TrialRecord};
use crate::orchestrator::OrchestratorError;
use crate::parsers::{
    parse_debugger_report, parse_exploitability, parse_sanitizer_report, DebuggerReport, ParseError,
    SanitizerReport, ToolReport,
};
use crate::triage::{build_validation_matrix, triage_crashes, ValidationMatrix};

pub const TRIAGE_DIR: &str = "triage";
pub const CVE_DIR: &str = "cve";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Cve(#[from] CveError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("triage has not been run for {0}")]
    NotTriaged(PathBuf),
    #[error("unknown bug `{0}`")]
    UnknownBug(String),
    #[error("no candidate {cve_id} for bug {bug_id}; run match-cve first")]
    UnknownCandidate { bug_id: String, cve_id: String },
    #[error("unknown baseline fuzzer `{0}`")]
    UnknownBaseline(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("serializable");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| PipelineError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Crash id of a harvested input: `<fuzzer>/<target>/rep<k>/<input>`.
pub fn crash_id(record: &TrialRecord, input: &str) -> CrashId {
    CrashId::new(format!("{}/{input}", record.trial_id()))
}

fn parse_tool(kind: ToolKind, text: &str) -> Result<ToolReport, ParseError> {
    match kind {
        ToolKind::Sanitizer => parse_sanitizer_report(text).map(ToolReport::from),
        ToolKind::Debugger => parse_debugger_report(text).map(ToolReport::from),
    }
}

/// A report the tool produced but that could not be read: the tool saw a
/// crash, yet no frames are available.
fn unreadable(kind: ToolKind, text: &str) -> ToolReport {
    match kind {
        ToolKind::Sanitizer => ToolReport::from(SanitizerReport {
            vuln_raw: String::new(),
            frames: Vec::new(),
            summary_line: text.lines().next().unwrap_or_default().to_string(),
            crashed: true,
        }),
        ToolKind::Debugger => ToolReport::from(DebuggerReport {
            signal: String::new(),
            frames: Vec::new(),
            crashed: true,
        }),
    }
}

/// Reads one trial's crashes and their tool transcripts. A missing
/// transcript leaves that tool's outcome unknown.
pub fn load_crash_samples(
    trial_dir: &Path,
    record: &TrialRecord,
    config: &TriageConfig,
) -> (Vec<CrashSample>, Vec<String>) {
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for entry in &record.crashes {
        let mut sample = CrashSample::new(crash_id(record, &entry.input).0, trial_dir.join(&entry.input));
        sample.discovering_fuzzer = record.fuzzer.clone();
        sample.trial_id = record.trial_id();
        sample.discovery_time_s = entry.discovery_time_s;
        for tool in config.tools_by_priority() {
            let Some(&kind) = config.tool_kinds.get(tool) else { continue };
            let path = transcript_path(trial_dir, &entry.input, tool);
            let Ok(text) = fs::read_to_string(&path) else { continue };
            let report = parse_tool(kind, &text).unwrap_or_else(|e| {
                warnings.push(format!("{} ({tool}): {e}", sample.id));
                unreadable(kind, &text)
            });
            if kind == ToolKind::Debugger && sample.exploitability.is_none() {
                sample.exploitability = parse_exploitability(&text).ok();
            }
            sample.reports.insert(tool.clone(), report);
        }
        samples.push(sample);
    }
    (samples, warnings)
}

/// One unique bug of a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BugRow {
    pub bug_id: String,
    pub target: String,
    pub vuln_type: String,
    pub triple: Vec<String>,
    pub detecting_tool: ToolId,
    pub exemplar_crash: CrashId,
    pub crash_count: usize,
    pub fuzzers: BTreeSet<String>,
}

impl BugRow {
    pub fn key(&self) -> Option<crate::model::BugKey> {
        let triple = crate::model::StackTriple::new(self.triple.clone())?;
        Some(crate::model::BugKey::new(triple, crate::model::VulnKind::from(self.vuln_type.clone())))
    }
}

/// A validated crash attributed to a bug, the input to every timing metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub trial: String,
    pub fuzzer: String,
    pub target: String,
    pub rep: u32,
    pub crash: CrashId,
    pub bug_id: String,
    pub time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploitRow {
    pub trial: String,
    pub crash: CrashId,
    pub bug_id: String,
    pub category: crate::parsers::ExploitabilityCategory,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuarantineRow {
    pub target: String,
    pub crash: CrashId,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetValidation {
    pub crashes: usize,
    pub bugs: usize,
    pub quarantined: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<ValidationMatrix>,
    /// Why no matrix could be built, e.g. transcripts missing for a tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriageSummary {
    pub campaign_id: String,
    pub targets: BTreeMap<String, TargetValidation>,
    pub parse_warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriageArtifacts {
    pub bugs: Vec<BugRow>,
    pub events: Vec<EventRow>,
    pub exploitable: Vec<ExploitRow>,
    pub quarantine: Vec<QuarantineRow>,
    pub summary: TriageSummary,
}

impl TriageArtifacts {
    /// Targets whose validation matrix could not be built.
    pub fn matrix_errors(&self) -> Vec<(String, String)> {
        self.summary
            .targets
            .iter()
            .filter_map(|(t, v)| v.error.clone().map(|e| (t.clone(), e)))
            .collect()
    }
}

pub fn bug_id(target: &str, key: &crate::model::BugKey) -> String {
    format!("{target}:{}", key.fingerprint())
}

/// Triages every target of a finished campaign. Crashes of all fuzzers on
/// one target are deduplicated together so bug ids are comparable across
/// fuzzers. Results are written under `<out>/triage/`.
pub fn triage_campaign(out: &Path, aliases: &AliasTable) -> Result<TriageArtifacts, PipelineError> {
    let (manifest, trials) = load_trials(out)?;
    let config = &manifest.config.triage;
    let mut art = TriageArtifacts {
        summary: TriageSummary {
            campaign_id: manifest.campaign_id.clone(),
            ..Default::default()
        },
        ..Default::default()
    };
    for target in &manifest.config.targets {
        let mut crashes = Vec::new();
        let mut rep_of: BTreeMap<String, (String, u32)> = BTreeMap::new();
        for (dir, record) in trials.iter().filter(|(_, r)| &r.target == target) {
            let (samples, warnings) = load_crash_samples(dir, record, config);
            art.summary.parse_warnings.extend(warnings);
            rep_of.insert(record.trial_id(), (record.fuzzer.clone(), record.rep));
            crashes.extend(samples);
        }
        let outcome = triage_crashes(&crashes, config, aliases);
        let by_id: BTreeMap<&CrashId, &CrashSample> = crashes.iter().map(|c| (&c.id, c)).collect();

        let mut validation = TargetValidation {
            crashes: crashes.len(),
            bugs: outcome.bugs.len(),
            quarantined: outcome.quarantine.len(),
            ..Default::default()
        };
        match config.supplement_tools.first() {
            Some(supplement) => {
                match build_validation_matrix(&crashes, &config.primary_tool, supplement) {
                    Ok(m) => validation.matrix = Some(m),
                    Err(e) => validation.error = Some(e.to_string()),
                }
            }
            None => validation.error = Some("no supplement tool configured".into()),
        }
        art.summary.targets.insert(target.clone(), validation);

        for bug in &outcome.bugs {
            let fuzzers = bug
                .member_crashes
                .iter()
                .filter_map(|c| by_id.get(c).map(|s| s.discovering_fuzzer.clone()))
                .collect();
            art.bugs.push(BugRow {
                bug_id: bug_id(target, &bug.key),
                target: target.clone(),
                vuln_type: bug.key.vuln_type.to_string(),
                triple: bug.key.triple.frames().to_vec(),
                detecting_tool: bug.detecting_tool.clone(),
                exemplar_crash: bug.exemplar_crash.clone(),
                crash_count: bug.member_crashes.len(),
                fuzzers,
            });
        }
        for crash in &crashes {
            let Some((key, _)) = outcome.assignments.get(&crash.id) else { continue };
            let id = bug_id(target, key);
            let (fuzzer, rep) = rep_of[&crash.trial_id].clone();
            art.events.push(EventRow {
                trial: crash.trial_id.clone(),
                fuzzer,
                target: target.clone(),
                rep,
                crash: crash.id.clone(),
                bug_id: id.clone(),
                time_s: crash.discovery_time_s,
            });
            if let Some(e) = &crash.exploitability {
                art.exploitable.push(ExploitRow {
                    trial: crash.trial_id.clone(),
                    crash: crash.id.clone(),
                    bug_id: id,
                    category: e.category,
                    hash: e.hash.clone(),
                });
            }
        }
        for q in outcome.quarantine {
            art.quarantine.push(QuarantineRow {
                target: target.clone(),
                crash: q.crash,
                reason: q.reason.to_string(),
            });
        }
    }
    let dir = out.join(TRIAGE_DIR);
    write_jsonl(&dir.join("bugs.jsonl"), &art.bugs)?;
    write_jsonl(&dir.join("events.jsonl"), &art.events)?;
    write_jsonl(&dir.join("exploitable.jsonl"), &art.exploitable)?;
    write_jsonl(&dir.join("quarantine.jsonl"), &art.quarantine)?;
    write_json(&dir.join("validation.json"), &art.summary)?;
    Ok(art)
}

pub fn load_triage(out: &Path) -> Result<TriageArtifacts, PipelineError> {
    let dir = out.join(TRIAGE_DIR);
    if !dir.join("validation.json").is_file() {
        return Err(PipelineError::NotTriaged(out.to_path_buf()));
    }
    Ok(TriageArtifacts {
        bugs: read_jsonl(&dir.join("bugs.jsonl"))?,
        events: read_jsonl(&dir.join("events.jsonl"))?,
        exploitable: read_jsonl(&dir.join("exploitable.jsonl"))?,
        quarantine: read_jsonl(&dir.join("quarantine.jsonl"))?,
        summary: read_json(&dir.join("validation.json"))?,
    })
}

/// Ranked CVE candidates for one bug.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub bug_id: String,
    pub target: String,
    pub keywords: KeywordSet,
    pub candidates: Vec<MatchCandidate>,
}

/// Splits a crash id into its trial directory and input path.
fn locate_crash(out: &Path, crash: &CrashId) -> Option<(PathBuf, String)> {
    let parts: Vec<&str> = crash.as_str().splitn(4, '/').collect();
    let [fuzzer, target, rep, input] = parts[..] else {
        return None;
    };
    Some((out.join(fuzzer).join(target).join(rep), input.to_string()))
}

fn exemplar_report(
    out: &Path,
    config: &TriageConfig,
    bug: &BugRow,
) -> Option<ToolReport> {
    let (dir, input) = locate_crash(out, &bug.exemplar_crash)?;
    let kind = *config.tool_kinds.get(&bug.detecting_tool)?;
    let text = fs::read_to_string(transcript_path(&dir, &input, &bug.detecting_tool)).ok()?;
    parse_tool(kind, &text).ok()
}

/// Matches every triaged bug against the CVE table of its target and
/// writes `<out>/cve/candidates.jsonl`.
pub fn match_campaign(
    out: &Path,
    db: &CveDatabase,
    aliases: &AliasTable,
) -> Result<Vec<CandidateRow>, PipelineError> {
    let manifest = CampaignManifest::load(out)?;
    let triage = load_triage(out)?;
    let mut rows = Vec::new();
    for bug in &triage.bugs {
        let keywords = exemplar_report(out, &manifest.config.triage, bug)
            .map(|r| extract_keywords(&r, aliases))
            .unwrap_or_default();
        rows.push(CandidateRow {
            bug_id: bug.bug_id.clone(),
            target: bug.target.clone(),
            candidates: match_cves(&keywords, db.table(&bug.target)),
            keywords,
        });
    }
    write_jsonl(&out.join(CVE_DIR).join("candidates.jsonl"), &rows)?;
    Ok(rows)
}

/// A reviewed match, with the CVE entry copied so reports need no database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfirmationRow {
    pub bug_id: String,
    pub target: String,
    pub candidate: MatchCandidate,
    pub entry: CveEntry,
    pub fuzzers: BTreeSet<String>,
}

impl ConfirmationRow {
    pub fn accepted(&self) -> bool {
        self.candidate.confirmed.as_ref().is_some_and(|c| c.verdict)
    }
}

pub fn load_confirmations(out: &Path) -> Result<Vec<ConfirmationRow>, PipelineError> {
    let path = out.join(CVE_DIR).join("confirmations.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_jsonl(&path)
}

/// Records a reviewer's verdict on one candidate. Each (bug, CVE) pair can
/// be decided once; decisions go to the audit log as well.
pub fn confirm_candidate(
    out: &Path,
    db: &CveDatabase,
    bug_id: &str,
    cve_id: &str,
    verdict: bool,
    note: &str,
) -> Result<ConfirmationRow, PipelineError> {
    let dir = out.join(CVE_DIR);
    let rows: Vec<CandidateRow> = read_jsonl(&dir.join("candidates.jsonl"))?;
    let row = rows
        .iter()
        .find(|r| r.bug_id == bug_id)
        .ok_or_else(|| PipelineError::UnknownBug(bug_id.to_string()))?;
    let mut candidate = row
        .candidates
        .iter()
        .find(|c| c.cve_id == cve_id)
        .cloned()
        .ok_or_else(|| PipelineError::UnknownCandidate {
            bug_id: bug_id.to_string(),
            cve_id: cve_id.to_string(),
        })?;
    let existing = load_confirmations(out)?;
    if let Some(prior) = existing
        .iter()
        .find(|c| c.bug_id == bug_id && c.candidate.cve_id == cve_id)
    {
        candidate.confirmed = prior.candidate.confirmed.clone();
    }
    let entry = db
        .find(&row.target, cve_id)
        .cloned()
        .ok_or_else(|| PipelineError::UnknownCandidate {
            bug_id: bug_id.to_string(),
            cve_id: cve_id.to_string(),
        })?;
    let audit_path = dir.join("audit.log");
    let mut audit = AuditLog::open(&audit_path).map_err(io_err(&audit_path))?;
    let decided = confirm_match(&candidate, verdict, note, &mut audit)?;
    let fuzzers = load_triage(out)?
        .bugs
        .into_iter()
        .find(|b| b.bug_id == bug_id)
        .map(|b| b.fuzzers)
        .unwrap_or_default();
    let confirmation = ConfirmationRow {
        bug_id: bug_id.to_string(),
        target: row.target.clone(),
        candidate: decided,
        entry,
        fuzzers,
    };
    let path = dir.join("confirmations.jsonl");
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    let line = serde_json::to_string(&confirmation).expect("serializable");
    writeln!(file, "{line}").map_err(io_err(&path))?;
    Ok(confirmation)
}
