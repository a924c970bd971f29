//! Crash-to-bug triage: stack-triple extraction, multi-tool key derivation,
//! deduplication and the per-tool validation matrix.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AliasTable, BugKey, CrashId, CrashSample, StackFrame, StackTriple, ToolId, TriageConfig,
};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriageError {
    #[error("no stack frame survives the blocklist")]
    EmptyTrace,
    #[error("no analysis tool observed a crash")]
    NotValidated,
    #[error("crashes lack a tool outcome: {}", format_missing(.0))]
    MissingOutcome(Vec<(CrashId, ToolId)>),
    #[error("cross validation needs at least two binary variants, got {0}")]
    TooFewVariants(usize),
}

fn format_missing(missing: &[(CrashId, ToolId)]) -> String {
    missing
        .iter()
        .map(|(c, t)| format!("{c} ({t})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Top `n_frames` function names after dropping blocklisted frames.
pub fn extract_stack_triple(
    frames: &[StackFrame],
    config: &TriageConfig,
) -> Result<StackTriple, TriageError> {
    let names: Vec<String> = frames
        .iter()
        .filter(|f| !config.is_blocked(&f.function_name))
        .take(config.n_frames.max(1))
        .map(|f| f.function_name.clone())
        .collect();
    StackTriple::new(names).ok_or(TriageError::EmptyTrace)
}

/// Builds the bug key from the highest-priority tool that observed a crash.
///
/// The primary tool always wins when it validated the crash; supplements
/// are consulted in configured order only otherwise.
pub fn derive_bug_key(
    crash: &CrashSample,
    config: &TriageConfig,
    aliases: &AliasTable,
) -> Result<(BugKey, ToolId), TriageError> {
    for tool in config.tools_by_priority() {
        let Some(report) = crash.reports.get(tool) else {
            continue;
        };
        if !report.crashed() {
            continue;
        }
        let triple = extract_stack_triple(report.frames(), config)?;
        let vuln = report.vuln_type(aliases);
        return Ok((BugKey::new(triple, vuln.kind), tool.clone()));
    }
    Err(TriageError::NotValidated)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BugRecord {
    pub key: BugKey,
    /// Highest-priority tool among those that produced this key.
    pub detecting_tool: ToolId,
    pub exemplar_crash: CrashId,
    pub member_crashes: BTreeSet<CrashId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuarantinedCrash {
    pub crash: CrashId,
    pub reason: TriageError,
}

/// Result of triaging a corpus: unique bugs, the per-crash assignment and
/// every crash that could not be keyed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriageOutcome {
    pub bugs: Vec<BugRecord>,
    pub assignments: BTreeMap<CrashId, (BugKey, ToolId)>,
    pub quarantine: Vec<QuarantinedCrash>,
}

impl TriageOutcome {
    pub fn validated_count(&self) -> usize {
        self.assignments.len()
    }
}

pub fn triage_crashes(
    crashes: &[CrashSample],
    config: &TriageConfig,
    aliases: &AliasTable,
) -> TriageOutcome {
    let derived: Vec<(&CrashSample, Result<(BugKey, ToolId), TriageError>)> = crashes
        .par_iter()
        .map(|c| (c, derive_bug_key(c, config, aliases)))
        .collect();

    let priority: BTreeMap<&ToolId, usize> = config
        .tools_by_priority()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();

    let mut outcome = TriageOutcome::default();
    let mut groups: BTreeMap<BugKey, Vec<(&CrashSample, ToolId)>> = BTreeMap::new();
    for (crash, result) in derived {
        match result {
            Ok((key, tool)) => {
                outcome
                    .assignments
                    .insert(crash.id.clone(), (key.clone(), tool.clone()));
                groups.entry(key).or_default().push((crash, tool));
            }
            Err(reason) => outcome.quarantine.push(QuarantinedCrash {
                crash: crash.id.clone(),
                reason,
            }),
        }
    }
    outcome.quarantine.sort_by(|a, b| a.crash.cmp(&b.crash));

    outcome.bugs = groups
        .into_iter()
        .map(|(key, members)| {
            let detecting_tool = members
                .iter()
                .map(|(_, t)| t)
                .min_by_key(|t| priority.get(t).copied().unwrap_or(usize::MAX))
                .cloned()
                .expect("group is nonempty");
            let exemplar = members
                .iter()
                .map(|(c, _)| *c)
                .min_by(|a, b| {
                    a.discovery_time_s
                        .total_cmp(&b.discovery_time_s)
                        .then_with(|| a.id.cmp(&b.id))
                })
                .expect("group is nonempty");
            BugRecord {
                key,
                detecting_tool,
                exemplar_crash: exemplar.id.clone(),
                member_crashes: members.iter().map(|(c, _)| c.id.clone()).collect(),
            }
        })
        .collect();
    outcome
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationCell {
    Both,
    PrimaryOnly,
    SupplementOnly,
    Neither,
}

impl ValidationCell {
    pub const ALL: [ValidationCell; 4] = [
        ValidationCell::Neither,
        ValidationCell::SupplementOnly,
        ValidationCell::PrimaryOnly,
        ValidationCell::Both,
    ];

    pub fn classify(primary: bool, supplement: bool) -> ValidationCell {
        match (primary, supplement) {
            (true, true) => ValidationCell::Both,
            (true, false) => ValidationCell::PrimaryOnly,
            (false, true) => ValidationCell::SupplementOnly,
            (false, false) => ValidationCell::Neither,
        }
    }
}

/// Crash counts by which tools could reproduce them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationMatrix {
    pub counts: BTreeMap<ValidationCell, u64>,
    pub total: u64,
}

impl ValidationMatrix {
    pub fn count(&self, cell: ValidationCell) -> u64 {
        self.counts.get(&cell).copied().unwrap_or(0)
    }

    /// Percentage of `total` in the cell; 0 for an empty matrix.
    pub fn rate(&self, cell: ValidationCell) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            (self.count(cell) * 100) as f64 / self.total as f64
        }
    }
}

pub fn build_validation_matrix(
    crashes: &[CrashSample],
    primary: &ToolId,
    supplement: &ToolId,
) -> Result<ValidationMatrix, TriageError> {
    let mut missing = Vec::new();
    let mut matrix = ValidationMatrix::default();
    for cell in ValidationCell::ALL {
        matrix.counts.insert(cell, 0);
    }
    for crash in crashes {
        match (crash.outcome(primary), crash.outcome(supplement)) {
            (Some(p), Some(s)) => {
                *matrix.counts.entry(ValidationCell::classify(p, s)).or_default() += 1;
                matrix.total += 1;
            }
            (p, s) => {
                if p.is_none() {
                    missing.push((crash.id.clone(), primary.clone()));
                }
                if s.is_none() {
                    missing.push((crash.id.clone(), supplement.clone()));
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(matrix)
    } else {
        Err(TriageError::MissingOutcome(missing))
    }
}

/// Crash/no-crash outcomes of one input across differently built binaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossValidationRecord {
    pub crash_id: CrashId,
    pub outcomes: BTreeMap<String, bool>,
    /// Some variants crash and others do not.
    pub instrumentation_sensitive: bool,
    /// At least one variant crashes.
    pub validated: bool,
}

pub fn cross_validate(
    crash_id: &CrashId,
    outcomes: BTreeMap<String, bool>,
) -> Result<CrossValidationRecord, TriageError> {
    if outcomes.len() < 2 {
        return Err(TriageError::TooFewVariants(outcomes.len()));
    }
    let crashing = outcomes.values().filter(|&&c| c).count();
    Ok(CrossValidationRecord {
        crash_id: crash_id.clone(),
        instrumentation_sensitive: crashing > 0 && crashing < outcomes.len(),
        validated: crashing > 0,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VulnKind;
    use crate::parsers::{DebuggerReport, SanitizerReport};

    fn frames(names: &[&str]) -> Vec<StackFrame> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| StackFrame {
                index: i as u32,
                function_name: n.to_string(),
                source_file: None,
                line: None,
            })
            .collect()
    }

    fn asan(vuln: &str, names: &[&str]) -> SanitizerReport {
        SanitizerReport {
            vuln_raw: vuln.into(),
            frames: frames(names),
            summary_line: String::new(),
            crashed: true,
        }
    }

    fn gdb(signal: &str, names: &[&str]) -> DebuggerReport {
        DebuggerReport {
            signal: signal.into(),
            frames: frames(names),
            crashed: true,
        }
    }

    fn triple(names: &[&str]) -> StackTriple {
        StackTriple::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn top_three_functions() {
        let cfg = TriageConfig::default();
        let t = extract_stack_triple(&frames(&["f_a", "f_b", "f_c", "f_d"]), &cfg).unwrap();
        assert_eq!(t, triple(&["f_a", "f_b", "f_c"]));
    }

    #[test]
    fn blocklisted_prefix_is_skipped() {
        let cfg = TriageConfig {
            frame_blocklist: vec!["intercept_*".into()],
            ..TriageConfig::default()
        };
        let t = extract_stack_triple(&frames(&["intercept_x", "f_a", "f_b", "f_c"]), &cfg).unwrap();
        assert_eq!(t, triple(&["f_a", "f_b", "f_c"]));
    }

    #[test]
    fn shallow_and_empty_traces() {
        let cfg = TriageConfig::default();
        assert_eq!(
            extract_stack_triple(&frames(&["f_a"]), &cfg).unwrap(),
            triple(&["f_a"])
        );
        assert_eq!(
            extract_stack_triple(&frames(&["??", "_start"]), &cfg),
            Err(TriageError::EmptyTrace)
        );
        assert_eq!(extract_stack_triple(&[], &cfg), Err(TriageError::EmptyTrace));
    }

    #[test]
    fn primary_report_is_preferred() {
        let cfg = TriageConfig::default();
        let crash = CrashSample::new("c1", "in")
            .with_report("asan", asan("heap-buffer-overflow", &["f_a", "f_b", "f_c"]))
            .with_report("gdb", gdb("SIGSEGV", &["x", "y"]));
        let (key, tool) = derive_bug_key(&crash, &cfg, AliasTable::builtin()).unwrap();
        assert_eq!(tool, ToolId::from("asan"));
        assert_eq!(key.vuln_type, VulnKind::HeapBufferOverflow);
        assert_eq!(key.triple, triple(&["f_a", "f_b", "f_c"]));
    }

    #[test]
    fn supplement_used_when_primary_is_silent() {
        let cfg = TriageConfig::default();
        let crash = CrashSample::new("c1", "in")
            .with_report("asan", SanitizerReport::no_crash())
            .with_report("gdb", gdb("SIGFPE", &["div_fn", "main"]));
        let (key, tool) = derive_bug_key(&crash, &cfg, AliasTable::builtin()).unwrap();
        assert_eq!(tool, ToolId::from("gdb"));
        assert_eq!(key.vuln_type, VulnKind::FloatPointException);
        assert_eq!(key.triple, triple(&["div_fn", "main"]));
    }

    #[test]
    fn unvalidated_crash() {
        let cfg = TriageConfig::default();
        let crash = CrashSample::new("c1", "in")
            .with_report("asan", SanitizerReport::no_crash())
            .with_report("gdb", DebuggerReport::no_crash());
        assert_eq!(
            derive_bug_key(&crash, &cfg, AliasTable::builtin()),
            Err(TriageError::NotValidated)
        );
        let bare = CrashSample::new("c2", "in");
        assert_eq!(
            derive_bug_key(&bare, &cfg, AliasTable::builtin()),
            Err(TriageError::NotValidated)
        );
    }

    #[test]
    fn supplement_order_breaks_ties() {
        let mut cfg = TriageConfig::default();
        cfg.tool_kinds
            .insert(ToolId::from("gdb-o2"), crate::model::ToolKind::Debugger);
        cfg.supplement_tools = vec![ToolId::from("gdb-o2"), ToolId::from("gdb")];
        let crash = CrashSample::new("c", "in")
            .with_report("gdb", gdb("SIGSEGV", &["a"]))
            .with_report("gdb-o2", gdb("SIGSEGV", &["b"]));
        let (key, tool) = derive_bug_key(&crash, &cfg, AliasTable::builtin()).unwrap();
        assert_eq!(tool, ToolId::from("gdb-o2"));
        assert_eq!(key.triple, triple(&["b"]));
    }

    #[test]
    fn partition_by_key() {
        let cfg = TriageConfig::default();
        let mk = |id: &str, names: &[&str], t: f64| {
            let mut c = CrashSample::new(id, id)
                .with_report("asan", asan("heap-buffer-overflow", names));
            c.discovery_time_s = t;
            c
        };
        let crashes = vec![
            mk("c1", &["t1"], 5.0),
            mk("c2", &["t1"], 1.0),
            mk("c3", &["t2"], 3.0),
            CrashSample::new("c4", "c4").with_report("asan", SanitizerReport::no_crash()),
        ];
        let out = triage_crashes(&crashes, &cfg, AliasTable::builtin());
        assert_eq!(out.bugs.len(), 2);
        assert_eq!(out.validated_count(), 3);
        assert_eq!(out.quarantine.len(), 1);
        let t1 = out.bugs.iter().find(|b| b.key.triple == triple(&["t1"])).unwrap();
        assert_eq!(t1.member_crashes.len(), 2);
        assert_eq!(t1.exemplar_crash, CrashId::from("c2"));
    }

    #[test]
    fn five_crashes_one_bug() {
        let cfg = TriageConfig::default();
        let crashes: Vec<_> = (0..5)
            .map(|i| {
                CrashSample::new(format!("c{i}"), "x")
                    .with_report("asan", asan("SEGV", &["f_a", "f_b", "f_c"]))
            })
            .collect();
        let out = triage_crashes(&crashes, &cfg, AliasTable::builtin());
        assert_eq!(out.bugs.len(), 1);
        assert_eq!(out.bugs[0].member_crashes.len(), 5);
    }

    #[test]
    fn validation_matrix_cells() {
        let p = ToolId::from("asan");
        let s = ToolId::from("gdb");
        let mk = |id: &str, a: bool, g: bool| {
            let ar = if a { asan("SEGV", &["f"]) } else { SanitizerReport::no_crash() };
            let gr = if g { gdb("SIGSEGV", &["f"]) } else { DebuggerReport::no_crash() };
            CrashSample::new(id, id).with_report("asan", ar).with_report("gdb", gr)
        };
        let crashes = vec![
            mk("a", true, true),
            mk("b", false, true),
            mk("c", true, false),
            mk("d", false, false),
        ];
        let m = build_validation_matrix(&crashes, &p, &s).unwrap();
        assert_eq!(m.total, 4);
        for cell in ValidationCell::ALL {
            assert_eq!(m.count(cell), 1);
            assert_eq!(m.rate(cell), 25.0);
        }
        assert_eq!(
            build_validation_matrix(&crashes[..1], &p, &s).unwrap().count(ValidationCell::Both),
            1
        );
        assert_eq!(
            build_validation_matrix(&crashes[1..2], &p, &s)
                .unwrap()
                .count(ValidationCell::SupplementOnly),
            1
        );
    }

    #[test]
    fn validation_matrix_missing_outcome() {
        let crashes = vec![CrashSample::new("x", "x").with_report("asan", asan("SEGV", &["f"]))];
        let err = build_validation_matrix(&crashes, &ToolId::from("asan"), &ToolId::from("gdb"))
            .unwrap_err();
        assert_eq!(
            err,
            TriageError::MissingOutcome(vec![(CrashId::from("x"), ToolId::from("gdb"))])
        );
    }

    #[test]
    fn cross_validation_flags() {
        let id = CrashId::from("c");
        let rec = cross_validate(&id, [("A".to_string(), true), ("B".to_string(), false)].into())
            .unwrap();
        assert!(rec.instrumentation_sensitive);
        assert!(rec.validated);
        let rec = cross_validate(&id, [("A".to_string(), true), ("B".to_string(), true)].into())
            .unwrap();
        assert!(!rec.instrumentation_sensitive);
        let rec = cross_validate(&id, [("A".to_string(), false), ("B".to_string(), false)].into())
            .unwrap();
        assert!(!rec.instrumentation_sensitive);
        assert!(!rec.validated);
        assert_eq!(
            cross_validate(&id, [("A".to_string(), true)].into()),
            Err(TriageError::TooFewVariants(1))
        );
    }
}
