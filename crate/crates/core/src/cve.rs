//! CVE keywords database and keyword-count matching.
//!
//! Each program has a table of curated CVE entries. A bug's report is
//! reduced to a keyword set (vulnerability type, function names, file
//! basenames) and every entry is scored by how many of those keywords
//! appear among its own fields. Comparison is case-insensitive exact
//! token match.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AliasTable, BugKey, ToolId, VulnKind};
use crate::parsers::ToolReport;

pub const DB_FORMAT: &str = "cve-keywords";
pub const DB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CveError {
    #[error("schema error at {context}: {message}")]
    SchemaError { context: String, message: String },
    #[error("candidate {0} is already confirmed")]
    AlreadyConfirmed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn schema(context: impl Into<String>, message: impl Into<String>) -> CveError {
    CveError::SchemaError {
        context: context.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CveEntry {
    pub cve_id: String,
    pub vuln_type: VulnKind,
    #[serde(default)]
    pub vulnerable_functions: BTreeSet<String>,
    #[serde(default)]
    pub vulnerable_files: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack_trace: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_tool: Option<ToolId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cvss_score: Option<f64>,
}

impl CveEntry {
    /// All keywords the entry can be matched on, lowercased.
    pub fn keyword_pool(&self) -> BTreeSet<String> {
        let mut pool = BTreeSet::new();
        pool.insert(self.vuln_type.canonical_name().to_ascii_lowercase());
        if let VulnKind::Unknown(raw) = &self.vuln_type {
            pool.insert(raw.to_ascii_lowercase());
        }
        pool.extend(self.vulnerable_functions.iter().map(|f| f.to_ascii_lowercase()));
        pool.extend(self.vulnerable_files.iter().map(|f| basename(f).to_ascii_lowercase()));
        if let Some(trace) = &self.stack_trace {
            pool.extend(trace.iter().map(|f| f.to_ascii_lowercase()));
        }
        pool
    }
}

fn cve_id_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^CVE-\d{4}-\d{4,}$").unwrap())
}

/// Per-program CVE tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CveDatabase {
    pub tables: BTreeMap<String, Vec<CveEntry>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DbFile {
    format: String,
    version: u32,
    #[serde(default)]
    cve: Vec<DbRecord>,
}

#[derive(Debug, Deserialize)]
struct DbRecord {
    program: String,
    #[serde(flatten)]
    entry: CveEntry,
}

impl CveDatabase {
    /// Parses the TOML database document.
    ///
    /// ```toml
    /// format = "cve-keywords"
    /// version = 1
    ///
    /// [[cve]]
    /// program = "tcpdump"
    /// cve_id = "CVE-2017-13028"
    /// vuln_type = "heap-buffer-overflow"
    /// vulnerable_functions = ["bootp_print"]
    /// vulnerable_files = ["print-bootp.c"]
    /// cvss_score = 9.8
    /// ```
    pub fn parse(text: &str) -> Result<CveDatabase, CveError> {
        let file: DbFile = toml::from_str(text).map_err(|e| {
            let context = match e.span() {
                Some(span) => format!("line {}", line_of_offset(text, span.start)),
                None => "document".to_string(),
            };
            schema(context, e.message().to_string())
        })?;
        if file.format != DB_FORMAT {
            return Err(schema("header", format!("format must be `{DB_FORMAT}`")));
        }
        if file.version != DB_VERSION {
            return Err(schema(
                "header",
                format!("unsupported version {} (expected {DB_VERSION})", file.version),
            ));
        }
        let record_lines = record_start_lines(text);
        let mut db = CveDatabase::default();
        for (idx, record) in file.cve.into_iter().enumerate() {
            let context = match record_lines.get(idx) {
                Some(line) => format!("line {line} (record {}, {})", idx + 1, record.entry.cve_id),
                None => format!("record {} ({})", idx + 1, record.entry.cve_id),
            };
            let mut entry = record.entry;
            if let VulnKind::Unknown(raw) = &entry.vuln_type {
                entry.vuln_type = AliasTable::builtin().canonicalize(raw).kind;
            }
            if !cve_id_re().is_match(&entry.cve_id) {
                return Err(schema(context, "cve_id is not a CVE identifier"));
            }
            if let Some(score) = entry.cvss_score {
                if !(0.0..=10.0).contains(&score) {
                    return Err(schema(context, format!("cvss_score {score} outside [0, 10]")));
                }
            }
            let table = db.tables.entry(record.program).or_default();
            if table.iter().any(|e| e.cve_id == entry.cve_id) {
                return Err(schema(context, "duplicate cve_id within program"));
            }
            table.push(entry);
        }
        Ok(db)
    }

    pub fn load(path: &Path) -> Result<CveDatabase, CveError> {
        CveDatabase::parse(&std::fs::read_to_string(path)?)
    }

    pub fn table(&self, program: &str) -> &[CveEntry] {
        self.tables.get(program).map_or(&[], Vec::as_slice)
    }

    pub fn entry_count(&self) -> usize {
        self.tables.values().map(Vec::len).sum()
    }

    pub fn find(&self, program: &str, cve_id: &str) -> Option<&CveEntry> {
        self.table(program).iter().find(|e| e.cve_id == cve_id)
    }
}

/// Free-function form of [`CveDatabase::load`].
pub fn load_cve_db(path: &Path) -> Result<CveDatabase, CveError> {
    CveDatabase::load(path)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn record_start_lines(text: &str) -> Vec<usize> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| l.trim() == "[[cve]]")
        .map(|(i, _)| i + 1)
        .collect()
}

fn basename(path: &str) -> &str {
    path.rsplit(['/', '\\']).next().unwrap_or(path)
}

pub type KeywordSet = BTreeSet<String>;

/// Vulnerability type, resolved function names and file basenames of a report.
pub fn extract_keywords(report: &ToolReport, aliases: &AliasTable) -> KeywordSet {
    let mut keywords = KeywordSet::new();
    let vuln = report.vuln_type(aliases);
    match &vuln.kind {
        VulnKind::Unknown(raw) => {
            if !raw.is_empty() {
                keywords.insert(raw.to_ascii_lowercase());
            }
        }
        kind => {
            keywords.insert(kind.canonical_name().to_string());
        }
    }
    for frame in report.frames() {
        if frame.is_unresolved() {
            continue;
        }
        keywords.insert(frame.function_name.to_ascii_lowercase());
        if let Some(file) = &frame.source_file {
            keywords.insert(basename(file).to_ascii_lowercase());
        }
    }
    keywords
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confirmation {
    pub verdict: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub cve_id: String,
    pub matched_keywords: BTreeSet<String>,
    pub score: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmed: Option<Confirmation>,
}

/// Entries sharing at least one keyword, by score descending then CVE id.
pub fn match_cves(keywords: &KeywordSet, table: &[CveEntry]) -> Vec<MatchCandidate> {
    let lowered: KeywordSet = keywords.iter().map(|k| k.to_ascii_lowercase()).collect();
    let mut candidates: Vec<MatchCandidate> = table
        .iter()
        .filter_map(|entry| {
            let matched: BTreeSet<String> = entry
                .keyword_pool()
                .intersection(&lowered)
                .cloned()
                .collect();
            (!matched.is_empty()).then(|| MatchCandidate {
                cve_id: entry.cve_id.clone(),
                score: matched.len(),
                matched_keywords: matched,
                confirmed: None,
            })
        })
        .collect();
    candidates.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.cve_id.cmp(&b.cve_id)));
    candidates
}

/// Append-only, timestamped record of manual match decisions.
pub struct AuditLog {
    sink: Box<dyn Write + Send>,
}

impl AuditLog {
    pub fn new(sink: impl Write + Send + 'static) -> AuditLog {
        AuditLog {
            sink: Box::new(sink),
        }
    }

    pub fn open(path: &Path) -> std::io::Result<AuditLog> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(AuditLog::new(file))
    }

    fn append(&mut self, candidate: &MatchCandidate, confirmation: &Confirmation) -> std::io::Result<()> {
        let line = serde_json::json!({
            "timestamp": chrono::Utc::now().to_rfc3339(),
            "cve_id": candidate.cve_id,
            "score": candidate.score,
            "verdict": confirmation.verdict,
            "note": confirmation.note,
        });
        writeln!(self.sink, "{line}")?;
        self.sink.flush()
    }
}

pub fn confirm_match(
    candidate: &MatchCandidate,
    verdict: bool,
    note: &str,
    audit: &mut AuditLog,
) -> Result<MatchCandidate, CveError> {
    if candidate.confirmed.is_some() {
        return Err(CveError::AlreadyConfirmed(candidate.cve_id.clone()));
    }
    let confirmation = Confirmation {
        verdict,
        note: note.to_string(),
    };
    audit.append(candidate, &confirmation)?;
    Ok(MatchCandidate {
        confirmed: Some(confirmation),
        ..candidate.clone()
    })
}

/// A bug whose CVE match was confirmed, attributed to a fuzzer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfirmedMatch {
    pub fuzzer: String,
    pub bug: BugKey,
    pub entry: CveEntry,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeverityCounts {
    pub counts: BTreeMap<String, usize>,
    /// `(fuzzer, cve_id)` pairs that could not be scored.
    pub missing_score: Vec<(String, String)>,
}

pub const HIGH_SEVERITY_CVSS: f64 = 7.0;

/// Distinct CVEs with CVSS >= 7.0 per fuzzer.
pub fn high_severity_count(confirmed: &[ConfirmedMatch]) -> SeverityCounts {
    let mut seen: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    let mut out = SeverityCounts::default();
    for m in confirmed {
        let ids = seen.entry(m.fuzzer.clone()).or_default();
        match m.entry.cvss_score {
            Some(score) => {
                if score >= HIGH_SEVERITY_CVSS {
                    ids.insert(&m.entry.cve_id);
                }
            }
            None => out
                .missing_score
                .push((m.fuzzer.clone(), m.entry.cve_id.clone())),
        }
    }
    out.missing_score.sort();
    out.missing_score.dedup();
    out.counts = seen.into_iter().map(|(f, ids)| (f, ids.len())).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StackFrame, StackTriple};
    use crate::parsers::{DebuggerReport, SanitizerReport};
    use std::sync::{Arc, Mutex};

    fn entry(id: &str, funcs: &[&str], files: &[&str], score: Option<f64>) -> CveEntry {
        CveEntry {
            cve_id: id.into(),
            vuln_type: VulnKind::HeapBufferOverflow,
            vulnerable_functions: funcs.iter().map(|s| s.to_string()).collect(),
            vulnerable_files: files.iter().map(|s| s.to_string()).collect(),
            stack_trace: None,
            trace_tool: None,
            cvss_score: score,
        }
    }

    const DB: &str = r#"
format = "cve-keywords"
version = 1

[[cve]]
program = "p1"
cve_id = "CVE-2020-0001"
vuln_type = "heap-buffer-overflow"
vulnerable_functions = ["f_a"]
cvss_score = 7.5

[[cve]]
program = "p1"
cve_id = "CVE-2020-0002"
vuln_type = "segv"

[[cve]]
program = "p1"
cve_id = "CVE-2020-0003"
vuln_type = "memory-leak"

[[cve]]
program = "p2"
cve_id = "CVE-2021-1001"
vuln_type = "stack-overflow"
stack_trace = ["r1", "r2", "r1"]
trace_tool = "asan"

[[cve]]
program = "p2"
cve_id = "CVE-2021-1002"
vuln_type = "use-after-free"

[[cve]]
program = "p2"
cve_id = "CVE-2021-1003"
vuln_type = "free-error"
vulnerable_files = ["src/lib/free.c"]
"#;

    #[test]
    fn load_two_programs() {
        let db = CveDatabase::parse(DB).unwrap();
        assert_eq!(db.tables.len(), 2);
        assert_eq!(db.entry_count(), 6);
        assert_eq!(db.table("p2")[0].trace_tool, Some(ToolId::from("asan")));
    }

    #[test]
    fn duplicate_id_rejected_with_context() {
        let text = DB.replace("CVE-2020-0002", "CVE-2020-0001");
        match CveDatabase::parse(&text) {
            Err(CveError::SchemaError { context, message }) => {
                assert!(message.contains("duplicate"));
                assert!(context.contains("line 12"), "{context}");
            }
            other => panic!("unexpected {other:?}"),
        }
        // Same id under a different program is fine.
        let text = DB.replace("CVE-2021-1001", "CVE-2020-0001");
        assert!(CveDatabase::parse(&text).is_ok());
    }

    #[test]
    fn cvss_out_of_range_rejected() {
        let text = DB.replace("cvss_score = 7.5", "cvss_score = 11.0");
        assert!(matches!(
            CveDatabase::parse(&text),
            Err(CveError::SchemaError { .. })
        ));
    }

    #[test]
    fn bad_header_and_ids_rejected() {
        assert!(CveDatabase::parse(&DB.replace("version = 1", "version = 2")).is_err());
        assert!(CveDatabase::parse(&DB.replace("CVE-2020-0003", "BUG-1")).is_err());
        assert!(CveDatabase::parse("format = \"cve-keywords\"\nversion = \n").is_err());
    }

    fn frame(i: u32, f: &str, file: Option<&str>) -> StackFrame {
        StackFrame {
            index: i,
            function_name: f.into(),
            source_file: file.map(String::from),
            line: Some(1),
        }
    }

    #[test]
    fn keywords_from_report() {
        let report = ToolReport::Sanitizer(SanitizerReport {
            vuln_raw: "heap-buffer-overflow".into(),
            frames: vec![frame(0, "f_a", Some("/src/x.c")), frame(1, "f_b", Some("y.c"))],
            summary_line: String::new(),
            crashed: true,
        });
        let kw = extract_keywords(&report, AliasTable::builtin());
        let expected: KeywordSet = ["heap-buffer-overflow", "f_a", "f_b", "x.c", "y.c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(kw, expected);

        let unresolved = ToolReport::Debugger(DebuggerReport {
            signal: "SIGSEGV".into(),
            frames: vec![frame(0, "??", None), frame(1, "??", None)],
            crashed: true,
        });
        let kw = extract_keywords(&unresolved, AliasTable::builtin());
        assert_eq!(kw, ["segv".to_string()].into());
    }

    #[test]
    fn ranking_by_score_then_id() {
        let table = vec![
            entry("CVE-2019-0002", &["g"], &[], None),
            entry("CVE-2019-0001", &["f_a", "f_b"], &["x.c"], None),
            entry("CVE-2019-0009", &["zzz"], &[], None),
        ];
        let mut table = table;
        table[2].vuln_type = VulnKind::Segv;
        let kw: KeywordSet = ["heap-buffer-overflow", "f_a", "f_b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let got = match_cves(&kw, &table);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].cve_id, "CVE-2019-0001");
        assert_eq!(got[0].score, 3);
        assert_eq!(got[1].cve_id, "CVE-2019-0002");
        assert_eq!(got[1].score, 1);
    }

    #[test]
    fn ties_are_ordered_by_id_and_case_is_ignored() {
        let table = vec![
            entry("CVE-2019-0200", &["Parse"], &[], None),
            entry("CVE-2019-0100", &["parse"], &[], None),
        ];
        let kw: KeywordSet = ["heap-buffer-overflow", "PARSE"].iter().map(|s| s.to_string()).collect();
        let got = match_cves(&kw, &table);
        assert_eq!(got.iter().map(|c| c.score).collect::<Vec<_>>(), [2, 2]);
        assert_eq!(got[0].cve_id, "CVE-2019-0100");
        let none: KeywordSet = ["nothing".to_string()].into();
        assert!(match_cves(&none, &table).is_empty());
    }

    #[derive(Clone, Default)]
    struct SharedBuf(Arc<Mutex<Vec<u8>>>);

    impl Write for SharedBuf {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().write(buf)
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn confirmation_is_logged_once() {
        let buf = SharedBuf::default();
        let mut log = AuditLog::new(buf.clone());
        let cand = MatchCandidate {
            cve_id: "CVE-2020-0001".into(),
            matched_keywords: ["f_a".to_string()].into(),
            score: 1,
            confirmed: None,
        };
        let ok = confirm_match(&cand, true, "", &mut log).unwrap();
        assert_eq!(ok.confirmed.as_ref().unwrap().verdict, true);
        assert_eq!(ok.score, cand.score);
        assert_eq!(ok.matched_keywords, cand.matched_keywords);
        let rejected = confirm_match(&cand, false, "overlapped CVE", &mut log).unwrap();
        assert_eq!(rejected.confirmed.unwrap().note, "overlapped CVE");
        assert!(matches!(
            confirm_match(&ok, true, "", &mut log),
            Err(CveError::AlreadyConfirmed(_))
        ));
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("overlapped CVE"));
    }

    fn confirmed(fuzzer: &str, id: &str, score: Option<f64>) -> ConfirmedMatch {
        ConfirmedMatch {
            fuzzer: fuzzer.into(),
            bug: BugKey::new(StackTriple::new(vec![id.into()]).unwrap(), VulnKind::Segv),
            entry: entry(id, &[], &[], score),
        }
    }

    #[test]
    fn severity_cut_is_inclusive() {
        let pairs = vec![
            confirmed("f", "CVE-2000-0001", Some(7.0)),
            confirmed("f", "CVE-2000-0002", Some(6.9)),
            confirmed("f", "CVE-2000-0003", Some(9.8)),
        ];
        assert_eq!(high_severity_count(&pairs).counts["f"], 2);
        assert!(high_severity_count(&[]).counts.is_empty());
    }

    #[test]
    fn severity_dedups_by_id_and_lists_missing_scores() {
        // Brute force over a 5-pair fixture: distinct ids with score >= 7 per fuzzer.
        let pairs = vec![
            confirmed("a", "CVE-2000-0001", Some(8.0)),
            confirmed("a", "CVE-2000-0001", Some(8.0)),
            confirmed("a", "CVE-2000-0002", Some(7.2)),
            confirmed("b", "CVE-2000-0001", Some(8.0)),
            confirmed("b", "CVE-2000-0004", None),
        ];
        let mut expected: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for p in &pairs {
            let set = expected.entry(p.fuzzer.clone()).or_default();
            if p.entry.cvss_score.is_some_and(|s| s >= 7.0) {
                set.insert(p.entry.cve_id.clone());
            }
        }
        let got = high_severity_count(&pairs);
        for (fuzzer, ids) in expected {
            assert_eq!(got.counts[&fuzzer], ids.len());
        }
        assert_eq!(got.counts["a"], 2);
        assert_eq!(
            got.missing_score,
            vec![("b".to_string(), "CVE-2000-0004".to_string())]
        );
    }
}
