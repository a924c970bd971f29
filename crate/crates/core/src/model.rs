//! Shared domain types: the vulnerability taxonomy, stack frames, bug keys
//! and crash samples.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parsers::{ExploitabilityRecord, ToolReport};

const BUILTIN_ALIASES: &str = include_str!("../data/vuln_aliases.tsv");

/// Canonical vulnerability categories.
///
/// Anything a tool reports that is not in the alias table becomes
/// [`VulnKind::Unknown`] carrying the original label verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum VulnKind {
    HeapBufferOverflow,
    StackBufferOverflow,
    GlobalBufferOverflow,
    StackOverflow,
    Segv,
    ExcessiveMemoryAllocation,
    MemoryLeak,
    FreeError,
    FloatPointException,
    AllocDeallocMismatch,
    MemcpyParamOverlap,
    UseAfterFree,
    Unknown(String),
}

impl VulnKind {
    pub const KNOWN: [VulnKind; 12] = [
        VulnKind::HeapBufferOverflow,
        VulnKind::StackBufferOverflow,
        VulnKind::GlobalBufferOverflow,
        VulnKind::StackOverflow,
        VulnKind::Segv,
        VulnKind::ExcessiveMemoryAllocation,
        VulnKind::MemoryLeak,
        VulnKind::FreeError,
        VulnKind::FloatPointException,
        VulnKind::AllocDeallocMismatch,
        VulnKind::MemcpyParamOverlap,
        VulnKind::UseAfterFree,
    ];

    /// The canonical label, or `"unknown"` for unrecognized kinds.
    pub fn canonical_name(&self) -> &str {
        match self {
            VulnKind::HeapBufferOverflow => "heap-buffer-overflow",
            VulnKind::StackBufferOverflow => "stack-buffer-overflow",
            VulnKind::GlobalBufferOverflow => "global-buffer-overflow",
            VulnKind::StackOverflow => "stack-overflow",
            VulnKind::Segv => "segv",
            VulnKind::ExcessiveMemoryAllocation => "excessive-memory-allocation",
            VulnKind::MemoryLeak => "memory-leak",
            VulnKind::FreeError => "free-error",
            VulnKind::FloatPointException => "float-point-exception",
            VulnKind::AllocDeallocMismatch => "alloc-dealloc-mismatch",
            VulnKind::MemcpyParamOverlap => "memcpy-param-overlap",
            VulnKind::UseAfterFree => "use-after-free",
            VulnKind::Unknown(_) => "unknown",
        }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, VulnKind::Unknown(_))
    }

    fn from_canonical(name: &str) -> Option<VulnKind> {
        VulnKind::KNOWN
            .iter()
            .find(|k| k.canonical_name() == name)
            .cloned()
    }
}

impl fmt::Display for VulnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VulnKind::Unknown(raw) => write!(f, "unknown({raw})"),
            known => f.write_str(known.canonical_name()),
        }
    }
}

impl From<VulnKind> for String {
    fn from(kind: VulnKind) -> String {
        kind.to_string()
    }
}

impl From<String> for VulnKind {
    fn from(s: String) -> VulnKind {
        if let Some(raw) = s.strip_prefix("unknown(").and_then(|r| r.strip_suffix(')')) {
            return VulnKind::Unknown(raw.to_string());
        }
        VulnKind::from_canonical(&s).unwrap_or(VulnKind::Unknown(s))
    }
}

impl FromStr for VulnKind {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(VulnKind::from(s.to_string()))
    }
}

/// A canonicalized vulnerability label together with the tool's original wording.
///
/// Equality and hashing look only at the canonical kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VulnType {
    pub kind: VulnKind,
    pub raw_label: String,
}

impl PartialEq for VulnType {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Eq for VulnType {}

impl Hash for VulnType {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.kind.hash(state);
    }
}

#[derive(Debug, Error)]
#[error("alias table line {line}: {message}")]
pub struct AliasError {
    pub line: usize,
    pub message: String,
}

/// Mapping from raw tool labels to canonical vulnerability kinds.
///
/// The file format is one `raw_label<TAB>canonical_name` pair per line;
/// blank lines and lines starting with `#` are ignored.
#[derive(Clone, Debug, Default)]
pub struct AliasTable {
    entries: HashMap<String, VulnKind>,
}

fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase()
        .replace('_', "-")
}

impl AliasTable {
    pub fn parse(text: &str) -> Result<AliasTable, AliasError> {
        let mut entries = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (raw, canonical) = line.split_once('\t').ok_or_else(|| AliasError {
                line: idx + 1,
                message: "expected `raw_label<TAB>canonical_name`".into(),
            })?;
            let canonical = canonical.trim();
            let kind = VulnKind::from_canonical(canonical).ok_or_else(|| AliasError {
                line: idx + 1,
                message: format!("`{canonical}` is not a canonical vulnerability type"),
            })?;
            entries.insert(normalize_label(raw), kind);
        }
        Ok(AliasTable { entries })
    }

    /// The table shipped with the crate.
    pub fn builtin() -> &'static AliasTable {
        static TABLE: OnceLock<AliasTable> = OnceLock::new();
        TABLE.get_or_init(|| AliasTable::parse(BUILTIN_ALIASES).expect("builtin alias table"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn canonicalize(&self, raw_label: &str) -> VulnType {
        let key = normalize_label(raw_label);
        let kind = self
            .entries
            .get(&key)
            .cloned()
            .or_else(|| VulnKind::from_canonical(&key))
            .unwrap_or_else(|| VulnKind::Unknown(raw_label.to_string()));
        VulnType {
            kind,
            raw_label: raw_label.to_string(),
        }
    }
}

/// Canonicalize a raw tool label with the builtin alias table.
pub fn canonicalize_vuln_type(raw_label: &str) -> VulnType {
    AliasTable::builtin().canonicalize(raw_label)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackFrame {
    pub index: u32,
    pub function_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
}

impl StackFrame {
    /// Placeholder used for frames the tool could not symbolize.
    pub const UNRESOLVED: &'static str = "??";

    pub fn is_unresolved(&self) -> bool {
        self.function_name == Self::UNRESOLVED
    }
}

/// The top function names of a stack trace, crash site first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StackTriple(Vec<String>);

impl StackTriple {
    /// Returns `None` for an empty list.
    pub fn new(frames: Vec<String>) -> Option<StackTriple> {
        if frames.is_empty() {
            None
        } else {
            Some(StackTriple(frames))
        }
    }

    pub fn frames(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for StackTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" > "))
    }
}

/// Deduplication identity of a unique bug.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BugKey {
    pub triple: StackTriple,
    pub vuln_type: VulnKind,
}

impl BugKey {
    pub fn new(triple: StackTriple, vuln_type: VulnKind) -> BugKey {
        BugKey { triple, vuln_type }
    }

    /// Short stable identifier, handy for referencing a bug on the command line.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for frame in self.triple.frames() {
            hasher.update(frame.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update([1u8]);
        hasher.update(self.vuln_type.to_string().as_bytes());
        hex::encode(&hasher.finalize()[..8])
    }
}

impl fmt::Display for BugKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.vuln_type, self.triple)
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

string_id!(
    /// Identifies a crash-analysis tool, e.g. `asan` or `gdb`.
    ToolId
);
string_id!(
    /// Identifies one crash sample within a campaign.
    CrashId
);

/// One crash-inducing input plus whatever the analysis tools said about it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrashSample {
    pub id: CrashId,
    pub input_path: PathBuf,
    #[serde(default)]
    pub discovering_fuzzer: String,
    #[serde(default)]
    pub trial_id: String,
    #[serde(default)]
    pub discovery_time_s: f64,
    #[serde(default)]
    pub reports: BTreeMap<ToolId, ToolReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploitability: Option<ExploitabilityRecord>,
}

impl CrashSample {
    pub fn new(id: impl Into<String>, input_path: impl Into<PathBuf>) -> CrashSample {
        CrashSample {
            id: CrashId::new(id),
            input_path: input_path.into(),
            discovering_fuzzer: String::new(),
            trial_id: String::new(),
            discovery_time_s: 0.0,
            reports: BTreeMap::new(),
            exploitability: None,
        }
    }

    pub fn with_report(mut self, tool: impl Into<String>, report: impl Into<ToolReport>) -> Self {
        self.reports.insert(ToolId::new(tool), report.into());
        self
    }

    /// `Some(crashed)` when the tool produced a report for this crash.
    pub fn outcome(&self, tool: &ToolId) -> Option<bool> {
        self.reports.get(tool).map(ToolReport::crashed)
    }
}

/// Which parser understands a tool's transcripts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolKind {
    Sanitizer,
    Debugger,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("n_frames must be at least 1")]
    ZeroFrames,
    #[error("primary tool `{0}` is also listed as a supplement")]
    PrimaryIsSupplement(ToolId),
    #[error("tool `{0}` has no registered kind")]
    UnknownToolKind(ToolId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageConfig {
    pub n_frames: usize,
    pub frame_blocklist: Vec<String>,
    pub primary_tool: ToolId,
    pub supplement_tools: Vec<ToolId>,
    pub tool_kinds: BTreeMap<ToolId, ToolKind>,
}

/// Sanitizer runtime, interceptor and libc start-up frames.
pub const DEFAULT_FRAME_BLOCKLIST: &[&str] = &[
    "__asan_*",
    "__asan::*",
    "__interceptor_*",
    "___interceptor_*",
    "__sanitizer_*",
    "__sanitizer::*",
    "__lsan_*",
    "__lsan::*",
    "__ubsan_*",
    "__ubsan::*",
    "__msan_*",
    "__interception::*",
    "??",
    "_start",
    "__libc_start_main",
    "__libc_start_main_impl",
    "__libc_start_call_main",
];

impl Default for TriageConfig {
    fn default() -> Self {
        let mut tool_kinds = BTreeMap::new();
        tool_kinds.insert(ToolId::from("asan"), ToolKind::Sanitizer);
        tool_kinds.insert(ToolId::from("gdb"), ToolKind::Debugger);
        TriageConfig {
            n_frames: 3,
            frame_blocklist: DEFAULT_FRAME_BLOCKLIST.iter().map(|s| s.to_string()).collect(),
            primary_tool: ToolId::from("asan"),
            supplement_tools: vec![ToolId::from("gdb")],
            tool_kinds,
        }
    }
}

impl TriageConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_frames == 0 {
            return Err(ConfigError::ZeroFrames);
        }
        if self.supplement_tools.contains(&self.primary_tool) {
            return Err(ConfigError::PrimaryIsSupplement(self.primary_tool.clone()));
        }
        for tool in std::iter::once(&self.primary_tool).chain(&self.supplement_tools) {
            if !self.tool_kinds.contains_key(tool) {
                return Err(ConfigError::UnknownToolKind(tool.clone()));
            }
        }
        Ok(())
    }

    /// Primary first, then supplements in configured order.
    pub fn tools_by_priority(&self) -> impl Iterator<Item = &ToolId> {
        std::iter::once(&self.primary_tool).chain(self.supplement_tools.iter())
    }

    pub fn is_blocked(&self, function_name: &str) -> bool {
        self.frame_blocklist
            .iter()
            .any(|pattern| glob_match(pattern, function_name))
    }
}

/// `*` matches any run of characters; everything else is literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p = pattern.as_bytes();
    let t = text.as_bytes();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_label_maps_to_itself() {
        let v = canonicalize_vuln_type("heap-buffer-overflow");
        assert_eq!(v.kind, VulnKind::HeapBufferOverflow);
        assert_eq!(v.raw_label, "heap-buffer-overflow");
    }

    #[test]
    fn signal_names_are_aliased() {
        assert_eq!(canonicalize_vuln_type("SIGSEGV").kind, VulnKind::Segv);
        assert_eq!(canonicalize_vuln_type("SEGV").kind, VulnKind::Segv);
        assert_eq!(
            canonicalize_vuln_type("SIGFPE").kind,
            VulnKind::FloatPointException
        );
        assert_eq!(
            canonicalize_vuln_type("attempting double-free").kind,
            VulnKind::FreeError
        );
        assert_eq!(
            canonicalize_vuln_type("allocation-size-too-big").kind,
            VulnKind::ExcessiveMemoryAllocation
        );
    }

    #[test]
    fn unrecognized_label_is_kept_verbatim() {
        let v = canonicalize_vuln_type("totally-novel-label");
        assert_eq!(v.kind, VulnKind::Unknown("totally-novel-label".into()));
        assert_eq!(v.raw_label, "totally-novel-label");
    }

    #[test]
    fn every_known_kind_is_idempotent() {
        for kind in VulnKind::KNOWN {
            let once = canonicalize_vuln_type(kind.canonical_name());
            let twice = canonicalize_vuln_type(once.kind.canonical_name());
            assert_eq!(once.kind, kind);
            assert_eq!(twice.kind, kind);
        }
    }

    #[test]
    fn alias_table_rejects_bad_lines() {
        let err = AliasTable::parse("foo\theap-buffer-overflow\nbar baz\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = AliasTable::parse("foo\tnot-a-type\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn vuln_kind_string_round_trip() {
        for kind in VulnKind::KNOWN {
            assert_eq!(VulnKind::from(kind.to_string()), kind);
        }
        let odd = VulnKind::Unknown("SIGABRT".into());
        assert_eq!(VulnKind::from(odd.to_string()), odd);
    }

    #[test]
    fn glob_patterns() {
        assert!(glob_match("intercept_*", "intercept_x"));
        assert!(glob_match("__asan_*", "__asan_memcpy"));
        assert!(!glob_match("__asan_*", "main"));
        assert!(glob_match("??", "??"));
        assert!(glob_match("*mem*", "__interceptor_memcpy"));
        assert!(!glob_match("a*b", "acbd"));
    }

    #[test]
    fn triage_config_validation() {
        let mut cfg = TriageConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.n_frames = 0;
        assert_eq!(cfg.validate(), Err(ConfigError::ZeroFrames));
        let mut cfg = TriageConfig::default();
        cfg.supplement_tools.push(ToolId::from("asan"));
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::PrimaryIsSupplement(_))
        ));
    }

    fn key_strategy() -> impl Strategy<Value = BugKey> {
        (
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 1..=3),
            prop::sample::select(vec![
                VulnKind::Segv,
                VulnKind::HeapBufferOverflow,
                VulnKind::Unknown("x".into()),
            ]),
        )
            .prop_map(|(frames, kind)| {
                BugKey::new(
                    StackTriple::new(frames.into_iter().map(String::from).collect()).unwrap(),
                    kind,
                )
            })
    }

    proptest! {
        #[test]
        fn bug_key_equality_is_an_equivalence(a in key_strategy(), b in key_strategy(), c in key_strategy()) {
            prop_assert_eq!(&a, &a);
            prop_assert_eq!(a == b, b == a);
            if a == b && b == c {
                prop_assert_eq!(&a, &c);
            }
            let composite = a.triple == b.triple && a.vuln_type == b.vuln_type;
            prop_assert_eq!(a == b, composite);
            prop_assert_eq!(a == b, a.fingerprint() == b.fingerprint());
        }
    }
}
