//! Parsers for crash-analysis tool transcripts: sanitizer error reports,
//! debugger backtraces and exploitability classifier output.
//!
//! All parsers scan for their headers anywhere in the text, so program
//! output interleaved on the same stream is tolerated. When a transcript
//! holds several error blocks only the first one is parsed.

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AliasTable, StackFrame, VulnType};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanitizerReport {
    /// Error type as worded by the sanitizer, e.g. `heap-buffer-overflow`.
    pub vuln_raw: String,
    pub frames: Vec<StackFrame>,
    pub summary_line: String,
    pub crashed: bool,
}

impl SanitizerReport {
    pub fn no_crash() -> SanitizerReport {
        SanitizerReport {
            vuln_raw: String::new(),
            frames: Vec::new(),
            summary_line: String::new(),
            crashed: false,
        }
    }

    /// Re-render in the sanitizer's own text layout. Parsing the result
    /// yields the same frames and error type.
    pub fn render(&self) -> String {
        if !self.crashed {
            return String::new();
        }
        let mut out = format!("==1==ERROR: AddressSanitizer: {} on address 0x0\n", self.vuln_raw);
        for frame in &self.frames {
            let _ = write!(out, "    #{} 0x0 in {}", frame.index, frame.function_name);
            if let Some(file) = &frame.source_file {
                let _ = write!(out, " {file}");
                if let Some(line) = frame.line {
                    let _ = write!(out, ":{line}");
                }
            }
            out.push('\n');
        }
        out.push('\n');
        if !self.summary_line.is_empty() {
            out.push_str(&self.summary_line);
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebuggerReport {
    pub signal: String,
    pub frames: Vec<StackFrame>,
    pub crashed: bool,
}

impl DebuggerReport {
    pub fn no_crash() -> DebuggerReport {
        DebuggerReport {
            signal: String::new(),
            frames: Vec::new(),
            crashed: false,
        }
    }

    pub fn render(&self) -> String {
        if !self.crashed {
            return "[Inferior 1 (process 1) exited normally]\n".to_string();
        }
        let mut out = format!("Program received signal {}, fault.\n", self.signal);
        for frame in &self.frames {
            let _ = write!(out, "#{}  0x0 in {} ()", frame.index, frame.function_name);
            if let Some(file) = &frame.source_file {
                let _ = write!(out, " at {file}");
                if let Some(line) = frame.line {
                    let _ = write!(out, ":{line}");
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExploitabilityCategory {
    Exploitable,
    ProbablyExploitable,
    ProbablyNotExploitable,
    Unknown,
}

impl ExploitabilityCategory {
    pub fn parse(label: &str) -> ExploitabilityCategory {
        match label.trim().to_ascii_uppercase().as_str() {
            "EXPLOITABLE" => ExploitabilityCategory::Exploitable,
            "PROBABLY_EXPLOITABLE" => ExploitabilityCategory::ProbablyExploitable,
            "PROBABLY_NOT_EXPLOITABLE" => ExploitabilityCategory::ProbablyNotExploitable,
            _ => ExploitabilityCategory::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExploitabilityCategory::Exploitable => "EXPLOITABLE",
            ExploitabilityCategory::ProbablyExploitable => "PROBABLY_EXPLOITABLE",
            ExploitabilityCategory::ProbablyNotExploitable => "PROBABLY_NOT_EXPLOITABLE",
            ExploitabilityCategory::Unknown => "UNKNOWN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitabilityRecord {
    pub category: ExploitabilityCategory,
    pub hash: String,
    pub description: String,
}

/// Output of one analysis tool for one crash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ToolReport {
    Sanitizer(SanitizerReport),
    Debugger(DebuggerReport),
}

impl ToolReport {
    pub fn crashed(&self) -> bool {
        match self {
            ToolReport::Sanitizer(r) => r.crashed,
            ToolReport::Debugger(r) => r.crashed,
        }
    }

    pub fn frames(&self) -> &[StackFrame] {
        match self {
            ToolReport::Sanitizer(r) => &r.frames,
            ToolReport::Debugger(r) => &r.frames,
        }
    }

    /// The tool's own label for the fault: sanitizer error type or signal name.
    pub fn vuln_label(&self) -> &str {
        match self {
            ToolReport::Sanitizer(r) => &r.vuln_raw,
            ToolReport::Debugger(r) => &r.signal,
        }
    }

    pub fn vuln_type(&self, aliases: &AliasTable) -> VulnType {
        aliases.canonicalize(self.vuln_label())
    }
}

impl From<SanitizerReport> for ToolReport {
    fn from(r: SanitizerReport) -> Self {
        ToolReport::Sanitizer(r)
    }
}

impl From<DebuggerReport> for ToolReport {
    fn from(r: DebuggerReport) -> Self {
        ToolReport::Debugger(r)
    }
}

fn sanitizer_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"ERROR: (\w*Sanitizer|libFuzzer): (.*)$").unwrap())
}

fn sanitizer_summary_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"SUMMARY: \w*Sanitizer: (\S+)").unwrap())
}

fn sanitizer_frame_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^#(\d+)\s+0x[0-9a-fA-F]+(?:\s+in\s+(.*?))?(?:\s+(\(.*\)))?\s*$").unwrap())
}

fn file_location_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.+?):(\d+)(?::\d+)?$").unwrap())
}

fn label_type_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z][A-Za-z-]*$").unwrap())
}

/// Error type from the text following `ERROR: XSanitizer: `.
fn header_vuln_label(rest: &str) -> String {
    let mut cut = rest.len();
    for sep in [" on ", " at ", " (", ": "] {
        if let Some(pos) = rest.find(sep) {
            cut = cut.min(pos);
        }
    }
    rest[..cut].trim().trim_end_matches(':').to_string()
}

/// Splits `function location` as printed after `in` in a sanitizer frame.
fn split_sanitizer_symbol(text: &str) -> (String, Option<String>, Option<u32>) {
    let text = text.trim();
    if text.is_empty() {
        return (StackFrame::UNRESOLVED.to_string(), None, None);
    }
    // `func (module+0xoff)`: module location carries no source info.
    if text.ends_with(')') {
        if let Some(pos) = text.rfind(" (") {
            let inner = &text[pos + 2..text.len() - 1];
            if inner.contains("+0x") || inner.starts_with('/') || inner.starts_with("<") {
                return (text[..pos].trim().to_string(), None, None);
            }
        }
    }
    if let Some(pos) = text.rfind(char::is_whitespace) {
        let (func, loc) = (text[..pos].trim(), text[pos + 1..].trim());
        if !func.is_empty() {
            if let Some(caps) = file_location_re().captures(loc) {
                let line = caps[2].parse().ok();
                return (func.to_string(), Some(caps[1].to_string()), line);
            }
            if loc.contains('/') && !loc.ends_with(')') {
                return (func.to_string(), Some(loc.to_string()), None);
            }
        }
    }
    (text.to_string(), None, None)
}

fn parse_sanitizer_frame(line: &str) -> Option<StackFrame> {
    let caps = sanitizer_frame_re().captures(line.trim())?;
    let index = caps[1].parse().ok()?;
    let (function_name, source_file, line) = match caps.get(2) {
        Some(sym) => {
            let mut full = sym.as_str().to_string();
            if let Some(module) = caps.get(3) {
                full.push(' ');
                full.push_str(module.as_str());
            }
            split_sanitizer_symbol(&full)
        }
        None => (StackFrame::UNRESOLVED.to_string(), None, None),
    };
    Some(StackFrame {
        index,
        function_name,
        source_file,
        line,
    })
}

/// Collects the first contiguous run of frames starting at `#0`.
fn collect_frames<'a>(
    lines: impl Iterator<Item = &'a str>,
    parse: impl Fn(&str) -> Option<StackFrame>,
    stop: impl Fn(&str) -> bool,
    allow_continuation: bool,
) -> Vec<StackFrame> {
    let mut frames: Vec<StackFrame> = Vec::new();
    for line in lines {
        if stop(line) {
            break;
        }
        match parse(line) {
            Some(frame) if frames.is_empty() => {
                if frame.index == 0 {
                    frames.push(frame);
                }
            }
            Some(frame) => {
                if frame.index != frames.last().map_or(0, |f| f.index) + 1 {
                    break;
                }
                frames.push(frame);
            }
            None if frames.is_empty() => {}
            None => {
                if allow_continuation && line.starts_with([' ', '\t']) && !line.trim().is_empty() {
                    continue;
                }
                break;
            }
        }
    }
    frames
}

pub fn parse_sanitizer_report(text: &str) -> Result<SanitizerReport, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let header = lines
        .iter()
        .enumerate()
        .find_map(|(i, l)| sanitizer_header_re().captures(l).map(|c| (i, c)));
    let Some((start, caps)) = header else {
        return Ok(SanitizerReport::no_crash());
    };
    let header_label = header_vuln_label(&caps[2]);

    let block_end = lines[start + 1..]
        .iter()
        .position(|l| sanitizer_header_re().is_match(l))
        .map_or(lines.len(), |p| start + 1 + p);
    let block = &lines[start + 1..block_end];

    let frames = collect_frames(
        block.iter().copied(),
        parse_sanitizer_frame,
        |_| false,
        false,
    );
    if frames.is_empty() {
        return Err(ParseError::MalformedReport(format!(
            "sanitizer error header `{}` without stack frames",
            lines[start].trim()
        )));
    }

    let summary_line = block
        .iter()
        .find(|l| l.contains("SUMMARY: "))
        .map(|l| l.trim().to_string())
        .unwrap_or_default();
    let summary_label = sanitizer_summary_re()
        .captures(&summary_line)
        .map(|c| c[1].to_string())
        .filter(|label| label_type_re().is_match(label));

    Ok(SanitizerReport {
        vuln_raw: summary_label.unwrap_or(header_label),
        frames,
        summary_line,
        crashed: true,
    })
}

const FATAL_SIGNALS: &[&str] = &[
    "SIGSEGV", "SIGFPE", "SIGABRT", "SIGILL", "SIGBUS", "SIGSYS", "SIGIOT",
];

fn debugger_signal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"Program (?:received|terminated with) signal (SIG[A-Z0-9]+)").unwrap()
    })
}

fn debugger_frame_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^#(\d+)\s+(?:0x[0-9a-fA-F]+\s+in\s+)?(.*)$").unwrap())
}

fn parse_debugger_frame(line: &str) -> Option<StackFrame> {
    let caps = debugger_frame_re().captures(line.trim_end())?;
    let index = caps[1].parse().ok()?;
    let rest = caps[2].trim();
    let name_end = rest
        .find(" (")
        .or_else(|| rest.find(char::is_whitespace))
        .unwrap_or(rest.len());
    let function_name = rest[..name_end].trim();
    if function_name.is_empty() {
        return None;
    }
    let tail = &rest[name_end..];
    let (source_file, line) = match tail.rfind(" at ") {
        Some(pos) => match file_location_re().captures(tail[pos + 4..].trim()) {
            Some(c) => (Some(c[1].to_string()), c[2].parse().ok()),
            None => (Some(tail[pos + 4..].trim().to_string()), None),
        },
        None => (None, None),
    };
    Some(StackFrame {
        index,
        function_name: function_name.to_string(),
        source_file,
        line,
    })
}

pub fn parse_debugger_report(text: &str) -> Result<DebuggerReport, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let fault = lines.iter().enumerate().find_map(|(i, l)| {
        debugger_signal_re()
            .captures(l)
            .map(|c| (i, c[1].to_string()))
            .filter(|(_, sig)| FATAL_SIGNALS.contains(&sig.as_str()))
    });
    let Some((start, signal)) = fault else {
        return Ok(DebuggerReport::no_crash());
    };
    let frames = collect_frames(
        lines[start + 1..].iter().copied(),
        parse_debugger_frame,
        |l| debugger_signal_re().is_match(l),
        true,
    );
    if frames.is_empty() {
        return Err(ParseError::MalformedReport(format!(
            "fatal signal {signal} without a backtrace"
        )));
    }
    Ok(DebuggerReport {
        signal,
        frames,
        crashed: true,
    })
}

const CLASSIFIER_KEYS: [&str; 3] = ["Description:", "Hash:", "Exploitability Classification:"];

pub fn parse_exploitability(text: &str) -> Result<ExploitabilityRecord, ParseError> {
    let lines: Vec<&str> = text.lines().map(str::trim).collect();
    let key_of = |l: &str| CLASSIFIER_KEYS.iter().copied().find(|k| l.starts_with(k));
    let Some((start, delimiter)) = lines
        .iter()
        .enumerate()
        .find_map(|(i, l)| key_of(l).map(|k| (i, k)))
    else {
        return Err(ParseError::MalformedReport(
            "no exploitability classifier block".into(),
        ));
    };
    // The key that opens the first block also opens every following block.
    let end = lines[start + 1..]
        .iter()
        .position(|l| l.starts_with(delimiter))
        .map_or(lines.len(), |p| start + 1 + p);

    let field = |key: &str| {
        lines[start..end]
            .iter()
            .find_map(|l| l.strip_prefix(key))
            .map(|v| v.trim().to_string())
    };
    Ok(ExploitabilityRecord {
        category: field("Exploitability Classification:")
            .map_or(ExploitabilityCategory::Unknown, |c| {
                ExploitabilityCategory::parse(&c)
            }),
        hash: field("Hash:").unwrap_or_default(),
        description: field("Description:").unwrap_or_default(),
    })
}
