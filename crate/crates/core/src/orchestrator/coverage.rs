//! Line coverage of saved coverage-increasing inputs, replayed against a
//! single uniformly instrumented build.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::GcovTarget;
use super::executor::{run_with_timeout, substitute_input};

/// A source line: `(file, 1-based line number)`.
pub type LineId = (String, u32);

#[derive(Debug, Error)]
pub enum CoverageError {
    #[error("replay of {input} failed: {reason}")]
    ReplayFailure { input: PathBuf, reason: String },
    #[error("coverage data unavailable: {0}")]
    NoCoverageData(String),
}

/// Per-line execution counts as reported by a coverage tool.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LineCounts {
    pub instrumented: BTreeSet<LineId>,
    pub executed: BTreeSet<LineId>,
}

/// Parses gcov's intermediate text (`gcov -t` / `.gcov` files):
/// `count:line:source`, where `-` marks non-executable lines and `#####`
/// or `=====` marks executable lines that never ran.
pub fn parse_gcov_text(text: &str) -> LineCounts {
    let mut counts = LineCounts::default();
    let mut file = String::new();
    for raw in text.lines() {
        let mut parts = raw.splitn(3, ':');
        let (Some(count), Some(line), rest) = (parts.next(), parts.next(), parts.next()) else {
            continue;
        };
        let count = count.trim();
        let Ok(line_no) = line.trim().parse::<u32>() else {
            continue;
        };
        if line_no == 0 {
            if let Some(src) = rest.and_then(|r| r.strip_prefix("Source:")) {
                file = src.trim().to_string();
            }
            continue;
        }
        if count == "-" {
            continue;
        }
        let id = (file.clone(), line_no);
        counts.instrumented.insert(id.clone());
        let hits = count.trim_end_matches('*');
        if hits != "#####" && hits != "=====" && hits.parse::<u64>().map_or(false, |h| h > 0) {
            counts.executed.insert(id);
        }
    }
    counts
}

/// Parses the `SF:`/`DA:` records of an lcov tracefile.
pub fn parse_lcov_info(text: &str) -> LineCounts {
    let mut counts = LineCounts::default();
    let mut file = String::new();
    for line in text.lines() {
        if let Some(sf) = line.strip_prefix("SF:") {
            file = sf.trim().to_string();
        } else if let Some(da) = line.strip_prefix("DA:") {
            let mut it = da.split(',');
            let (Some(l), Some(h)) = (it.next(), it.next()) else {
                continue;
            };
            let Ok(l) = l.trim().parse::<u32>() else { continue };
            let id = (file.clone(), l);
            counts.instrumented.insert(id.clone());
            if h.trim().parse::<u64>().map_or(false, |h| h > 0) {
                counts.executed.insert(id);
            }
        }
    }
    counts
}

/// Something that can tell which lines an input executes.
pub trait LineCoverageSource {
    /// All instrumented lines of the target.
    fn instrumented_lines(&self) -> Result<BTreeSet<LineId>, CoverageError>;
    /// Lines executed when replaying one input.
    fn replay(&self, input: &Path) -> Result<BTreeSet<LineId>, CoverageError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub percent: f64,
    pub covered_lines: usize,
    pub instrumented_lines: usize,
    #[serde(skip)]
    pub covered: BTreeSet<LineId>,
    pub replay_failures: Vec<String>,
}

/// Union of lines executed by every replayable input, as a percentage of
/// the target's instrumented lines.
pub fn compute_line_coverage(
    inputs: &[PathBuf],
    source: &dyn LineCoverageSource,
) -> Result<CoverageReport, CoverageError> {
    let instrumented = source.instrumented_lines()?;
    let mut covered = BTreeSet::new();
    let mut replay_failures = Vec::new();
    for input in inputs {
        match source.replay(input) {
            Ok(lines) => covered.extend(lines.into_iter().filter(|l| instrumented.contains(l))),
            Err(e) => {
                log::warn!("{e}");
                replay_failures.push(e.to_string());
            }
        }
    }
    let percent = if instrumented.is_empty() {
        0.0
    } else {
        100.0 * covered.len() as f64 / instrumented.len() as f64
    };
    Ok(CoverageReport {
        percent,
        covered_lines: covered.len(),
        instrumented_lines: instrumented.len(),
        covered,
        replay_failures,
    })
}

/// Replays inputs against a gcc `--coverage` build and reads the result
/// through `gcov -t`.
pub struct GcovReplay {
    pub target: GcovTarget,
    pub gcov: PathBuf,
    pub timeout: Duration,
}

impl GcovReplay {
    pub fn new(target: GcovTarget) -> GcovReplay {
        GcovReplay {
            target,
            gcov: PathBuf::from("gcov"),
            timeout: Duration::from_secs(10),
        }
    }

    fn clear_counters(&self) -> std::io::Result<()> {
        for entry in std::fs::read_dir(&self.target.object_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "gcda") {
                std::fs::remove_file(path)?;
            }
        }
        Ok(())
    }

    fn read_counts(&self) -> Result<LineCounts, CoverageError> {
        let mut total = LineCounts::default();
        for src in &self.target.sources {
            let out = Command::new(&self.gcov)
                .arg("-t")
                .arg("-o")
                .arg(&self.target.object_dir)
                .arg(src)
                .current_dir(&self.target.object_dir)
                .stderr(Stdio::null())
                .output()
                .map_err(|e| CoverageError::NoCoverageData(format!("gcov: {e}")))?;
            let counts = parse_gcov_text(&String::from_utf8_lossy(&out.stdout));
            total.instrumented.extend(counts.instrumented);
            total.executed.extend(counts.executed);
        }
        Ok(total)
    }
}

impl LineCoverageSource for GcovReplay {
    fn instrumented_lines(&self) -> Result<BTreeSet<LineId>, CoverageError> {
        self.clear_counters()
            .map_err(|e| CoverageError::NoCoverageData(e.to_string()))?;
        let counts = self.read_counts()?;
        if counts.instrumented.is_empty() {
            return Err(CoverageError::NoCoverageData(
                "gcov reported no instrumented lines".into(),
            ));
        }
        Ok(counts.instrumented)
    }

    fn replay(&self, input: &Path) -> Result<BTreeSet<LineId>, CoverageError> {
        let fail = |reason: String| CoverageError::ReplayFailure {
            input: input.to_path_buf(),
            reason,
        };
        self.clear_counters().map_err(|e| fail(e.to_string()))?;
        let (args, stdin) = substitute_input(&self.target.args, input);
        let mut cmd = Command::new(&self.target.binary);
        cmd.args(&args).current_dir(&self.target.object_dir);
        // Crashing inputs still flush counters only on normal exit, so a
        // nonzero status is not treated as a failure here.
        run_with_timeout(cmd, stdin.as_deref(), self.timeout).map_err(|e| fail(e.to_string()))?;
        Ok(self.read_counts().map_err(|e| fail(e.to_string()))?.executed)
    }
}

/// Coverage source for mock targets: each saved input lists the lines it
/// executes as `MOCKCOV <n>,<a>-<b>,...`.
pub struct MockLineCoverage {
    pub file: String,
    pub total_lines: u32,
}

impl LineCoverageSource for MockLineCoverage {
    fn instrumented_lines(&self) -> Result<BTreeSet<LineId>, CoverageError> {
        Ok((1..=self.total_lines).map(|l| (self.file.clone(), l)).collect())
    }

    fn replay(&self, input: &Path) -> Result<BTreeSet<LineId>, CoverageError> {
        let fail = |reason: String| CoverageError::ReplayFailure {
            input: input.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(input).map_err(|e| fail(e.to_string()))?;
        let body = text
            .trim()
            .strip_prefix("MOCKCOV")
            .ok_or_else(|| fail("not a mock coverage input".into()))?;
        let mut lines = BTreeSet::new();
        for part in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (lo, hi) = part.split_once('-').unwrap_or((part, part));
            let lo: u32 = lo.trim().parse().map_err(|_| fail(format!("bad line `{part}`")))?;
            let hi: u32 = hi.trim().parse().map_err(|_| fail(format!("bad line `{part}`")))?;
            lines.extend((lo..=hi).map(|l| (self.file.clone(), l)));
        }
        Ok(lines)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GCOV: &str = "\
        -:    0:Source:toy.c
        -:    0:Graph:toy.gcno
        -:    1:#include <stdio.h>
        1:    2:int main(int argc, char **argv) {
       1*:    4:  int c = f ? fgetc(f) : -1;
        1:    5:  if (c == 'A')
    #####:    8:    puts(\"b\");
    =====:    9:    never();
        -:   10:}
";

    #[test]
    fn gcov_text() {
        let c = parse_gcov_text(GCOV);
        assert_eq!(c.instrumented.len(), 5);
        assert_eq!(c.executed.len(), 3);
        assert!(c.executed.contains(&("toy.c".to_string(), 4)));
        assert!(!c.executed.contains(&("toy.c".to_string(), 8)));
    }

    #[test]
    fn lcov_info() {
        let text = "TN:\nSF:/src/a.c\nDA:1,4\nDA:2,0\nDA:5,1\nend_of_record\nSF:/src/b.c\nDA:1,0\nend_of_record\n";
        let c = parse_lcov_info(text);
        assert_eq!(c.instrumented.len(), 4);
        assert_eq!(c.executed.len(), 2);
    }

    #[test]
    fn mock_coverage_union() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let bad = dir.path().join("bad");
        std::fs::write(&a, "MOCKCOV 1,2,3").unwrap();
        std::fs::write(&b, "MOCKCOV 3-4").unwrap();
        std::fs::write(&bad, "junk").unwrap();
        let src = MockLineCoverage {
            file: "t".into(),
            total_lines: 10,
        };
        let r = compute_line_coverage(&[a.clone(), b, bad], &src).unwrap();
        assert_eq!(r.percent, 40.0);
        assert_eq!(r.replay_failures.len(), 1);
        let twice = compute_line_coverage(&[a.clone(), a.clone()], &src).unwrap();
        let once = compute_line_coverage(&[a], &src).unwrap();
        assert_eq!(twice, once);
        let none = compute_line_coverage(&[], &src).unwrap();
        assert_eq!(none.percent, 0.0);
    }
}
