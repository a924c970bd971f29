//! The report bundle: every comparison table and data series of a
//! campaign, built from stored artifacts only, with JSON and plain-text
//! renderings of the same in-memory value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cve::{high_severity_count, ConfirmedMatch, SeverityCounts};
use crate::metrics::{bug_timings, cumulative_curve, exploitable_summary, overhead_summary, rare_bugs, BugEvent};
use crate::model::BugKey;
use crate::orchestrator::campaign::{load_trials, CampaignManifest, TrialRecord};
use crate::orchestrator::config::TargetDescriptor;
use crate::orchestrator::coverage::{compute_line_coverage, GcovReplay, LineCoverageSource, MockLineCoverage};
use crate::orchestrator::monitor::ResourceTrace;
use crate::parsers::ExploitabilityRecord;
use crate::pipeline::{load_confirmations, BugRow, load_triage, PipelineError, TargetValidation, TriageArtifacts};
use crate::stats::{compare, spearman, summary, ComparisonResult};

pub const REPORT_DIR: &str = "report";

/// Values of one metric over the repetitions of a (target, fuzzer) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub target: String,
    pub fuzzer: String,
    pub trials: Vec<String>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub rsd_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub target: String,
    pub metric: String,
    #[serde(flatten)]
    pub result: ComparisonResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsdRow {
    pub metric: String,
    pub target: String,
    pub fuzzer: String,
    pub rsd_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploitableRow {
    pub target: String,
    pub fuzzer: String,
    pub mean_unique_exploitable: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RareBugRow {
    pub target: String,
    pub bugs: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RareBugTable {
    pub rows: Vec<RareBugRow>,
    pub total: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub target: String,
    pub fuzzer: String,
    pub grid_s: Vec<f64>,
    pub mean_unique_bugs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub target: String,
    pub bug_id: String,
    pub fuzzer: String,
    pub tte_s: Vec<Option<f64>>,
    pub success_count: usize,
    pub mean_tte_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub target: String,
    pub n: usize,
    pub r_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    /// Target name, or `Avg` for the mean over targets.
    pub target: String,
    pub fuzzer: String,
    pub cpu_util_avg: f64,
    pub mem_avg_mb: f64,
    pub mem_max_mb: f64,
    pub disk_read_mb: f64,
    pub disk_write_mb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub campaign_id: String,
    pub rng_seed: u64,
    pub baseline: String,
    pub seed_digests: BTreeMap<String, String>,
    pub trial_seeds: BTreeMap<String, u64>,
    pub tool_versions: BTreeMap<String, String>,
    pub escalated_targets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub fuzzers: Vec<String>,
    pub targets: Vec<String>,
    pub repetitions: u32,
    pub unique_bugs: Vec<SeriesRow>,
    pub comparisons: Vec<ComparisonRow>,
    pub severity: SeverityCounts,
    pub exploitable: Vec<ExploitableRow>,
    pub rare_bugs: RareBugTable,
    pub curves: Vec<CurveSeries>,
    pub bug_timings: Vec<TimingRow>,
    pub rsd: Vec<RsdRow>,
    pub coverage: Vec<SeriesRow>,
    pub coverage_correlation: Vec<CorrelationRow>,
    pub overhead: Vec<OverheadRow>,
    pub validation: BTreeMap<String, TargetValidation>,
    pub provenance: Provenance,
}

fn series(target: &str, fuzzer: &str, trials: Vec<String>, values: Vec<f64>) -> SeriesRow {
    let s = summary(&values).ok();
    SeriesRow {
        target: target.to_string(),
        fuzzer: fuzzer.to_string(),
        trials,
        mean: s.as_ref().map_or(0.0, |s| s.mean),
        median: s.as_ref().map_or(0.0, |s| s.median),
        rsd_percent: s.and_then(|s| s.rsd_percent),
        values,
    }
}

fn coverage_source(target: &str, def: &TargetDescriptor) -> Option<Box<dyn LineCoverageSource>> {
    match def {
        TargetDescriptor::Mock(m) => Some(Box::new(MockLineCoverage {
            file: target.to_string(),
            total_lines: m.total_lines,
        })),
        TargetDescriptor::Process(p) => p
            .coverage
            .clone()
            .map(|g| Box::new(GcovReplay::new(g)) as Box<dyn LineCoverageSource>),
    }
}

fn tool_versions(manifest: &CampaignManifest) -> BTreeMap<String, String> {
    let mut versions = BTreeMap::new();
    versions.insert("fuzzeval".to_string(), env!("CARGO_PKG_VERSION").to_string());
    let real = manifest
        .config
        .target_defs
        .values()
        .any(|t| matches!(t, TargetDescriptor::Process(_)));
    if real {
        for tool in ["gdb", "gcov"] {
            let v = std::process::Command::new(tool)
                .arg("--version")
                .output()
                .ok()
                .and_then(|o| String::from_utf8_lossy(&o.stdout).lines().next().map(str::to_string))
                .unwrap_or_else(|| "unavailable".into());
            versions.insert(tool.to_string(), v);
        }
    }
    versions
}

/// Builds the full bundle for `out`, comparing every fuzzer to `baseline`.
pub fn build_bundle(out: &Path, baseline: &str) -> Result<ReportBundle, PipelineError> {
    let (manifest, trials) = load_trials(out)?;
    let triage = load_triage(out)?;
    let config = &manifest.config;
    if !config.fuzzers.iter().any(|f| f == baseline) {
        return Err(PipelineError::UnknownBaseline(baseline.to_string()));
    }
    let reps = config.repetitions as usize;

    // Trials grouped per (target, fuzzer), in repetition order.
    let mut groups: BTreeMap<(String, String), Vec<(PathBuf, TrialRecord)>> = BTreeMap::new();
    for (dir, r) in &trials {
        groups
            .entry((r.target.clone(), r.fuzzer.clone()))
            .or_default()
            .push((dir.clone(), r.clone()));
    }
    for g in groups.values_mut() {
        g.sort_by_key(|(_, r)| r.rep);
    }
    let mut events: BTreeMap<String, Vec<BugEvent<String>>> = BTreeMap::new();
    for e in &triage.events {
        events.entry(e.trial.clone()).or_default().push(BugEvent {
            key: e.bug_id.clone(),
            time_s: e.time_s,
        });
    }
    let mut exploit: BTreeMap<String, Vec<ExploitabilityRecord>> = BTreeMap::new();
    for e in &triage.exploitable {
        exploit.entry(e.trial.clone()).or_default().push(ExploitabilityRecord {
            category: e.category,
            hash: e.hash.clone(),
            description: String::new(),
        });
    }
    let rep_events = |g: &[(PathBuf, TrialRecord)]| -> Vec<Vec<BugEvent<String>>> {
        g.iter()
            .map(|(_, r)| events.get(&r.trial_id()).cloned().unwrap_or_default())
            .collect()
    };

    let grid: Vec<f64> = (0..=config.curve_points)
        .map(|k| config.duration_s * k as f64 / config.curve_points as f64)
        .collect();

    let mut unique_bugs = Vec::new();
    let mut curves = Vec::new();
    let mut exploitable = Vec::new();
    let mut overhead = Vec::new();
    let mut coverage = Vec::new();
    for target in &config.targets {
        let source = config
            .target_defs
            .get(target)
            .and_then(|d| coverage_source(target, d));
        for fuzzer in &config.fuzzers {
            let Some(g) = groups.get(&(target.clone(), fuzzer.clone())) else { continue };
            let ids: Vec<String> = g.iter().map(|(_, r)| r.trial_id()).collect();
            let per_rep = rep_events(g);
            let counts: Vec<f64> = per_rep
                .iter()
                .map(|ev| ev.iter().map(|e| &e.key).collect::<BTreeSet<_>>().len() as f64)
                .collect();
            unique_bugs.push(series(target, fuzzer, ids.clone(), counts));
            curves.push(CurveSeries {
                target: target.clone(),
                fuzzer: fuzzer.clone(),
                mean_unique_bugs: cumulative_curve(&per_rep, &grid).unwrap_or_default(),
                grid_s: grid.clone(),
            });
            let records: Vec<Vec<ExploitabilityRecord>> = g
                .iter()
                .map(|(_, r)| exploit.get(&r.trial_id()).cloned().unwrap_or_default())
                .collect();
            exploitable.push(ExploitableRow {
                target: target.clone(),
                fuzzer: fuzzer.clone(),
                mean_unique_exploitable: exploitable_summary(&records),
            });

            let summaries: Vec<_> = g
                .iter()
                .filter_map(|(dir, r)| ResourceTrace::load(&dir.join(&r.trace)).ok())
                .filter_map(|t| overhead_summary(&t).ok())
                .collect();
            if !summaries.is_empty() {
                let n = summaries.len() as f64;
                let mean = |f: fn(&crate::metrics::OverheadSummary) -> f64| {
                    summaries.iter().map(f).sum::<f64>() / n
                };
                overhead.push(OverheadRow {
                    target: target.clone(),
                    fuzzer: fuzzer.clone(),
                    cpu_util_avg: mean(|s| s.cpu_util_avg),
                    mem_avg_mb: mean(|s| s.mem_avg_mb),
                    mem_max_mb: summaries.iter().map(|s| s.mem_max_mb).fold(0.0, f64::max),
                    disk_read_mb: mean(|s| s.disk_read_mb),
                    disk_write_mb: mean(|s| s.disk_write_mb),
                });
            }

            if let Some(src) = &source {
                let percents: Vec<f64> = g
                    .iter()
                    .map(|(dir, r)| {
                        let inputs: Vec<PathBuf> = r.coverage_inputs.iter().map(|i| dir.join(i)).collect();
                        compute_line_coverage(&inputs, src.as_ref()).map_or(0.0, |c| c.percent)
                    })
                    .collect();
                coverage.push(series(target, fuzzer, ids, percents));
            }
        }
    }

    let mut comparisons = Vec::new();
    for target in &config.targets {
        let find = |rows: &[SeriesRow], f: &str| {
            rows.iter()
                .find(|r| &r.target == target && r.fuzzer == f)
                .map(|r| r.values.clone())
        };
        for (metric, rows) in [("unique_bugs", &unique_bugs), ("line_coverage", &coverage)] {
            let Some(base) = find(rows, baseline) else { continue };
            for fuzzer in config.fuzzers.iter().filter(|f| *f != baseline) {
                let Some(chal) = find(rows, fuzzer) else { continue };
                if let Ok(result) = compare(baseline, &base, fuzzer, &chal) {
                    comparisons.push(ComparisonRow {
                        target: target.clone(),
                        metric: metric.to_string(),
                        result,
                    });
                }
            }
        }
    }

    let rsd = unique_bugs
        .iter()
        .map(|r| ("unique_bugs", r))
        .chain(coverage.iter().map(|r| ("line_coverage", r)))
        .map(|(m, r)| RsdRow {
            metric: m.to_string(),
            target: r.target.clone(),
            fuzzer: r.fuzzer.clone(),
            rsd_percent: r.rsd_percent,
        })
        .collect();

    let coverage_correlation = config
        .targets
        .iter()
        .filter(|t| coverage.iter().any(|c| &c.target == *t))
        .map(|target| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for c in coverage.iter().filter(|c| &c.target == target) {
                let bugs = unique_bugs
                    .iter()
                    .find(|u| u.target == c.target && u.fuzzer == c.fuzzer)
                    .map(|u| u.values.clone())
                    .unwrap_or_default();
                x.extend(&c.values);
                y.extend(bugs);
            }
            match spearman(&x, &y) {
                Ok(r) => CorrelationRow {
                    target: target.clone(),
                    n: r.n,
                    r_s: Some(r.r_s),
                    note: None,
                },
                Err(e) => CorrelationRow {
                    target: target.clone(),
                    n: x.len(),
                    r_s: None,
                    note: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut avg_rows = Vec::new();
    for fuzzer in &config.fuzzers {
        let rows: Vec<&OverheadRow> = overhead.iter().filter(|r| &r.fuzzer == fuzzer).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&OverheadRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        avg_rows.push(OverheadRow {
            target: "Avg".into(),
            fuzzer: fuzzer.clone(),
            cpu_util_avg: mean(|r| r.cpu_util_avg),
            mem_avg_mb: mean(|r| r.mem_avg_mb),
            mem_max_mb: mean(|r| r.mem_max_mb),
            disk_read_mb: mean(|r| r.disk_read_mb),
            disk_write_mb: mean(|r| r.disk_write_mb),
        });
    }
    overhead.extend(avg_rows);

    let rare_bug_table = rare_table(&triage, &config.fuzzers, &config.targets);

    let mut timings = Vec::new();
    for bug in &triage.bugs {
        for fuzzer in &config.fuzzers {
            let Some(g) = groups.get(&(bug.target.clone(), fuzzer.clone())) else { continue };
            let t = bug_timings(&rep_events(g), &bug.bug_id);
            timings.push(TimingRow {
                target: bug.target.clone(),
                bug_id: bug.bug_id.clone(),
                fuzzer: fuzzer.clone(),
                mean_tte_s: t.mean_tte_s(),
                tte_s: t.tte_s,
                success_count: t.success_count,
            });
        }
    }

    let confirmed: Vec<ConfirmedMatch> = load_confirmations(out)?
        .into_iter()
        .filter(|c| c.accepted())
        .flat_map(|c| {
            let bug = triage
                .bugs
                .iter()
                .find(|b| b.bug_id == c.bug_id)
                .and_then(BugRow::key)
                .unwrap_or_else(|| label_key(&c.bug_id));
            c.fuzzers
                .iter()
                .map(|f| ConfirmedMatch {
                    fuzzer: f.clone(),
                    bug: bug.clone(),
                    entry: c.entry.clone(),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut severity = high_severity_count(&confirmed);
    for f in &config.fuzzers {
        severity.counts.entry(f.clone()).or_insert(0);
    }

    let provenance = Provenance {
        campaign_id: manifest.campaign_id.clone(),
        rng_seed: config.rng_seed,
        baseline: baseline.to_string(),
        seed_digests: manifest
            .seed_sets
            .iter()
            .map(|(t, s)| (t.clone(), s.digest()))
            .collect(),
        trial_seeds: trials.iter().map(|(_, r)| (r.trial_id(), r.trial_seed)).collect(),
        tool_versions: tool_versions(&manifest),
        escalated_targets: manifest.escalated_targets.clone(),
    };

    debug_assert_eq!(unique_bugs.iter().map(|r| r.values.len()).max().unwrap_or(reps), reps);
    Ok(ReportBundle {
        fuzzers: config.fuzzers.clone(),
        targets: config.targets.clone(),
        repetitions: config.repetitions,
        unique_bugs,
        comparisons,
        severity,
        exploitable,
        rare_bugs: rare_bug_table,
        curves,
        bug_timings: timings,
        rsd,
        coverage,
        coverage_correlation,
        overhead,
        validation: triage.summary.targets.clone(),
        provenance,
    })
}

/// Confirmations whose bug was dropped by a later re-triage keep their id
/// as the only frame.
fn label_key(bug_id: &str) -> BugKey {
    BugKey::new(
        crate::model::StackTriple::new(vec![bug_id.to_string()]).expect("nonempty"),
        crate::model::VulnKind::Unknown(String::new()),
    )
}

fn rare_table(triage: &TriageArtifacts, fuzzers: &[String], targets: &[String]) -> RareBugTable {
    let mut rows = Vec::new();
    let mut total: BTreeMap<String, usize> = fuzzers.iter().map(|f| (f.clone(), 0)).collect();
    for target in targets {
        let incidence: BTreeMap<String, BTreeSet<String>> = triage
            .bugs
            .iter()
            .filter(|b| &b.target == target)
            .map(|b| (b.bug_id.clone(), b.fuzzers.clone()))
            .collect();
        let rare = rare_bugs(&incidence);
        let bugs: BTreeMap<String, Vec<String>> = fuzzers
            .iter()
            .map(|f| {
                let ids: Vec<String> = rare.get(f).map(|s| s.iter().cloned().collect()).unwrap_or_default();
                *total.get_mut(f).expect("fuzzer listed") += ids.len();
                (f.clone(), ids)
            })
            .collect();
        rows.push(RareBugRow {
            target: target.clone(),
            bugs,
        });
    }
    RareBugTable { rows, total }
}

/// p values below 0.01 are shown as `<0.01`; full precision stays in JSON.
pub fn format_p(p: f64) -> String {
    if p < 0.01 {
        "<0.01".to_string()
    } else {
        format!("{p:.3}")
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.digits$}"))
}

fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn yes(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Plain-table rendering of every section of the bundle.
pub fn render_text(b: &ReportBundle) -> String {
    let mut out = String::new();
    let mut section = |title: &str, body: String| {
        let _ = writeln!(out, "== {title} ==\n{body}");
    };

    section(
        "Unique bugs per repetition",
        table(
            &["target", "fuzzer", "mean", "median", "rsd%"],
            &b.unique_bugs
                .iter()
                .map(|r| {
                    vec![
                        r.target.clone(),
                        r.fuzzer.clone(),
                        format!("{:.2}", r.mean),
                        format!("{:.1}", r.median),
                        opt(r.rsd_percent, 2),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
    );
    section(
        &format!("Comparison against {}", b.provenance.baseline),
        table(
            &["target", "metric", "fuzzer", "p", "A12", "significant", "large effect"],
            &b.comparisons
                .iter()
                .map(|c| {
                    vec![
                        c.target.clone(),
                        c.metric.clone(),
                        c.result.challenger.clone(),
                        format_p(c.result.p_value),
                        format!("{:.2}", c.result.a12),
                        yes(c.result.significant),
                        yes(c.result.large_effect),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
    );
    let mut sev: Vec<Vec<String>> = b
        .severity
        .counts
        .iter()
        .map(|(f, n)| vec![f.clone(), n.to_string()])
        .collect();
    for (f, id) in &b.severity.missing_score {
        sev.push(vec![f.clone(), format!("{id}: no CVSS score")]);
    }
    section("High-severity CVEs (CVSS >= 7.0)", table(&["fuzzer", "count"], &sev));
    section(
        "Unique EXPLOITABLE bugs (mean per repetition)",
        table(
            &["target", "fuzzer", "mean"],
            &b.exploitable
                .iter()
                .map(|r| vec![r.target.clone(), r.fuzzer.clone(), format!("{:.2}", r.mean_unique_exploitable)])
                .collect::<Vec<_>>(),
        ),
    );
    let mut headers = vec!["target"];
    headers.extend(b.fuzzers.iter().map(String::as_str));
    let mut rare: Vec<Vec<String>> = b
        .rare_bugs
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.target.clone()];
            row.extend(b.fuzzers.iter().map(|f| r.bugs.get(f).map_or(0, Vec::len).to_string()));
            row
        })
        .collect();
    let mut total = vec!["Total".to_string()];
    total.extend(b.fuzzers.iter().map(|f| b.rare_bugs.total.get(f).copied().unwrap_or(0).to_string()));
    rare.push(total);
    section("Rare bugs", table(&headers, &rare));
    section(
        "Relative standard deviation",
        table(
            &["metric", "target", "fuzzer", "rsd%"],
            &b.rsd
                .iter()
                .map(|r| vec![r.metric.clone(), r.target.clone(), r.fuzzer.clone(), opt(r.rsd_percent, 2)])
                .collect::<Vec<_>>(),
        ),
    );
    section(
        "Bug timing",
        table(
            &["target", "bug", "fuzzer", "found", "mean TTE (s)"],
            &b.bug_timings
                .iter()
                .map(|t| {
                    vec![
                        t.target.clone(),
                        t.bug_id.clone(),
                        t.fuzzer.clone(),
                        format!("{}/{}", t.success_count, t.tte_s.len()),
                        opt(t.mean_tte_s, 1),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
    );
    let mut cov: Vec<Vec<String>> = b
        .coverage
        .iter()
        .map(|r| vec![r.target.clone(), r.fuzzer.clone(), format!("{:.2}", r.mean), opt(r.rsd_percent, 2)])
        .collect();
    for c in &b.coverage_correlation {
        cov.push(vec![
            c.target.clone(),
            format!("spearman (n={})", c.n),
            opt(c.r_s, 3),
            c.note.clone().unwrap_or_default(),
        ]);
    }
    section("Line coverage (%)", table(&["target", "fuzzer", "mean", "rsd%"], &cov));
    section(
        "Overhead",
        table(
            &["target", "fuzzer", "cpu%", "mem avg MB", "mem max MB", "read MB", "write MB"],
            &b.overhead
                .iter()
                .map(|r| {
                    vec![
                        r.target.clone(),
                        r.fuzzer.clone(),
                        format!("{:.1}", r.cpu_util_avg),
                        format!("{:.1}", r.mem_avg_mb),
                        format!("{:.1}", r.mem_max_mb),
                        format!("{:.2}", r.disk_read_mb),
                        format!("{:.2}", r.disk_write_mb),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
    );
    section(
        "Validation matrix",
        table(
            &["target", "both", "primary only", "supplement only", "neither", "note"],
            &b.validation
                .iter()
                .map(|(t, v)| match &v.matrix {
                    Some(m) => {
                        let mut row = vec![t.clone()];
                        use crate::triage::ValidationCell as C;
                        row.extend([C::Both, C::PrimaryOnly, C::SupplementOnly, C::Neither].iter().map(|&c| {
                            format!("{} ({:.1}%)", m.count(c), m.rate(c))
                        }));
                        row.push(String::new());
                        row
                    }
                    None => vec![
                        t.clone(),
                        "-".into(),
                        "-".into(),
                        "-".into(),
                        "-".into(),
                        v.error.clone().unwrap_or_default(),
                    ],
                })
                .collect::<Vec<_>>(),
        ),
    );
    let p = &b.provenance;
    let mut prov = format!("campaign: {}\nrng seed: {}\nbaseline: {}\n", p.campaign_id, p.rng_seed, p.baseline);
    for (t, d) in &p.seed_digests {
        let _ = writeln!(prov, "seed set {t}: {d}");
    }
    for (tool, v) in &p.tool_versions {
        let _ = writeln!(prov, "{tool}: {v}");
    }
    if !p.escalated_targets.is_empty() {
        let _ = writeln!(prov, "memory escalated: {}", p.escalated_targets.join(", "));
    }
    section("Provenance", prov);
    out
}

/// Cumulative curves as CSV: `target,fuzzer,t_s,mean_unique_bugs`.
pub fn curves_csv(b: &ReportBundle) -> String {
    let mut out = String::from("target,fuzzer,t_s,mean_unique_bugs\n");
    for c in &b.curves {
        for (t, v) in c.grid_s.iter().zip(&c.mean_unique_bugs) {
            let _ = writeln!(out, "{},{},{t},{v}", c.target, c.fuzzer);
        }
    }
    out
}

/// Writes `bundle.json`, `tables.txt` and `curves.csv` under
/// `<out>/report/`.
pub fn write_bundle(out: &Path, bundle: &ReportBundle) -> Result<PathBuf, PipelineError> {
    let dir = out.join(REPORT_DIR);
    crate::pipeline::write_json(&dir.join("bundle.json"), bundle)?;
    let io = |path: PathBuf| move |source| PipelineError::Io { path, source };
    std::fs::write(dir.join("tables.txt"), render_text(bundle)).map_err(io(dir.join("tables.txt")))?;
    std::fs::write(dir.join("curves.csv"), curves_csv(bundle)).map_err(io(dir.join("curves.csv")))?;
    Ok(dir)
}

pub fn load_bundle(out: &Path) -> Result<ReportBundle, PipelineError> {
    crate::pipeline::read_json(&out.join(REPORT_DIR).join("bundle.json"))
}
