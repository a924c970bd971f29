//! Campaign-level metrics: rareness, time-to-exposure, cumulative bug
//! curves, exploitability means and resource overhead.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::monitor::ResourceTrace;
use crate::parsers::{ExploitabilityCategory, ExploitabilityRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("time grid must be strictly increasing")]
    UnsortedGrid,
    #[error("resource trace has no samples")]
    EmptyTrace,
}

/// Bugs found by exactly one fuzzer, credited to that fuzzer.
pub fn rare_bugs<K, F>(incidence: &BTreeMap<K, BTreeSet<F>>) -> BTreeMap<F, BTreeSet<K>>
where
    K: Ord + Clone,
    F: Ord + Clone,
{
    let mut rare: BTreeMap<F, BTreeSet<K>> = BTreeMap::new();
    for (bug, fuzzers) in incidence {
        if fuzzers.len() == 1 {
            let only = fuzzers.iter().next().expect("len is 1").clone();
            rare.entry(only).or_default().insert(bug.clone());
        }
    }
    rare
}

/// One discovery of a bug within a trial, in seconds since trial start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BugEvent<K> {
    pub key: K,
    pub time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BugTiming<K> {
    pub key: K,
    /// Time to exposure per trial; `None` when the bug was not found.
    pub tte_s: Vec<Option<f64>>,
    pub success_count: usize,
}

impl<K> BugTiming<K> {
    pub fn success_rate(&self) -> f64 {
        if self.tte_s.is_empty() {
            0.0
        } else {
            self.success_count as f64 / self.tte_s.len() as f64
        }
    }

    /// Mean over successful trials only; censored trials are excluded.
    pub fn mean_tte_s(&self) -> Option<f64> {
        let found: Vec<f64> = self.tte_s.iter().flatten().copied().collect();
        (!found.is_empty()).then(|| found.iter().sum::<f64>() / found.len() as f64)
    }
}

pub fn bug_timings<K: PartialEq + Clone>(trials: &[Vec<BugEvent<K>>], bug: &K) -> BugTiming<K> {
    let tte_s: Vec<Option<f64>> = trials
        .iter()
        .map(|events| {
            events
                .iter()
                .filter(|e| &e.key == bug)
                .map(|e| e.time_s)
                .min_by(f64::total_cmp)
        })
        .collect();
    BugTiming {
        key: bug.clone(),
        success_count: tte_s.iter().flatten().count(),
        tte_s,
    }
}

/// Mean over trials of the number of distinct bugs first seen at or before
/// each grid time.
pub fn cumulative_curve<K: Ord>(
    trials: &[Vec<BugEvent<K>>],
    grid: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::UnsortedGrid);
    }
    if trials.is_empty() {
        return Ok(vec![0.0; grid.len()]);
    }
    let mut totals = vec![0.0; grid.len()];
    for events in trials {
        let mut first_seen: BTreeMap<&K, f64> = BTreeMap::new();
        for e in events {
            first_seen
                .entry(&e.key)
                .and_modify(|t| *t = t.min(e.time_s))
                .or_insert(e.time_s);
        }
        let mut times: Vec<f64> = first_seen.into_values().collect();
        times.sort_by(f64::total_cmp);
        for (slot, &t) in totals.iter_mut().zip(grid) {
            *slot += times.partition_point(|&x| x <= t) as f64;
        }
    }
    let reps = trials.len() as f64;
    Ok(totals.into_iter().map(|v| v / reps).collect())
}

/// Mean over repetitions of the number of distinct EXPLOITABLE hashes.
pub fn exploitable_summary<R>(reps: &[R]) -> f64
where
    R: AsRef<[ExploitabilityRecord]>,
{
    if reps.is_empty() {
        return 0.0;
    }
    let total: usize = reps
        .iter()
        .map(|records| {
            records
                .as_ref()
                .iter()
                .filter(|r| r.category == ExploitabilityCategory::Exploitable)
                .map(|r| r.hash.as_str())
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    total as f64 / reps.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadSummary {
    pub cpu_util_avg: f64,
    pub mem_avg_mb: f64,
    pub mem_max_mb: f64,
    pub disk_read_mb: f64,
    pub disk_write_mb: f64,
}

/// Time-weighted mean of a piecewise-linear signal through the samples.
fn time_weighted_mean(points: &[(f64, f64)]) -> f64 {
    let span = points.last().map_or(0.0, |p| p.0) - points.first().map_or(0.0, |p| p.0);
    if span <= 0.0 {
        return points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    }
    let area: f64 = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    area / span
}

pub fn overhead_summary(trace: &ResourceTrace) -> Result<OverheadSummary, MetricsError> {
    if trace.samples.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let cpu: Vec<(f64, f64)> = trace.samples.iter().map(|s| (s.t_s, s.cpu_percent)).collect();
    let mem: Vec<(f64, f64)> = trace.samples.iter().map(|s| (s.t_s, s.rss_mb)).collect();
    let mem_max_mb = trace
        .samples
        .iter()
        .map(|s| s.rss_mb)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(OverheadSummary {
        cpu_util_avg: time_weighted_mean(&cpu),
        mem_avg_mb: time_weighted_mean(&mem).min(mem_max_mb),
        mem_max_mb,
        disk_read_mb: trace.disk_read_mb,
        disk_write_mb: trace.disk_write_mb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::monitor::ResourceSample;

    fn ev(key: &'static str, t: f64) -> BugEvent<&'static str> {
        BugEvent { key, time_s: t }
    }

    #[test]
    fn rare_bug_assignment() {
        let mut incidence: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        incidence.insert("b1", ["q"].into());
        incidence.insert("b2", ["q", "afl"].into());
        incidence.insert("b3", ["afl"].into());
        let rare = rare_bugs(&incidence);
        assert_eq!(rare["q"], ["b1"].into());
        assert_eq!(rare["afl"], ["b3"].into());
        assert_eq!(rare.values().map(BTreeSet::len).sum::<usize>(), 2);
    }

    #[test]
    fn timing_with_censoring() {
        let trials = vec![vec![ev("b", 3600.0)], vec![ev("other", 5.0)]];
        let t = bug_timings(&trials, &"b");
        assert_eq!(t.tte_s, [Some(3600.0), None]);
        assert_eq!(t.success_count, 1);
        assert_eq!(t.success_rate(), 0.5);
        assert_eq!(t.mean_tte_s(), Some(3600.0));
        let none = bug_timings(&trials, &"absent");
        assert_eq!(none.success_count, 0);
        assert_eq!(none.tte_s, [None, None]);
        assert_eq!(none.mean_tte_s(), None);
    }

    #[test]
    fn timing_takes_earliest_event() {
        let trials = vec![vec![ev("b", 10.0), ev("b", 5.0)]];
        assert_eq!(bug_timings(&trials, &"b").tte_s, [Some(5.0)]);
    }

    #[test]
    fn curve_examples() {
        let trials = vec![vec![ev("a", 10.0), ev("b", 100.0)]];
        assert_eq!(cumulative_curve(&trials, &[50.0, 200.0]).unwrap(), [1.0, 2.0]);
        let empty: Vec<Vec<BugEvent<&str>>> = vec![vec![], vec![]];
        assert_eq!(cumulative_curve(&empty, &[1.0, 2.0]).unwrap(), [0.0, 0.0]);
        assert_eq!(
            cumulative_curve(&trials, &[2.0, 1.0]),
            Err(MetricsError::UnsortedGrid)
        );
    }

    #[test]
    fn curve_matches_recount() {
        let trials = vec![
            vec![ev("a", 10.0), ev("a", 5.0), ev("b", 30.0), ev("c", 70.0)],
            vec![ev("b", 20.0), ev("d", 50.0), ev("b", 1.0)],
        ];
        let grid = [0.0, 1.0, 5.0, 25.0, 50.0, 100.0];
        let curve = cumulative_curve(&trials, &grid).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let mut total = 0usize;
            for events in &trials {
                let mut keys: Vec<&str> = events.iter().filter(|e| e.time_s <= t).map(|e| e.key).collect();
                keys.sort();
                keys.dedup();
                total += keys.len();
            }
            assert_eq!(curve[i], total as f64 / 2.0);
        }
    }

    fn rec(hash: &str, cat: ExploitabilityCategory) -> ExploitabilityRecord {
        ExploitabilityRecord {
            category: cat,
            hash: hash.into(),
            description: String::new(),
        }
    }

    #[test]
    fn exploitable_means() {
        use ExploitabilityCategory::*;
        let one = vec![vec![rec("h1", Exploitable), rec("h2", Unknown)]];
        assert_eq!(exploitable_summary(&one), 1.0);
        let two = vec![
            vec![rec("h1", Exploitable), rec("h1", Exploitable)],
            vec![rec("h1", Exploitable), rec("h2", Exploitable), rec("h3", Exploitable)],
        ];
        assert_eq!(exploitable_summary(&two), 2.0);
        let none: Vec<Vec<ExploitabilityRecord>> = vec![];
        assert_eq!(exploitable_summary(&none), 0.0);
    }

    fn trace(samples: &[(f64, f64)]) -> ResourceTrace {
        ResourceTrace {
            samples: samples
                .iter()
                .map(|&(t, mb)| ResourceSample {
                    t_s: t,
                    cpu_percent: 100.0,
                    rss_mb: mb,
                })
                .collect(),
            disk_read_mb: 1.5,
            disk_write_mb: 2.5,
        }
    }

    #[test]
    fn overhead_examples() {
        let flat = overhead_summary(&trace(&[(0., 100.), (1., 100.), (2., 100.)])).unwrap();
        assert_eq!((flat.mem_avg_mb, flat.mem_max_mb), (100.0, 100.0));
        let two = overhead_summary(&trace(&[(0., 10.), (1., 30.)])).unwrap();
        assert_eq!((two.mem_avg_mb, two.mem_max_mb), (20.0, 30.0));
        assert_eq!(two.disk_write_mb, 2.5);
        let single = overhead_summary(&trace(&[(4., 42.)])).unwrap();
        assert_eq!(single.mem_avg_mb, 42.0);
        assert_eq!(
            overhead_summary(&trace(&[])),
            Err(MetricsError::EmptyTrace)
        );
    }

    #[test]
    fn sawtooth_matches_fine_grid_integration() {
        // Sawtooth 0..100 MB with period 10 s, sampled irregularly.
        let saw = |t: f64| 10.0 * (t % 10.0);
        let mut times = vec![0.0];
        let mut t: f64 = 0.0;
        let mut step = 0.7;
        while t < 60.0 {
            t = (t + step).min(60.0);
            times.push(t);
            step = if step > 1.2 { 0.5 } else { step + 0.13 };
        }
        let samples: Vec<(f64, f64)> = times.iter().map(|&t| (t, saw(t))).collect();
        let got = overhead_summary(&trace(&samples)).unwrap();

        // Oracle: integrate the linear interpolation on a fine uniform grid.
        let interp = |x: f64| {
            let i = samples.partition_point(|p| p.0 <= x).clamp(1, samples.len() - 1);
            let (a, b) = (samples[i - 1], samples[i]);
            a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
        };
        let steps = 600_000;
        let h = 60.0 / steps as f64;
        let mut area = 0.0;
        for k in 0..steps {
            area += h * (interp(k as f64 * h) + interp((k + 1) as f64 * h)) / 2.0;
        }
        assert!((got.mem_avg_mb - area / 60.0).abs() < 1e-3);
        let brute_max = samples.iter().map(|s| s.1).fold(0.0, f64::max);
        assert_eq!(got.mem_max_mb, brute_max);
    }
}
