use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use fuzzeval_core::cve::{confirm_match, match_cves, AuditLog, CveEntry};
use fuzzeval_core::metrics::{cumulative_curve, rare_bugs, BugEvent};
use fuzzeval_core::model::{canonicalize_vuln_type, AliasTable, CrashSample, StackFrame, TriageConfig, VulnKind};
use fuzzeval_core::orchestrator::{run_campaign, CampaignConfig};
use fuzzeval_core::orchestrator::campaign::load_trials;
use fuzzeval_core::parsers::{parse_sanitizer_report, DebuggerReport, SanitizerReport};
use fuzzeval_core::stats::{a12, mann_whitney_u, spearman, summary};
use fuzzeval_core::triage::{build_validation_matrix, triage_crashes, ValidationCell};

const CANONICAL: [&str; 12] = [
    "heap-buffer-overflow",
    "stack-buffer-overflow",
    "global-buffer-overflow",
    "stack-overflow",
    "segv",
    "excessive-memory-allocation",
    "memory-leak",
    "free-error",
    "float-point-exception",
    "alloc-dealloc-mismatch",
    "memcpy-param-overlap",
    "use-after-free",
];

fn frames(names: &[String]) -> Vec<StackFrame> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| StackFrame {
            index: i as u32,
            function_name: n.clone(),
            source_file: Some(format!("{n}.c")),
            line: Some(10 + i as u32),
        })
        .collect()
}

/// A crash whose sanitizer and debugger outcomes are drawn independently.
fn crash_strategy() -> impl Strategy<Value = (Option<(Vec<String>, usize)>, Option<Vec<String>>)> {
    let stack = prop::collection::vec(prop::sample::select(vec!["f", "g", "h", "main", "__interceptor_memcpy"]), 1..5)
        .prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>());
    (
        prop::option::of((stack.clone(), 0..CANONICAL.len())),
        prop::option::of(stack),
    )
}

fn build_crash(i: usize, spec: &(Option<(Vec<String>, usize)>, Option<Vec<String>>)) -> CrashSample {
    let asan = match &spec.0 {
        Some((stack, kind)) => SanitizerReport {
            vuln_raw: CANONICAL[*kind].to_string(),
            frames: frames(stack),
            summary_line: String::new(),
            crashed: true,
        },
        None => SanitizerReport::no_crash(),
    };
    let gdb = match &spec.1 {
        Some(stack) => DebuggerReport {
            signal: "SIGSEGV".into(),
            frames: frames(stack),
            crashed: true,
        },
        None => DebuggerReport::no_crash(),
    };
    CrashSample::new(format!("c{i:03}"), format!("in/{i}"))
        .with_report("asan", asan)
        .with_report("gdb", gdb)
}

fn entry_strategy() -> impl Strategy<Value = CveEntry> {
    let words = prop::sample::subsequence(vec!["f", "g", "h", "parse", "read", "decode"], 0..4);
    let files = prop::sample::subsequence(vec!["a.c", "src/b.c", "lib/c.c"], 0..2);
    (0u32..30, 0..CANONICAL.len(), words, files).prop_map(|(id, kind, w, f)| CveEntry {
        cve_id: format!("CVE-2020-{:04}", 1000 + id),
        vuln_type: VulnKind::from(CANONICAL[kind].to_string()),
        vulnerable_functions: w.into_iter().map(String::from).collect(),
        vulnerable_files: f.into_iter().map(String::from).collect(),
        stack_trace: None,
        trace_tool: None,
        cvss_score: None,
    })
}

fn unique_entries(v: Vec<CveEntry>) -> Vec<CveEntry> {
    let mut seen = BTreeSet::new();
    v.into_iter().filter(|e| seen.insert(e.cve_id.clone())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn canonicalization_is_idempotent(k in 0..CANONICAL.len()) {
        let once = canonicalize_vuln_type(CANONICAL[k]);
        let twice = canonicalize_vuln_type(once.kind.canonical_name());
        prop_assert_eq!(once.kind.canonical_name(), CANONICAL[k]);
        prop_assert_eq!(twice.kind, once.kind);
    }

    #[test]
    fn sanitizer_crash_always_has_frames(
        parts in prop::collection::vec(prop::sample::select(vec![
            "==1==ERROR: AddressSanitizer: heap-buffer-overflow on address 0x1\n",
            "    #0 0x1 in f /a.c:1\n",
            "    #1 0x2 in main /a.c:9\n",
            "    #2 0x3 (/lib/libc.so.6+0x29d90)\n",
            "SUMMARY: AddressSanitizer: SEGV /a.c:1 in f\n",
            "garbage\n",
            "\n",
        ]), 0..12)
    ) {
        let text: String = parts.concat();
        if let Ok(r) = parse_sanitizer_report(&text) {
            prop_assert!(!r.crashed || !r.frames.is_empty());
            prop_assert_eq!(parse_sanitizer_report(&text).ok(), Some(r));
        }
    }

    #[test]
    fn triage_partitions_and_prefers_primary(specs in prop::collection::vec(crash_strategy(), 0..40)) {
        let crashes: Vec<CrashSample> = specs.iter().enumerate().map(|(i, s)| build_crash(i, s)).collect();
        let config = TriageConfig::default();
        let out = triage_crashes(&crashes, &config, AliasTable::builtin());

        let mut members = BTreeSet::new();
        for bug in &out.bugs {
            for c in &bug.member_crashes {
                prop_assert!(members.insert(c.clone()), "crash in two bugs");
            }
        }
        let validated: BTreeSet<_> = out.assignments.keys().cloned().collect();
        prop_assert_eq!(&members, &validated);
        prop_assert_eq!(validated.len() + out.quarantine.len(), crashes.len());

        for (crash, spec) in crashes.iter().zip(&specs) {
            if let Some((_, tool)) = out.assignments.get(&crash.id) {
                if spec.0.is_some() {
                    prop_assert_eq!(tool.as_str(), "asan");
                }
            }
        }

        let mut reversed = crashes.clone();
        reversed.reverse();
        let again = triage_crashes(&reversed, &config, AliasTable::builtin());
        let keys = |o: &fuzzeval_core::triage::TriageOutcome| o.bugs.iter().map(|b| b.key.clone()).collect::<BTreeSet<_>>();
        prop_assert_eq!(keys(&out), keys(&again));
        prop_assert_eq!(out.assignments, again.assignments);
    }

    #[test]
    fn validation_cells_partition(specs in prop::collection::vec(crash_strategy(), 1..60)) {
        let crashes: Vec<CrashSample> = specs.iter().enumerate().map(|(i, s)| build_crash(i, s)).collect();
        let m = build_validation_matrix(&crashes, &"asan".into(), &"gdb".into()).unwrap();
        let counted: u64 = ValidationCell::ALL.iter().map(|&c| m.count(c)).sum();
        prop_assert_eq!(counted, crashes.len() as u64);
        let expect_both = specs.iter().filter(|s| s.0.is_some() && s.1.is_some()).count() as u64;
        prop_assert_eq!(m.count(ValidationCell::Both), expect_both);
        let rates: f64 = ValidationCell::ALL.iter().map(|&c| m.rate(c)).sum();
        prop_assert!((rates - 100.0).abs() <= 0.1);
    }

    #[test]
    fn cve_ranking_is_a_total_order(
        entries in prop::collection::vec(entry_strategy(), 0..12).prop_map(unique_entries),
        keywords in prop::sample::subsequence(vec!["f", "g", "parse", "decode", "a.c", "b.c", "segv", "heap-buffer-overflow"], 0..8),
        seed in any::<u64>(),
    ) {
        let keywords: BTreeSet<String> = keywords.into_iter().map(String::from).collect();
        let ranked = match_cves(&keywords, &entries);
        for w in ranked.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].cve_id < w[1].cve_id));
        }
        // Brute-force intersection oracle.
        for c in &ranked {
            let e = entries.iter().find(|e| e.cve_id == c.cve_id).unwrap();
            let mut pool: BTreeSet<String> = e.vulnerable_functions.clone();
            pool.insert(e.vuln_type.canonical_name().to_string());
            pool.extend(e.vulnerable_files.iter().map(|f| f.rsplit('/').next().unwrap().to_string()));
            let inter: BTreeSet<String> = pool.intersection(&keywords).cloned().collect();
            prop_assert_eq!(c.score, inter.len());
            prop_assert_eq!(&c.matched_keywords, &inter);
        }
        let mut shuffled = entries.clone();
        let n = shuffled.len();
        if n > 1 {
            shuffled.rotate_left((seed as usize) % n);
        }
        prop_assert_eq!(match_cves(&keywords, &shuffled), ranked.clone());

        if let Some(first) = ranked.first() {
            let mut audit = AuditLog::new(std::io::sink());
            let confirmed = confirm_match(first, seed % 2 == 0, "checked", &mut audit).unwrap();
            prop_assert_eq!(confirmed.score, first.score);
            prop_assert_eq!(&confirmed.matched_keywords, &first.matched_keywords);
            prop_assert!(confirm_match(&confirmed, true, "again", &mut audit).is_err());
        }
    }
}

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..40).prop_map(f64::from), 1..25)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn a12_complement(a in sample(), b in sample()) {
        prop_assert!((a12(&a, &b).unwrap() + a12(&b, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn a12_monotone_invariance(a in sample(), b in sample()) {
        let f = |v: &[f64]| v.iter().map(|x| (x * 0.3).exp() - 7.0).collect::<Vec<_>>();
        prop_assert_eq!(a12(&a, &b).unwrap(), a12(&f(&a), &f(&b)).unwrap());
    }

    #[test]
    fn mann_whitney_symmetric(a in sample(), b in sample()) {
        let p = mann_whitney_u(&a, &b).unwrap().p_value;
        let q = mann_whitney_u(&b, &a).unwrap().p_value;
        prop_assert!((p - q).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn curve_nondecreasing_to_mean(
        reps in prop::collection::vec(prop::collection::vec((0u8..8, 0.0f64..60.0), 0..15), 1..10)
    ) {
        let trials: Vec<Vec<BugEvent<u8>>> = reps
            .iter()
            .map(|r| r.iter().map(|&(key, time_s)| BugEvent { key, time_s }).collect())
            .collect();
        let grid: Vec<f64> = (0..=12).map(|k| k as f64 * 5.0).collect();
        let curve = cumulative_curve(&trials, &grid).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        let mean = trials
            .iter()
            .map(|t| t.iter().map(|e| e.key).collect::<BTreeSet<_>>().len() as f64)
            .sum::<f64>() / trials.len() as f64;
        prop_assert!((curve[curve.len() - 1] - mean).abs() < 1e-9);
    }

    #[test]
    fn spearman_rank_invariance(x in prop::collection::vec(-100.0f64..100.0, 3..30), y in prop::collection::vec(-100.0f64..100.0, 3..30)) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        prop_assert!((spearman(x, x).unwrap().r_s - 1.0).abs() < 1e-12);
        let r = spearman(x, y).unwrap().r_s;
        let fx: Vec<f64> = x.iter().map(|v| v.powi(3)).collect();
        let gy: Vec<f64> = y.iter().map(|v| v.exp().ln_1p()).collect();
        prop_assert!((spearman(&fx, &gy).unwrap().r_s - r).abs() < 1e-9);
    }

    #[test]
    fn rsd_scale_invariant(v in prop::collection::vec(0.5f64..500.0, 2..30), c in 0.001f64..1000.0) {
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let (a, b) = (summary(&v).unwrap().rsd_percent.unwrap(), summary(&scaled).unwrap().rsd_percent.unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn rare_bug_sets_disjoint(inc in prop::collection::btree_map(0u16..50, prop::collection::btree_set(0u8..6, 1..6), 0..40)) {
        let rare = rare_bugs(&inc);
        let mut seen = BTreeSet::new();
        for (fuzzer, bugs) in &rare {
            for b in bugs {
                prop_assert!(seen.insert(*b));
                prop_assert_eq!(inc[b].iter().collect::<Vec<_>>(), vec![fuzzer]);
            }
        }
    }
}

fn mock_campaign(seed: u64, fuzzers: usize, reps: u32, rss: &[u32]) -> CampaignConfig {
    let mut text = format!(
        "rng_seed = {seed}\nduration_s = 30\nrepetitions = {reps}\nmem_limit_mb = 200\nmem_escalation_mb = 400\n\
         fuzzers = [{}]\ntargets = [\"t0\", \"t1\"]\n",
        (0..fuzzers).map(|i| format!("\"f{i}\"")).collect::<Vec<_>>().join(",")
    );
    for i in 0..fuzzers {
        text += &format!(
            "[adapters.f{i}]\nkind = \"mock\"\nskill = {}\ncrash_rate_per_hour = 200\nrss_mb = {}\n",
            1 + i,
            rss[i % rss.len()]
        );
    }
    for t in 0..2 {
        text += &format!(
            "[target.t{t}]\nkind = \"mock\"\n[[target.t{t}.bugs]]\nid = \"x\"\nframes = [\"fx{t}\"]\nvuln = \"segv\"\nhazard_per_hour = 400\n"
        );
    }
    CampaignConfig::parse(&text).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn campaign_envelopes_seeds_and_times(
        // TOML integers are signed 64-bit.
        seed in 0..i64::MAX as u64,
        fuzzers in 1usize..4,
        reps in 1u32..4,
        rss in prop::collection::vec(prop::sample::select(vec![100u32, 150, 300]), 1..3),
    ) {
        let config = mock_campaign(seed, fuzzers, reps, &rss);
        let dir = tempfile::tempdir().unwrap();
        run_campaign(&config, dir.path()).unwrap();
        let (_, trials) = load_trials(dir.path()).unwrap();
        prop_assert_eq!(trials.len(), fuzzers * 2 * reps as usize);

        let mut envelopes: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
        let mut digests: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (_, r) in &trials {
            envelopes.entry(&r.target).or_default().insert(format!("{:?}", r.envelope));
            digests.entry(&r.target).or_default().insert(&r.seed_digest);
            for c in &r.crashes {
                prop_assert!((0.0..=r.duration_s).contains(&c.discovery_time_s));
            }
        }
        for (target, set) in envelopes {
            prop_assert_eq!(set.len(), 1, "target {} has differing envelopes", target);
        }
        for set in digests.values() {
            prop_assert_eq!(set.len(), 1);
        }
    }
}
