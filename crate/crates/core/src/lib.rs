//! Fuzzer evaluation harness: campaign orchestration, crash triage, CVE
//! matching and comparison statistics.

pub mod cve;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod parsers;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod triage;
