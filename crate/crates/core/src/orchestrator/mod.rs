//! Campaign planning and execution.

use std::path::PathBuf;

use thiserror::Error;

pub mod campaign;
pub mod config;
pub mod coverage;
pub mod executor;
pub mod mock;
pub mod monitor;
pub mod seeds;

pub use campaign::{
    plan_campaign, run_campaign, run_trial, CampaignSummary, CrashEntry, ExitStatus, TrialPlan,
    TrialRecord,
};
pub use config::{AdapterDescriptor, CampaignConfig, MockAdapter, MockBug, TargetDescriptor};
pub use coverage::{compute_line_coverage, CoverageReport, LineCoverageSource};
pub use executor::ResourceEnvelope;
pub use mock::{mock_fuzz, MockEvent, MockFuzzerProfile};
pub use monitor::{monitor_resources, ResourceSample, ResourceTrace};
pub use seeds::{select_seeds, SeedSet};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no usable seeds in {0}")]
    EmptyCorpus(PathBuf),
    #[error("no adapter registered for fuzzer `{0}`")]
    UnknownFuzzer(String),
    #[error("no definition for target `{0}`")]
    UnknownTarget(String),
    #[error("failed to launch {program}: {reason}")]
    LaunchFailure { program: String, reason: String },
}

impl OrchestratorError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> OrchestratorError {
        let path = path.into();
        move |source| OrchestratorError::Io { path, source }
    }
}
