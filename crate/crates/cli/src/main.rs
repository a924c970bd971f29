use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use fuzzeval_core::cve::{load_cve_db, CveError};
use fuzzeval_core::model::{AliasTable, CrashId};
use fuzzeval_core::orchestrator::campaign::CampaignLock;
use fuzzeval_core::orchestrator::executor::reexecute;
use fuzzeval_core::orchestrator::{run_campaign, CampaignConfig, OrchestratorError};
use fuzzeval_core::pipeline::{confirm_candidate, match_campaign, triage_campaign, PipelineError};
use fuzzeval_core::report::{build_bundle, load_bundle, render_text, write_bundle};
use fuzzeval_core::triage::cross_validate;

#[derive(Parser)]
#[command(name = "fuzzeval", version, about = "Run and evaluate fuzzing campaigns")]
struct Cli {
    /// Campaign configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Campaign output directory.
    #[arg(long, global = true, default_value = "fuzzeval-out")]
    out: PathBuf,
    /// Concurrent trials; overrides the config.
    #[arg(long, global = true, env = "FUZZEVAL_JOBS")]
    jobs: Option<usize>,
    /// Campaign rng seed; overrides the config.
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run or resume the campaign described by --config.
    Run {
        /// Container runtime executable (e.g. docker); bare processes otherwise.
        #[arg(long, env = "FUZZEVAL_CONTAINER_RUNTIME")]
        container_runtime: Option<PathBuf>,
    },
    /// Deduplicate crashes into bugs and build the validation matrix.
    Triage {
        /// Vulnerability-type alias table; the built-in table by default.
        #[arg(long)]
        aliases: Option<PathBuf>,
    },
    /// Rank CVE candidates for every bug, or record a manual confirmation.
    MatchCve {
        /// CVE keyword database (JSON).
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        aliases: Option<PathBuf>,
        /// Confirm one candidate: BUG_ID CVE_ID.
        #[arg(long, num_args = 2, value_names = ["BUG_ID", "CVE_ID"])]
        confirm: Option<Vec<String>>,
        #[arg(long, value_enum, requires = "confirm")]
        verdict: Option<Verdict>,
        #[arg(long, default_value = "", requires = "confirm")]
        note: String,
    },
    /// Compute every metric and comparison against a baseline fuzzer.
    Stats {
        #[arg(long)]
        baseline: String,
    },
    /// Print the stored report without recomputing it.
    Report {
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Re-execute one input against several builds of a target.
    ValidateCrash {
        input: PathBuf,
        /// LABEL=PATH of a build; give at least two.
        #[arg(long = "binary", required = true, value_parser = parse_binary)]
        binaries: Vec<(String, PathBuf)>,
        /// Target arguments; `@@` is replaced by the input path, stdin otherwise.
        #[arg(long = "arg", allow_hyphen_values = true)]
        args: Vec<String>,
        #[arg(long, default_value_t = 10.0)]
        timeout_s: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Verdict {
    Accept,
    Reject,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn parse_binary(s: &str) -> Result<(String, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or("expected LABEL=PATH")?;
    if label.is_empty() || path.is_empty() {
        return Err("expected LABEL=PATH".into());
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

/// A failure with its exit status: 1 for usage or configuration problems,
/// 2 when execution itself failed.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, error: error.into() }
}

fn execution(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn orchestrator(e: OrchestratorError) -> Failure {
    match e {
        OrchestratorError::Io { .. } | OrchestratorError::LaunchFailure { .. } => execution(e),
        _ => usage(e),
    }
}

fn pipeline(e: PipelineError) -> Failure {
    match e {
        PipelineError::Orchestrator(e) => orchestrator(e),
        PipelineError::Io { .. } | PipelineError::Format { .. } => execution(e),
        PipelineError::Cve(CveError::Io(_)) => execution(e),
        _ => usage(e),
    }
}

fn aliases(path: Option<&Path>) -> Result<AliasTable, Failure> {
    match path {
        None => Ok(AliasTable::builtin().clone()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))
                .map_err(usage)?;
            AliasTable::parse(&text)
                .with_context(|| format!("alias table {}", p.display()))
                .map_err(usage)
        }
    }
}

fn lock(out: &Path) -> Result<CampaignLock, Failure> {
    CampaignLock::acquire(out).map_err(orchestrator)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = cli.out.as_path();
    match cli.command {
        Command::Run { container_runtime } => {
            let path = cli
                .config
                .as_deref()
                .ok_or_else(|| usage(anyhow!("run needs --config")))?;
            let mut config = CampaignConfig::load(path).map_err(orchestrator)?;
            if let Some(seed) = cli.rng_seed {
                config.rng_seed = seed;
            }
            if let Some(jobs) = cli.jobs {
                config.parallelism = jobs.max(1);
            }
            if container_runtime.is_some() {
                config.container_runtime = container_runtime;
            }
            let _lock = lock(out)?;
            let summary = run_campaign(&config, out).map_err(orchestrator)?;
            if summary.already_complete {
                println!(
                    "campaign {} in {} is already complete; nothing to do",
                    summary.campaign_id,
                    out.display()
                );
            } else {
                println!(
                    "campaign {}: {} trials ({} executed, {} resumed)",
                    summary.campaign_id, summary.trials, summary.executed, summary.resumed
                );
            }
            if !summary.escalated_targets.is_empty() {
                println!("memory limit escalated for: {}", summary.escalated_targets.join(", "));
            }
        }
        Command::Triage { aliases: alias_path } => {
            let table = aliases(alias_path.as_deref())?;
            let _lock = lock(out)?;
            let art = triage_campaign(out, &table).map_err(pipeline)?;
            for w in &art.summary.parse_warnings {
                log::warn!("{w}");
            }
            println!("{} unique bugs, {} quarantined crashes", art.bugs.len(), art.quarantine.len());
            for b in &art.bugs {
                println!(
                    "{}  {}  [{}]  via {}  {} crashes",
                    b.bug_id,
                    b.vuln_type,
                    b.triple.join(" > "),
                    b.detecting_tool.as_str(),
                    b.crash_count
                );
            }
            let errors = art.matrix_errors();
            if !errors.is_empty() {
                for (target, e) in &errors {
                    eprintln!("validation matrix for {target}: {e}");
                }
                return Err(execution(anyhow!("validation matrix incomplete for {} target(s)", errors.len())));
            }
        }
        Command::MatchCve { db, aliases: alias_path, confirm, verdict, note } => {
            let db = load_cve_db(&db)
                .with_context(|| format!("CVE database {}", db.display()))
                .map_err(usage)?;
            let _lock = lock(out)?;
            if let Some(pair) = confirm {
                let verdict = verdict.ok_or_else(|| usage(anyhow!("--confirm needs --verdict")))?;
                let row = confirm_candidate(out, &db, &pair[0], &pair[1], matches!(verdict, Verdict::Accept), &note)
                    .map_err(pipeline)?;
                println!(
                    "{} {} for {}",
                    if row.accepted() { "accepted" } else { "rejected" },
                    row.candidate.cve_id,
                    row.bug_id
                );
            } else {
                let table = aliases(alias_path.as_deref())?;
                let rows = match_campaign(out, &db, &table).map_err(pipeline)?;
                for r in &rows {
                    let ranked: Vec<String> = r
                        .candidates
                        .iter()
                        .map(|c| format!("{} ({})", c.cve_id, c.score))
                        .collect();
                    println!(
                        "{}  {}",
                        r.bug_id,
                        if ranked.is_empty() { "-".to_string() } else { ranked.join(", ") }
                    );
                }
            }
        }
        Command::Stats { baseline } => {
            let _lock = lock(out)?;
            let bundle = build_bundle(out, &baseline).map_err(pipeline)?;
            let dir = write_bundle(out, &bundle).map_err(pipeline)?;
            print!("{}", render_text(&bundle));
            log::info!("report written to {}", dir.display());
        }
        Command::Report { format } => {
            let bundle = load_bundle(out).map_err(pipeline)?;
            match format {
                Format::Text => print!("{}", render_text(&bundle)),
                Format::Json => {
                    let path = out.join(fuzzeval_core::report::REPORT_DIR).join("bundle.json");
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("cannot read {}", path.display()))
                        .map_err(execution)?;
                    print!("{text}");
                }
            }
        }
        Command::ValidateCrash { input, binaries, args, timeout_s } => {
            if binaries.len() < 2 {
                return Err(usage(anyhow!("give at least two --binary builds")));
            }
            if !input.is_file() {
                return Err(usage(anyhow!("no such input {}", input.display())));
            }
            let outcomes = reexecute(&input, &binaries, &args, Duration::from_secs_f64(timeout_s))
                .context("re-execution failed")
                .map_err(execution)?;
            let record = cross_validate(&CrashId::new(input.display().to_string()), outcomes).map_err(usage)?;
            for (label, crashed) in &record.outcomes {
                println!("{label}: {}", if *crashed { "crash" } else { "no crash" });
            }
            println!("validated: {}", record.validated);
            println!("instrumentation sensitive: {}", record.instrumentation_sensitive);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
