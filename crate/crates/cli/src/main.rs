use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use llmsched_core::baselines::PolicyKind;
use llmsched_core::harness::{
    build_workload, emit_report, run_checks, run_on_workload, write_report, EvalMode,
    ExperimentConfig, ReportFormat, RunOptions,
};
use llmsched_core::marl::write_training_log;
use llmsched_core::nn::write_checkpoint;
use llmsched_core::simenv::write_transition_log;
use llmsched_core::Error;

/// Config file picked up when `--config` is not given.
const DEFAULT_CONFIG: &str = "llmsched.toml";

/// Simulate cloud-edge LLM request scheduling and report windowed QoS metrics.
#[derive(Parser, Debug)]
#[command(name = "llmsched", version)]
struct Args {
    /// Experiment config (TOML). Defaults to ./llmsched.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the policy: greedy-<t>, greedy-llm, random, mappo, g-mappo,
    /// t-mappo or lrs.
    #[arg(long)]
    policy: Option<String>,
    /// Override the test-phase mode: nearest or broadcast.
    #[arg(long)]
    mode: Option<String>,
    /// Report path. Without it the report goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: csv or json-lines. Defaults from the --out extension.
    #[arg(long)]
    format: Option<String>,
    /// Write the generated request stream here. Without --out, exits after
    /// exporting.
    #[arg(long, value_name = "PATH")]
    export_workload: Option<PathBuf>,
    /// Run the invariant suite on a shortened run instead of the experiment.
    #[arg(long)]
    check: bool,
    /// Write every completed transition as JSON lines.
    #[arg(long, value_name = "PATH")]
    transitions: Option<PathBuf>,
    /// Write the per-update training log (learned policies).
    #[arg(long, value_name = "PATH")]
    train_log: Option<PathBuf>,
    /// Write the trained policy parameters (learned policies).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn resolve_config(args: &Args) -> llmsched_core::Result<ExperimentConfig> {
    let path = match &args.config {
        Some(p) => p.clone(),
        None if Path::new(DEFAULT_CONFIG).exists() => PathBuf::from(DEFAULT_CONFIG),
        None => {
            return Err(Error::config(format!(
                "no --config given and no ./{DEFAULT_CONFIG} found"
            )))
        }
    };
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(policy) = &args.policy {
        cfg.policy = policy.parse::<PolicyKind>()?;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse::<EvalMode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `report.csv` → `report.config.toml`.
fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or_else(|| "report".into(), |s| s.to_string_lossy());
    out.with_file_name(format!("{stem}.config.toml"))
}

fn run(args: Args) -> llmsched_core::Result<ExitCode> {
    let cfg = resolve_config(&args)?;
    let format = match (&args.format, &args.out) {
        (Some(f), _) => f.parse::<ReportFormat>()?,
        (None, Some(out)) => ReportFormat::from_path(out),
        (None, None) => ReportFormat::Csv,
    };

    if args.check {
        let outcomes = run_checks(&cfg)?;
        let mut stdout = io::stdout().lock();
        let mut all = true;
        for o in &outcomes {
            all &= o.passed;
            let status = if o.passed { "ok  " } else { "FAIL" };
            writeln!(stdout, "{status} {} {}", o.name, o.detail)?;
        }
        return Ok(if all {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(1)
        });
    }

    let workload = build_workload(&cfg)?;
    if let Some(path) = &args.export_workload {
        workload.export(path)?;
        log::info!("wrote workload to {}", path.display());
        if args.out.is_none() {
            return Ok(ExitCode::SUCCESS);
        }
    }

    let opts = RunOptions {
        keep_transitions: args.transitions.is_some(),
    };
    let (report, artifacts) = run_on_workload(&cfg, &workload, opts)?;

    match &args.out {
        Some(out) => {
            emit_report(&report, out, format)?;
            if format == ReportFormat::Csv {
                std::fs::write(sidecar_path(out), cfg.to_toml_string()?)?;
            }
        }
        None => write_report(&report, io::stdout().lock(), format)?,
    }
    if let Some(path) = &args.transitions {
        write_transition_log(path, artifacts.transitions.iter().map(|(_, t)| t))?;
    }
    if let Some(path) = &args.train_log {
        if cfg.policy.is_learned() {
            write_training_log(&artifacts.training_log, path)?;
        } else {
            log::warn!(
                "{} is not a learned policy; no training log written",
                cfg.policy
            );
        }
    }
    if let Some(path) = &args.checkpoint {
        match &artifacts.policy_params {
            Some(params) => write_checkpoint(params, path)?,
            None => log::warn!("{} has no parameters; no checkpoint written", cfg.policy),
        }
    }
    eprintln!(
        "{} seed {}: test mean reward {:.4}, satisfaction {:.4}, delay {:.4}, direct-LLM {:.3}",
        cfg.policy,
        cfg.seed,
        report.test.mean_reward,
        report.test.mean_satisfaction,
        report.test.mean_delay,
        report.test.llm_direct_freq
    );
    Ok(ExitCode::SUCCESS)
}
