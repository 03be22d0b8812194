//! Quick invariant suite over a shortened run of a config.

use super::{build_workload, run_on_workload, ExperimentConfig, Phase, RunOptions};
use crate::simenv::ActionChoice;
use crate::Result;

/// Slots per phase used by the check run.
const CHECK_ROUNDS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

/// Runs `cfg` (validated first, phases capped at a few hundred slots) twice
/// and checks the reporting and environment invariants on the result.
pub fn run_checks(cfg: &ExperimentConfig) -> Result<Vec<CheckOutcome>> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.workload.train_rounds = cfg.workload.train_rounds.min(CHECK_ROUNDS);
    cfg.workload.test_rounds = cfg.workload.test_rounds.min(CHECK_ROUNDS);
    let workload = build_workload(&cfg)?;
    let opts = RunOptions {
        keep_transitions: true,
    };
    let (report, art) = run_on_workload(&cfg, &workload, opts)?;
    let (again, _) = run_on_workload(&cfg, &workload, opts)?;
    let mut out = Vec::new();

    let servers = cfg.system.servers;
    let slot_shape = workload
        .train
        .iter()
        .chain(&workload.test)
        .all(|s| s.len() == servers && s.iter().enumerate().all(|(n, r)| r.server == n));
    out.push(CheckOutcome::new(
        "one request per server per slot",
        slot_shape,
        format!("{} slots", workload.train.len() + workload.test.len()),
    ));

    let ts = &art.transitions;
    let bad_q = ts.iter().filter(|(_, t)| !(t.satisfaction < 0.0)).count();
    out.push(CheckOutcome::new(
        "satisfaction strictly negative",
        bad_q == 0,
        format!("{bad_q} violations in {} transitions", ts.len()),
    ));
    let bad_d = ts.iter().filter(|(_, t)| !(t.delay > 0.0)).count();
    out.push(CheckOutcome::new(
        "delay strictly positive",
        bad_d == 0,
        format!("{bad_d} violations"),
    ));
    let bad_p = ts
        .iter()
        .filter(|(_, t)| !(t.action_prob > 0.0 && t.action_prob <= 1.0))
        .count();
    out.push(CheckOutcome::new(
        "action probabilities in (0, 1]",
        bad_p == 0,
        format!("{bad_p} violations"),
    ));
    out.push(CheckOutcome::new(
        "cache values negative",
        art.max_cache_value.is_none_or(|v| v < 0.0),
        format!("max {:?}", art.max_cache_value),
    ));

    let freq_ok = report
        .windows
        .iter()
        .all(|w| (0.0..=1.0).contains(&w.llm_direct_freq));
    out.push(CheckOutcome::new(
        "direct-LLM frequency in [0, 1]",
        freq_ok,
        format!("{} windows", report.windows.len()),
    ));

    let mut worst = 0.0f64;
    let mut sizes_ok = true;
    for phase in [Phase::Train, Phase::Test] {
        let phase_ts: Vec<_> = ts
            .iter()
            .filter(|(p, _)| *p == phase)
            .map(|(_, t)| t)
            .collect();
        let windows: Vec<_> = report.windows_of(phase).collect();
        let chunks: Vec<_> = phase_ts.chunks(super::WINDOW_SIZE).collect();
        sizes_ok &= chunks.len() == windows.len();
        for (w, chunk) in windows.iter().zip(&chunks) {
            let n = chunk.len() as f64;
            let reward = chunk.iter().map(|t| t.reward).sum::<f64>() / n;
            let q = chunk.iter().map(|t| t.satisfaction).sum::<f64>() / n;
            let d = chunk.iter().map(|t| t.delay).sum::<f64>() / n;
            let direct = chunk
                .iter()
                .filter(|t| t.action == ActionChoice::Cloud)
                .count() as f64
                / n;
            for (a, b) in [
                (w.mean_reward, reward),
                (w.mean_satisfaction, q),
                (w.mean_delay, d),
                (w.llm_direct_freq, direct),
            ] {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    out.push(CheckOutcome::new(
        "window means match the transition log",
        sizes_ok && worst <= 1e-12,
        format!("max relative error {worst:.3e}"),
    ));
    out.push(CheckOutcome::new(
        "run is deterministic",
        report == again,
        String::new(),
    ));
    Ok(out)
}
