//! Mean test reward per policy across seeds.
//!
//! Usage: `compare [config.toml] [seeds] [train_rounds] [test_rounds] [policy...]`
//! Pass `-` as the config to use the defaults.

use std::time::Instant;

use llmsched_core::baselines::PolicyKind;
use llmsched_core::harness::{run_experiment, ExperimentConfig};

fn main() -> llmsched_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let base = match args.first().map(String::as_str) {
        None | Some("-") => ExperimentConfig::default(),
        Some(path) => ExperimentConfig::load(path)?,
    };
    let num = |i: usize| {
        args.get(i)
            .map(|s| s.parse::<usize>().expect("numeric argument"))
    };
    let seeds = num(1).unwrap_or(5) as u64;
    let train = num(2).unwrap_or(1350);
    let test = num(3).unwrap_or(450);
    let policies: Vec<PolicyKind> = if args.len() > 4 {
        args[4..]
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()?
    } else {
        vec![
            PolicyKind::Random,
            PolicyKind::Greedy(0.3),
            PolicyKind::GreedyLlm,
            PolicyKind::Lrs,
        ]
    };
    for policy in policies {
        let start = Instant::now();
        let mut rewards = Vec::new();
        for seed in 0..seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.policy = policy;
            cfg.workload.train_rounds = train;
            cfg.workload.test_rounds = test;
            rewards.push(run_experiment(&cfg)?.test.mean_reward);
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let shown: Vec<String> = rewards.iter().map(|r| format!("{r:.3}")).collect();
        println!(
            "{policy:>12}  mean {mean:8.3}  [{}]  {:.1}s",
            shown.join(" "),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
