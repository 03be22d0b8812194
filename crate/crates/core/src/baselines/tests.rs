use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::simenv::{Environment, SubAction};
use crate::vecstore::{CorrelationEntry, CorrelationSet, RecordKind};
use crate::workload::Request;

fn env_cfg() -> EnvConfig {
    EnvConfig {
        servers: 1,
        dim: 8,
        ..EnvConfig::default()
    }
}

fn unit(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; 8];
    v[i] = 1.0;
    v
}

/// Observation of a store holding one QA pair whose question is `e0`, for a
/// request rotated away from it by an L2 distance of `dist`.
fn observation_at(dist: f64) -> Observation {
    let mut env = Environment::new(env_cfg()).unwrap();
    let seed = Request {
        id: 0,
        user: 0,
        server: 0,
        slot: 1,
        question_vec: unit(0),
        reference_vec: unit(1),
        topic: 0,
    };
    let obs = env.observe(0, &seed.question_vec).unwrap();
    env.step(&seed, &obs, ActionChoice::B, 1.0, 1).unwrap();
    // point at angle θ from e0 with chord length dist
    let theta = 2.0 * (dist / 2.0).asin();
    let mut q = vec![0.0; 8];
    q[0] = theta.cos();
    q[2] = theta.sin();
    env.observe(0, &q).unwrap()
}

fn synthetic(distances: &[f64]) -> Observation {
    let entries = distances
        .iter()
        .enumerate()
        .map(|(i, &d)| CorrelationEntry {
            record: 2 * i as u64,
            distance: d,
            similarity: 1.0 / (1.0 + d),
            kind: RecordKind::Question,
            freq: 0,
        })
        .collect();
    let correlations = CorrelationSet { entries, width: 5 };
    let state = crate::simenv::LocalState {
        correlation: correlations.matrix(),
        request: unit(0),
    };
    Observation {
        server: 0,
        plan: None,
        correlations,
        state,
    }
}

#[test]
fn threshold_branches() {
    let obs = observation_at(0.4);
    assert_eq!(greedy_threshold_decide(&obs, 0.3), ActionChoice::B);
    assert_eq!(greedy_threshold_decide(&obs, 0.5), ActionChoice::C);
    let close = observation_at(0.05);
    assert_eq!(greedy_threshold_decide(&close, 0.3), ActionChoice::A);
    let empty = Environment::new(env_cfg())
        .unwrap()
        .observe(0, &unit(0))
        .unwrap();
    assert_eq!(greedy_threshold_decide(&empty, 0.3), ActionChoice::B);
    assert_eq!(
        greedy_llm_decide(&empty, -100.0, &env_cfg()),
        ActionChoice::B
    );
}

#[test]
fn greedy_llm_compares_predicted_rewards() {
    let cfg = env_cfg();
    // predicted cache reward −1 needs 10·(−d − 0.081) = −1 → d = 0.019
    let obs = observation_at(0.019);
    assert!((predicted_cache_reward(0.019, &cfg) + 1.0).abs() < 1e-12);
    assert_eq!(greedy_llm_decide(&obs, -6.0, &cfg), ActionChoice::A);
    assert_eq!(greedy_llm_decide(&obs, -0.5, &cfg), ActionChoice::B);
}

#[test]
fn llm_estimate_window() {
    let cfg = env_cfg();
    let mut est = LlmEstimate::for_env(&cfg);
    let initial = 10.0 * (-0.15 - 0.1 * 3.34);
    assert!((est.estimate() - initial).abs() < 1e-12);
    for r in [-6.0, -5.0, -7.0] {
        est.record(r);
    }
    assert_eq!(est.estimate(), -6.0);
    for _ in 0..LLM_ESTIMATE_WINDOW {
        est.record(-1.0);
    }
    assert_eq!(est.estimate(), -1.0);
}

#[test]
fn random_decisions_are_even_and_replayable() {
    let obs = observation_at(0.4);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..10_000)
            .map(|_| random_decide(&obs, &mut rng))
            .collect::<Vec<_>>()
    };
    let a = draw(3);
    assert_eq!(a, draw(3));
    let cloud = a.iter().filter(|c| **c == ActionChoice::B).count() as f64 / 10_000.0;
    assert!((cloud - 0.5).abs() < 0.02, "{cloud}");
    assert!(a.iter().all(|c| matches!(
        c,
        ActionChoice::Cloud | ActionChoice::Edge(SubAction::Enhance)
    )));
}

#[test]
fn policy_names_round_trip() {
    for kind in PolicyKind::standard_set() {
        let name = kind.to_string();
        assert_eq!(name.parse::<PolicyKind>().unwrap(), kind);
    }
    assert_eq!(
        "greedy-0.3".parse::<PolicyKind>().unwrap(),
        PolicyKind::Greedy(0.3)
    );
    assert_eq!("LRS".parse::<PolicyKind>().unwrap(), PolicyKind::Lrs);
    assert!("greedy--1".parse::<PolicyKind>().unwrap_err().is_config());
    assert!("ppo".parse::<PolicyKind>().is_err());
    let json = serde_json::to_string(&PolicyKind::GMappo).unwrap();
    assert_eq!(json, "\"g-mappo\"");
}

#[test]
fn ablation_wiring() {
    let env = EnvConfig {
        servers: 2,
        dim: 16,
        ..EnvConfig::default()
    };
    let cfg = LearnerConfig {
        hidden: 8,
        ..LearnerConfig::default()
    };
    let lrs = assemble_ablation(PolicyKind::Lrs, &cfg, &env, 1).unwrap();
    assert!(lrs.uses_encoder() && lrs.uses_demos());
    let mappo = assemble_ablation(PolicyKind::Mappo, &cfg, &env, 1).unwrap();
    assert!(!mappo.uses_encoder() && !mappo.uses_demos());
    let g = assemble_ablation(PolicyKind::GMappo, &cfg, &env, 1).unwrap();
    assert!(!g.uses_encoder() && g.uses_demos());
    let t = assemble_ablation(PolicyKind::TMappo, &cfg, &env, 1).unwrap();
    assert!(t.uses_encoder() && !t.uses_demos());
    assert_eq!(cfg.net_config(&env, true).feature_dim(), 15 + 32);
    assert_eq!(cfg.net_config(&env, false).feature_dim(), 15 + 16);
    assert!(assemble_ablation(PolicyKind::Random, &cfg, &env, 1)
        .unwrap_err()
        .is_config());

    // variants without demos ignore a demo store
    let mut mappo = mappo;
    mappo.set_demos(Vec::new());
    assert!(mappo.buffer().demos().is_empty());
}

proptest! {
    #[test]
    fn raising_threshold_never_turns_cache_into_cloud(
        distances in prop::collection::vec(0.0f64..2.0, 0..5),
        t1 in 0.01f64..1.0,
        dt in 0.0f64..1.0,
    ) {
        let obs = synthetic(&distances);
        let low = greedy_threshold_decide(&obs, t1);
        let high = greedy_threshold_decide(&obs, t1 + dt);
        if low != ActionChoice::B {
            prop_assert_ne!(high, ActionChoice::B);
        }
    }

    #[test]
    fn baselines_are_total(distances in prop::collection::vec(0.0f64..2.0, 0..5), est in -20.0f64..0.0) {
        let obs = synthetic(&distances);
        let cfg = env_cfg();
        for c in [greedy_threshold_decide(&obs, 0.3), greedy_llm_decide(&obs, est, &cfg)] {
            prop_assert!(c.a_n() <= 1);
        }
    }
}
