//! Heuristic comparison policies and the learned-policy ablation variants.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::marl::{Learner, LearnerConfig};
use crate::simenv::{reward, ActionChoice, EnvConfig, Observation};
use crate::{Error, Result};

/// Window of recent direct-LLM rewards used by Greedy-LLM.
pub const LLM_ESTIMATE_WINDOW: usize = 50;

/// Cache path if the best match is within `threshold` (L2), else direct LLM.
pub fn greedy_threshold_decide(obs: &Observation, threshold: f64) -> ActionChoice {
    match obs.correlations.best_distance() {
        Some(d) if d <= threshold => obs.choice_for(0),
        _ => ActionChoice::Cloud,
    }
}

/// Predicted reward of the cache path from the best match distance.
pub fn predicted_cache_reward(best_distance: f64, env: &EnvConfig) -> f64 {
    env.qos.scale * (env.qos.w1 * -best_distance - env.qos.w2 * env.delay.edge_query)
}

/// Cache path if its predicted reward beats the running direct-LLM estimate.
pub fn greedy_llm_decide(obs: &Observation, llm_estimate: f64, env: &EnvConfig) -> ActionChoice {
    match obs.correlations.best_distance() {
        Some(d) if predicted_cache_reward(d, env) > llm_estimate => obs.choice_for(0),
        _ => ActionChoice::Cloud,
    }
}

/// Uniform binary decision.
pub fn random_decide<R: Rng + ?Sized>(obs: &Observation, rng: &mut R) -> ActionChoice {
    obs.choice_for(rng.random_range(0..2))
}

/// Running mean of the last [`LLM_ESTIMATE_WINDOW`] direct-LLM rewards.
#[derive(Clone, Debug)]
pub struct LlmEstimate {
    window: VecDeque<f64>,
    capacity: usize,
    initial: f64,
}

impl LlmEstimate {
    pub fn new(initial: f64, capacity: usize) -> Self {
        LlmEstimate {
            window: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            initial,
        }
    }

    /// Starts from the reward of a typical direct answer:
    /// `q = −σ_llm` at the cloud delay.
    pub fn for_env(env: &EnvConfig) -> Self {
        let initial = reward(-env.answer.sigma_llm, env.delay.cloud_llm, &env.qos);
        Self::new(initial, LLM_ESTIMATE_WINDOW)
    }

    pub fn estimate(&self) -> f64 {
        if self.window.is_empty() {
            self.initial
        } else {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        }
    }

    pub fn record(&mut self, reward: f64) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(reward);
    }
}

/// Policy selectable by name in an experiment config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyKind {
    Greedy(f64),
    GreedyLlm,
    Random,
    Mappo,
    GMappo,
    TMappo,
    Lrs,
}

impl PolicyKind {
    pub fn is_learned(self) -> bool {
        matches!(
            self,
            PolicyKind::Mappo | PolicyKind::GMappo | PolicyKind::TMappo | PolicyKind::Lrs
        )
    }

    /// The comparison set reported by default.
    pub fn standard_set() -> Vec<PolicyKind> {
        vec![
            PolicyKind::Lrs,
            PolicyKind::Mappo,
            PolicyKind::GMappo,
            PolicyKind::TMappo,
            PolicyKind::Greedy(0.1),
            PolicyKind::Greedy(0.3),
            PolicyKind::Greedy(0.5),
            PolicyKind::GreedyLlm,
            PolicyKind::Random,
        ]
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Greedy(t) => write!(f, "greedy-{t}"),
            PolicyKind::GreedyLlm => f.write_str("greedy-llm"),
            PolicyKind::Random => f.write_str("random"),
            PolicyKind::Mappo => f.write_str("mappo"),
            PolicyKind::GMappo => f.write_str("g-mappo"),
            PolicyKind::TMappo => f.write_str("t-mappo"),
            PolicyKind::Lrs => f.write_str("lrs"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let name = s.trim().to_ascii_lowercase();
        let kind = match name.as_str() {
            "greedy-llm" => PolicyKind::GreedyLlm,
            "random" => PolicyKind::Random,
            "mappo" => PolicyKind::Mappo,
            "g-mappo" => PolicyKind::GMappo,
            "t-mappo" => PolicyKind::TMappo,
            "lrs" => PolicyKind::Lrs,
            other => {
                let t = other
                    .strip_prefix("greedy-")
                    .and_then(|t| t.parse::<f64>().ok())
                    .filter(|t| t.is_finite() && *t > 0.0)
                    .ok_or_else(|| Error::config(format!("unknown policy `{s}`")))?;
                PolicyKind::Greedy(t)
            }
        };
        Ok(kind)
    }
}

impl Serialize for PolicyKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicyKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Switches distinguishing the learned variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub encoder: bool,
    pub demos: bool,
}

/// Encoder/demo switches for a learned policy kind.
pub fn ablation_switches(kind: PolicyKind) -> Result<Ablation> {
    let (encoder, demos) = match kind {
        PolicyKind::Mappo => (false, false),
        PolicyKind::GMappo => (false, true),
        PolicyKind::TMappo => (true, false),
        PolicyKind::Lrs => (true, true),
        other => {
            return Err(Error::config(format!("`{other}` is not a learned policy")));
        }
    };
    Ok(Ablation { encoder, demos })
}

/// Builds the learned policy for `kind`: MAPPO feeds the raw embedding and
/// uses no demos, G-MAPPO adds demos, T-MAPPO adds the encoder, LRS has both.
pub fn assemble_ablation(
    kind: PolicyKind,
    cfg: &LearnerConfig,
    env: &EnvConfig,
    seed: u64,
) -> Result<Learner> {
    let sw = ablation_switches(kind)?;
    Learner::new(cfg, env, sw.encoder, sw.demos, seed)
}

#[cfg(test)]
mod tests;
