//! Action types and the closed-form QoS pieces: satisfaction, delay, reward,
//! and the simulated answer quality of each action.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_dim};

/// Which edge-side treatment a cache decision (`a_n = 0`) resolves to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubAction {
    /// Action A: return the cached answer.
    ServeCache,
    /// Action C: enhance the request with cached context, then call the cloud LLM.
    Enhance,
}

/// A scheduling decision. `Cloud` is `a_n = 1` (Action B) and never carries a
/// sub-action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionChoice {
    Edge(SubAction),
    Cloud,
}

impl ActionChoice {
    pub const A: ActionChoice = ActionChoice::Edge(SubAction::ServeCache);
    pub const B: ActionChoice = ActionChoice::Cloud;
    pub const C: ActionChoice = ActionChoice::Edge(SubAction::Enhance);

    /// Binary action seen by the learned policy.
    pub fn a_n(self) -> usize {
        match self {
            ActionChoice::Edge(_) => 0,
            ActionChoice::Cloud => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ActionChoice::Edge(SubAction::ServeCache) => "A",
            ActionChoice::Cloud => "B",
            ActionChoice::Edge(SubAction::Enhance) => "C",
        }
    }

    pub fn sub(self) -> Option<SubAction> {
        match self {
            ActionChoice::Edge(s) => Some(s),
            ActionChoice::Cloud => None,
        }
    }
}

/// Completion delays in seconds, with multiplicative lognormal jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayModel {
    pub edge_query: f64,
    pub cloud_llm: f64,
    pub jitter: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            edge_query: 0.81,
            cloud_llm: 3.34,
            jitter: 0.05,
        }
    }
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge_query > 0.0 && self.cloud_llm > 0.0 && self.jitter >= 0.0) {
            return Err(Error::config(
                "delays must be positive and jitter non-negative",
            ));
        }
        Ok(())
    }

    fn jittered<R: Rng + ?Sized>(&self, base: f64, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        base * (self.jitter * z).exp()
    }

    /// Delay of an executed action; Action C pays the edge query and the cloud
    /// call, each jittered independently.
    pub fn sample<R: Rng + ?Sized>(&self, action: ActionChoice, rng: &mut R) -> f64 {
        match action {
            ActionChoice::Edge(SubAction::ServeCache) => self.jittered(self.edge_query, rng),
            ActionChoice::Cloud => self.jittered(self.cloud_llm, rng),
            ActionChoice::Edge(SubAction::Enhance) => {
                let edge = self.jittered(self.edge_query, rng);
                edge + self.jittered(self.cloud_llm, rng)
            }
        }
    }
}

pub fn delay_of<R: Rng + ?Sized>(action: ActionChoice, model: &DelayModel, rng: &mut R) -> f64 {
    model.sample(action, rng)
}

/// Smallest magnitude a satisfaction value may take; keeps `q < 0` strict.
pub const SATISFACTION_FLOOR: f64 = 1e-9;

/// Negative L2 distance between the delivered and the reference answer.
pub fn satisfaction(answer: &[f64], reference: &[f64]) -> Result<f64> {
    check_dim(reference.len(), answer.len())?;
    Ok(-linalg::l2_distance(answer, reference).max(SATISFACTION_FLOOR))
}

/// QoS weighting. The reward is `scale * (w1 * q - w2 * d)`, the negated
/// per-request objective scaled for fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QosWeights {
    pub w1: f64,
    pub w2: f64,
    pub scale: f64,
}

impl QosWeights {
    /// `w1 = 1`, `w2 = ratio`.
    pub fn from_ratio(ratio: f64, scale: f64) -> Self {
        Self {
            w1: 1.0,
            w2: ratio,
            scale,
        }
    }

    /// Per-request objective term `-w1 * q + w2 * d`.
    pub fn objective(&self, q: f64, d: f64) -> f64 {
        -self.w1 * q + self.w2 * d
    }
}

impl Default for QosWeights {
    fn default() -> Self {
        Self::from_ratio(0.1, 10.0)
    }
}

pub fn reward(q: f64, d: f64, qos: &QosWeights) -> f64 {
    qos.scale * (qos.w1 * q - qos.w2 * d)
}

/// Answer-quality model standing in for the cloud LLM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnswerModel {
    pub sigma_llm: f64,
    pub sigma_enh: f64,
    pub sigma_mislead: f64,
    pub relevance_radius: f64,
}

impl Default for AnswerModel {
    fn default() -> Self {
        Self {
            sigma_llm: 0.15,
            sigma_enh: 0.05,
            sigma_mislead: 0.10,
            relevance_radius: 0.5,
        }
    }
}

impl AnswerModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_llm,
            self.sigma_enh,
            self.sigma_mislead,
            self.relevance_radius,
        ];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config(
                "answer model parameters must be non-negative",
            ));
        }
        Ok(())
    }

    /// Direct cloud answer (Action B).
    pub fn llm_answer<R: Rng + ?Sized>(&self, reference: &[f64], rng: &mut R) -> Vec<f64> {
        linalg::perturb_unit(rng, reference, self.sigma_llm)
    }

    /// Cloud answer to an enhanced request (Action C). Context farther than
    /// the relevance radius from the question misleads the LLM.
    pub fn enhanced_answer<R: Rng + ?Sized>(
        &self,
        reference: &[f64],
        context_distance: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let sigma = if context_distance < self.relevance_radius {
            self.sigma_enh
        } else {
            self.sigma_llm + self.sigma_mislead
        };
        linalg::perturb_unit(rng, reference, sigma)
    }
}
