//! Discrete-time environment: one vector store per edge server, a simulated
//! cloud LLM, and the per-request satisfaction/delay/reward bookkeeping.

mod model;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use model::{
    delay_of, reward, satisfaction, ActionChoice, AnswerModel, DelayModel, QosWeights, SubAction,
    SATISFACTION_FLOOR,
};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, l2_distance};
use crate::vecstore::{filter_best, CorrelationSet, RecordKind, StoreConfig, VectorStore};
use crate::workload::Request;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub servers: usize,
    pub dim: usize,
    /// Query width P.
    pub query_width: usize,
    pub phi1: f64,
    pub phi2: f64,
    /// Question-side distance below which a cache decision serves the cached
    /// answer (Action A) instead of enhancing (Action C).
    pub tau_a: f64,
    /// Eviction runs whenever `slot % eviction_period == 0`.
    pub eviction_period: u64,
    pub delay: DelayModel,
    pub answer: AnswerModel,
    pub qos: QosWeights,
    pub store: StoreConfig,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            servers: 3,
            dim: 64,
            query_width: 5,
            phi1: 1.0,
            phi2: 0.01,
            tau_a: 0.15,
            eviction_period: 500,
            delay: DelayModel::default(),
            answer: AnswerModel::default(),
            qos: QosWeights::default(),
            store: StoreConfig::default(),
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.servers == 0 || self.query_width == 0 || self.dim == 0 {
            return Err(Error::config(
                "servers, query width and dim must be positive",
            ));
        }
        if self.eviction_period == 0 {
            return Err(Error::config("eviction period must be positive"));
        }
        if !(self.phi1 >= 0.0 && self.phi2 >= 0.0) {
            return Err(Error::config("filter weights must be non-negative"));
        }
        if !(self.qos.w1 > 0.0 && self.qos.w2 > 0.0 && self.qos.scale > 0.0) {
            return Err(Error::config(
                "QoS weights and reward scale must be positive",
            ));
        }
        self.delay.validate()?;
        self.answer.validate()?;
        self.store.validate()
    }
}

/// Raw local observation of one agent: the flattened 3×P correlation matrix
/// and the request embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalState {
    pub correlation: Vec<f64>,
    pub request: Vec<f64>,
}

impl LocalState {
    /// Flat network input: correlation matrix followed by the request.
    pub fn row(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.correlation.len() + self.request.len());
        v.extend_from_slice(&self.correlation);
        v.extend_from_slice(&self.request);
        v
    }
}

/// Concatenated local-state rows in server order.
pub fn global_row<'a>(states: impl IntoIterator<Item = &'a LocalState>) -> Vec<f64> {
    states.into_iter().flat_map(|s| s.row()).collect()
}

/// Global state as seen by the critic for `agent`: the same rows as
/// [`global_row`], rotated so that `agent`'s own row comes first.
pub fn agent_global_row(states: &[LocalState], agent: usize) -> Vec<f64> {
    let n = states.len();
    (0..n).flat_map(|k| states[(agent + k) % n].row()).collect()
}

/// All agents' local states for one slot, in server-index order.
pub type GlobalState = Vec<LocalState>;

/// Outcome of filtering a non-empty query result.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePlan {
    /// Rank of the filtered entry in the correlation set.
    pub rank: usize,
    pub record: u64,
    /// Distance between the request and the filtered record.
    pub distance: f64,
    /// Distance between the request and the question side of the filtered
    /// record's QA pair.
    pub question_distance: f64,
    pub answer_available: bool,
    pub sub: SubAction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub server: usize,
    pub correlations: CorrelationSet,
    pub plan: Option<EdgePlan>,
    pub state: LocalState,
}

impl Observation {
    /// Maps the binary decision to a full action. A cache decision on an empty
    /// store resolves to Action A, which the environment turns into a logged
    /// fallback to the cloud.
    pub fn choice_for(&self, a_n: usize) -> ActionChoice {
        if a_n == 1 {
            ActionChoice::Cloud
        } else {
            ActionChoice::Edge(self.plan.as_ref().map_or(SubAction::ServeCache, |p| p.sub))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub slot: u64,
    pub server: usize,
    pub request_id: u64,
    pub state: LocalState,
    /// Action as decided by the policy.
    pub decided: ActionChoice,
    /// Action actually executed (differs only on fallback).
    pub action: ActionChoice,
    pub action_prob: f64,
    pub reward: f64,
    pub satisfaction: f64,
    pub delay: f64,
    /// Records dropped by an eviction pass triggered in this step.
    pub evicted: usize,
}

impl Transition {
    pub fn is_fallback(&self) -> bool {
        self.decided != self.action
    }
}

#[derive(Clone, Debug)]
pub struct BroadcastOutcome {
    pub transitions: Vec<Transition>,
    /// Index of the fastest response.
    pub winner: usize,
}

impl BroadcastOutcome {
    pub fn winning(&self) -> &Transition {
        &self.transitions[self.winner]
    }
}

pub struct Environment {
    cfg: EnvConfig,
    stores: Vec<VectorStore>,
    rng: ChaCha8Rng,
    fallbacks: u64,
}

impl Environment {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let stores = (0..cfg.servers)
            .map(|n| {
                let store_cfg = StoreConfig {
                    seed: cfg.store.seed ^ (n as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407),
                    ..cfg.store.clone()
                };
                VectorStore::new(cfg.dim, store_cfg)
            })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            stores,
            rng,
            fallbacks: 0,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn servers(&self) -> usize {
        self.stores.len()
    }

    pub fn store(&self, server: usize) -> &VectorStore {
        &self.stores[server]
    }

    /// Number of cache decisions that had to fall back to another action.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks
    }

    /// Queries server `server`'s store for `question` and resolves the filtered
    /// record and the cache sub-action.
    pub fn observe(&self, server: usize, question: &[f64]) -> Result<Observation> {
        let store = self
            .stores
            .get(server)
            .ok_or_else(|| Error::InvalidArgument(format!("server {server} out of range")))?;
        let correlations = store.query(question, self.cfg.query_width)?;
        let plan = if correlations.is_empty() {
            None
        } else {
            let rank = filter_best(&correlations, self.cfg.phi1, self.cfg.phi2)?;
            let entry = &correlations.entries[rank];
            let partner = store.partner(entry.record);
            let (question_distance, answer_available) = match (entry.kind, partner) {
                (RecordKind::Question, p) => (entry.distance, p.is_some()),
                (RecordKind::Answer, Some(q)) => (l2_distance(question, &q.vec), true),
                (RecordKind::Answer, None) => (entry.distance, true),
            };
            let sub = if question_distance < self.cfg.tau_a && answer_available {
                SubAction::ServeCache
            } else {
                SubAction::Enhance
            };
            Some(EdgePlan {
                rank,
                record: entry.record,
                distance: entry.distance,
                question_distance,
                answer_available,
                sub,
            })
        };
        let state = LocalState {
            correlation: correlations.matrix(),
            request: question.to_vec(),
        };
        Ok(Observation {
            server,
            correlations,
            plan,
            state,
        })
    }

    /// Observations of every server for one request each (nearest mode).
    pub fn observe_all(&self, requests: &[Request]) -> Result<Vec<Observation>> {
        requests
            .iter()
            .map(|r| self.observe(r.server, &r.question_vec))
            .collect()
    }

    /// Executes `choice` for `request` on the observing server. `obs` must be
    /// fresh: no mutation of that server's store since it was taken.
    pub fn step(
        &mut self,
        request: &Request,
        obs: &Observation,
        choice: ActionChoice,
        action_prob: f64,
        slot: u64,
    ) -> Result<Transition> {
        check_dim(self.cfg.dim, request.question_vec.len())?;
        let server = obs.server;
        let mut action = choice;
        if let ActionChoice::Edge(sub) = choice {
            match &obs.plan {
                None => {
                    log::debug!("slot {slot} server {server}: empty cache, falling back to cloud");
                    action = ActionChoice::Cloud;
                }
                Some(plan) if sub == SubAction::ServeCache && !plan.answer_available => {
                    log::debug!("slot {slot} server {server}: answer evicted, enhancing instead");
                    action = ActionChoice::Edge(SubAction::Enhance);
                }
                Some(_) => {}
            }
        }
        if action != choice {
            self.fallbacks += 1;
        }

        let answer = match action {
            ActionChoice::Cloud => self
                .cfg
                .answer
                .llm_answer(&request.reference_vec, &mut self.rng),
            ActionChoice::Edge(SubAction::ServeCache) => {
                let plan = obs.plan.as_ref().expect("checked above");
                let store = &self.stores[server];
                let rec = store
                    .record(plan.record)
                    .ok_or(Error::MissingRecord(plan.record))?;
                let served = match rec.kind {
                    RecordKind::Answer => rec,
                    RecordKind::Question => store
                        .partner(rec.id)
                        .ok_or(Error::MissingRecord(rec.partner_id()))?,
                };
                served.vec.clone()
            }
            ActionChoice::Edge(SubAction::Enhance) => {
                let plan = obs.plan.as_ref().expect("checked above");
                self.cfg.answer.enhanced_answer(
                    &request.reference_vec,
                    plan.distance,
                    &mut self.rng,
                )
            }
        };
        let delay = self.cfg.delay.sample(action, &mut self.rng);
        let q = satisfaction(&answer, &request.reference_vec)?;
        let r = reward(q, delay, &self.cfg.qos);

        let store = &mut self.stores[server];
        if let (ActionChoice::Edge(_), Some(plan)) = (action, &obs.plan) {
            // the QA pair is used as a unit: both halves share the update
            store.update_cache_value(plan.record, q, delay)?;
            let partner = plan.record ^ 1;
            if store.record(partner).is_some() {
                store.update_cache_value(partner, q, delay)?;
            }
        }
        if action != ActionChoice::Edge(SubAction::ServeCache) {
            store.insert_qa(&request.question_vec, &answer, slot, q - delay)?;
        }
        let evicted = if slot.is_multiple_of(self.cfg.eviction_period) {
            store.evict()
        } else {
            0
        };

        Ok(Transition {
            slot,
            server,
            request_id: request.id,
            state: obs.state.clone(),
            decided: choice,
            action,
            action_prob,
            reward: r,
            satisfaction: q,
            delay,
            evicted,
        })
    }

    /// Replicates `request` to every server; each executes its own decision
    /// against its own store and the fastest response wins.
    pub fn broadcast_step(
        &mut self,
        request: &Request,
        decisions: &[(Observation, ActionChoice, f64)],
        slot: u64,
    ) -> Result<BroadcastOutcome> {
        if decisions.len() != self.servers() {
            return Err(Error::InvalidArgument(format!(
                "broadcast needs one decision per server ({} given, {} servers)",
                decisions.len(),
                self.servers()
            )));
        }
        let mut transitions = Vec::with_capacity(decisions.len());
        for (obs, choice, prob) in decisions {
            transitions.push(self.step(request, obs, *choice, *prob, slot)?);
        }
        let winner = transitions
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.delay.total_cmp(&b.1.delay).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .expect("at least one server");
        Ok(BroadcastOutcome {
            transitions,
            winner,
        })
    }
}

#[derive(Serialize)]
struct TransitionLogRecord<'a> {
    slot: u64,
    server: usize,
    action: &'a str,
    a_n: usize,
    sub_action: Option<SubAction>,
    q: f64,
    d: f64,
    r: f64,
}

/// Line-delimited transition log: slot, server, action, sub-action, q, d, r.
pub fn write_transition_log<'a, I>(path: impl AsRef<Path>, transitions: I) -> Result<()>
where
    I: IntoIterator<Item = &'a Transition>,
{
    let mut out = BufWriter::new(File::create(path)?);
    for t in transitions {
        let rec = TransitionLogRecord {
            slot: t.slot,
            server: t.server,
            action: t.action.label(),
            a_n: t.action.a_n(),
            sub_action: t.action.sub(),
            q: t.satisfaction,
            d: t.delay,
            r: t.reward,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
