//! Multi-agent PPO with a shared actor and a central critic, trained from
//! pooled agent experience plus a decaying share of expert demonstrations.

mod buffer;
mod gae;
mod ppo;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{demos_active, expert_quota, Experience, ExperienceBuffer};
pub use gae::{compute_gae, td_advantage};
pub use ppo::{ppo_loss, LossOutput, PpoBatch, TrainerConfig, ValueNormalizer};

use crate::baselines::{greedy_llm_decide, LlmEstimate};
use crate::nn::{
    Adam, AdamConfig, EncoderConfig, NetConfig, ParamSet, PolicyNet, StateLayout, ValueNet,
};
use crate::simenv::{
    agent_global_row, ActionChoice, EnvConfig, Environment, LocalState, Observation, Transition,
};
use crate::workload::{ParaphraseParams, Request, RequestGenerator, TopicSet};
use crate::{Error, Result};

/// Per-update training log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub u: u64,
    pub quota: usize,
    pub demos_used: usize,
    pub batch_size: usize,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpdateStatus {
    Updated(TrainingRecord),
    /// Some agent has not handed over a full batch yet.
    InsufficientExperience,
    /// The update budget is spent; pooled experience was discarded.
    Finished,
}

/// Owns the actor and critic parameters and their optimizers.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainerConfig,
    policy: PolicyNet,
    value: ValueNet,
    policy_params: ParamSet,
    value_params: ParamSet,
    policy_opt: Adam,
    value_opt: Adam,
    value_norm: ValueNormalizer,
    use_demos: bool,
    u: u64,
    rng: ChaCha8Rng,
    log: Vec<TrainingRecord>,
}

const VALUE_CHUNK: usize = 256;

impl Trainer {
    pub fn new(
        cfg: TrainerConfig,
        net: NetConfig,
        agents: usize,
        use_demos: bool,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy_params = ParamSet::new();
        let policy = PolicyNet::build(net, &mut policy_params, &mut rng)?;
        let mut value_params = ParamSet::new();
        let value = ValueNet::build(net, agents, &mut value_params, &mut rng)?;
        Ok(Trainer {
            policy_opt: Adam::new(AdamConfig::with_lr(cfg.lr_policy)),
            value_opt: Adam::new(AdamConfig::with_lr(cfg.lr_value)),
            cfg,
            policy,
            value,
            policy_params,
            value_params,
            value_norm: ValueNormalizer::default(),
            use_demos,
            u: 1,
            rng,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn value(&self) -> &ValueNet {
        &self.value
    }

    pub fn policy_params(&self) -> &ParamSet {
        &self.policy_params
    }

    pub fn value_params(&self) -> &ParamSet {
        &self.value_params
    }

    pub fn uses_demos(&self) -> bool {
        self.use_demos
    }

    /// Update counter; the next update uses quota `floor(l_g / u)`.
    pub fn u(&self) -> u64 {
        self.u
    }

    pub fn log(&self) -> &[TrainingRecord] {
        &self.log
    }

    /// Immutable copy of the actor parameters for the rollout agents.
    pub fn snapshot(&self) -> Arc<ParamSet> {
        Arc::new(self.policy_params.clone())
    }

    fn values(&self, globals: &[&[f64]]) -> Result<Vec<f64>> {
        let width = self.value.global_len();
        let mut out = Vec::with_capacity(globals.len());
        for chunk in globals.chunks(VALUE_CHUNK) {
            let flat: Vec<f64> = chunk.iter().flat_map(|g| g.iter().copied()).collect();
            let x = Array2::from_shape_vec((chunk.len(), width), flat).map_err(|_| {
                Error::Dimension {
                    expected: width,
                    got: chunk.first().map_or(0, |g| g.len()),
                }
            })?;
            let (v, _) = self.value.forward(&self.value_params, x.view())?;
            out.extend(v.iter().map(|&v| {
                if self.cfg.normalize_values {
                    self.value_norm.denormalize(v)
                } else {
                    v
                }
            }));
        }
        Ok(out)
    }

    /// One trainer round: mixes demos per the quota schedule, computes
    /// advantages, runs PPO epochs, and clears the pool.
    pub fn train_update(&mut self, buffer: &mut ExperienceBuffer) -> Result<UpdateStatus> {
        if !buffer.ready() {
            return Ok(UpdateStatus::InsufficientExperience);
        }
        if self.cfg.u_max > 0 && self.u > self.cfg.u_max {
            buffer.take_pool();
            return Ok(UpdateStatus::Finished);
        }
        let segments = buffer.take_pool();
        let l_g = buffer.demos().len();
        let quota = expert_quota(l_g, self.u)?;
        let demos: Vec<&Experience> = if self.use_demos && demos_active(quota, self.cfg.l_min_g) {
            let picked = rand::seq::index::sample(&mut self.rng, l_g, quota.min(l_g));
            let mut idx = picked.into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &buffer.demos()[i]).collect()
        } else {
            Vec::new()
        };

        let mut samples: Vec<&Experience> = segments.iter().flatten().collect();
        let pool_len = samples.len();
        samples.extend(demos.iter().copied());
        let globals: Vec<&[f64]> = samples.iter().map(|e| e.global.as_slice()).collect();
        let values = self.values(&globals)?;

        let mut advantages = Vec::with_capacity(samples.len());
        let mut offset = 0;
        for seg in &segments {
            let rewards: Vec<f64> = seg.iter().map(|e| e.reward).collect();
            let last = seg.last().expect("segments are non-empty");
            let boot = self.values(&[last.next_global.as_slice()])?[0];
            let v = &values[offset..offset + seg.len()];
            advantages.extend(compute_gae(
                &rewards,
                v,
                boot,
                self.cfg.gamma,
                self.cfg.gae_lambda,
            )?);
            offset += seg.len();
        }
        if !demos.is_empty() {
            let next: Vec<&[f64]> = demos.iter().map(|e| e.next_global.as_slice()).collect();
            let next_values = self.values(&next)?;
            for (i, e) in demos.iter().enumerate() {
                advantages.push(td_advantage(
                    e.reward,
                    values[pool_len + i],
                    next_values[i],
                    self.cfg.gamma,
                ));
            }
        }
        let returns: Vec<f64> = advantages.iter().zip(&values).map(|(a, v)| a + v).collect();
        let targets: Vec<f64> = if self.cfg.normalize_values {
            self.value_norm.update(&returns);
            returns
                .iter()
                .map(|&r| self.value_norm.normalize(r))
                .collect()
        } else {
            returns
        };
        if self.cfg.normalize_advantages && advantages.len() > 1 {
            let n = advantages.len() as f64;
            let mean = advantages.iter().sum::<f64>() / n;
            let std = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            for a in &mut advantages {
                *a = (*a - mean) / (std + 1e-8);
            }
        }

        let total = samples.len();
        let mut order: Vec<usize> = (0..total).collect();
        let (mut policy_loss, mut value_loss, mut entropy, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.minibatch) {
                let batch = self.assemble(&samples, chunk, &advantages, &targets);
                let mut out = ppo_loss(
                    &self.policy,
                    &self.policy_params,
                    &self.value,
                    &self.value_params,
                    &batch,
                    &self.cfg,
                )?;
                if self.cfg.max_grad_norm > 0.0 {
                    out.policy_grads.clip_global_norm(self.cfg.max_grad_norm);
                    out.value_grads.clip_global_norm(self.cfg.max_grad_norm);
                }
                self.policy_opt
                    .step(&mut self.policy_params, &out.policy_grads)?;
                self.value_opt
                    .step(&mut self.value_params, &out.value_grads)?;
                policy_loss += -out.clip_objective;
                value_loss += out.value_loss;
                entropy += out.entropy;
                steps += 1;
            }
        }
        let steps = steps.max(1) as f64;
        let record = TrainingRecord {
            u: self.u,
            quota,
            demos_used: demos.len(),
            batch_size: total,
            mean_reward: samples[..pool_len].iter().map(|e| e.reward).sum::<f64>()
                / pool_len.max(1) as f64,
            policy_loss: policy_loss / steps,
            value_loss: value_loss / steps,
            entropy: entropy / steps,
        };
        log::debug!(
            "update {}: batch {} ({} demos), mean reward {:.4}, entropy {:.4}",
            record.u,
            record.batch_size,
            record.demos_used,
            record.mean_reward,
            record.entropy
        );
        self.u += 1;
        self.log.push(record.clone());
        Ok(UpdateStatus::Updated(record))
    }

    fn assemble(
        &self,
        samples: &[&Experience],
        idx: &[usize],
        advantages: &[f64],
        targets: &[f64],
    ) -> PpoBatch {
        let state_len = self.policy.config().layout.state_len();
        let global_len = self.value.global_len();
        let mut states = Array2::zeros((idx.len(), state_len));
        let mut globals = Array2::zeros((idx.len(), global_len));
        for (row, &i) in idx.iter().enumerate() {
            states
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(&samples[i].state[..]));
            globals
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(&samples[i].global[..]));
        }
        PpoBatch {
            states,
            globals,
            actions: idx.iter().map(|&i| samples[i].action).collect(),
            old_probs: idx.iter().map(|&i| samples[i].action_prob).collect(),
            advantages: Array1::from_iter(idx.iter().map(|&i| advantages[i])),
            returns: Array1::from_iter(idx.iter().map(|&i| targets[i])),
        }
    }
}

/// Writes one JSON line per update.
pub fn write_training_log(records: &[TrainingRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Rollout worker for one edge server, holding a policy snapshot.
#[derive(Clone, Debug)]
pub struct Agent {
    pub id: usize,
    snapshot: Arc<ParamSet>,
}

impl Agent {
    pub fn new(id: usize, snapshot: Arc<ParamSet>) -> Self {
        Agent { id, snapshot }
    }

    pub fn version(&self) -> u64 {
        self.snapshot.version()
    }

    pub fn params(&self) -> &ParamSet {
        &self.snapshot
    }

    pub fn sync(&mut self, snapshot: Arc<ParamSet>) {
        self.snapshot = snapshot;
    }
}

/// How a policy turns probabilities into actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSelection {
    Sample,
    Argmax,
}

/// Picks `a_n` from the shared policy given only the local state. Returns the
/// action and its probability.
pub fn select_action<R: Rng + ?Sized>(
    policy: &PolicyNet,
    params: &ParamSet,
    state: &[f64],
    selection: ActionSelection,
    rng: &mut R,
) -> Result<(usize, f64)> {
    let p = policy.probabilities(params, state)?;
    let a = match selection {
        ActionSelection::Sample => usize::from(rng.random::<f64>() >= p[0]),
        ActionSelection::Argmax => usize::from(p[1] > p[0]),
    };
    Ok((a, p[a]))
}

fn check_versions(agents: &[Agent]) -> Result<()> {
    if let Some(first) = agents.first() {
        if let Some(bad) = agents.iter().find(|a| a.version() != first.version()) {
            return Err(Error::VersionMismatch {
                expected: first.version(),
                found: bad.version(),
            });
        }
    }
    Ok(())
}

/// Runs one slot of decentralized execution: every agent observes its own
/// server, acts on its local state, and the environment steps. With a buffer,
/// the steps are staged as experience (completed when the next slot's global
/// state arrives, handed to the pool in batches of `l_min_m`).
#[allow(clippy::too_many_arguments)]
pub fn collect_and_sync<R: Rng + ?Sized>(
    agents: &[Agent],
    policy: &PolicyNet,
    env: &mut Environment,
    requests: &[Request],
    slot: u64,
    selection: ActionSelection,
    mut buffer: Option<&mut ExperienceBuffer>,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    check_versions(agents)?;
    if requests.len() != agents.len() {
        return Err(Error::InvalidArgument(format!(
            "{} requests for {} agents",
            requests.len(),
            agents.len()
        )));
    }
    let observations = env.observe_all(requests)?;
    let states: Vec<LocalState> = observations.iter().map(|o| o.state.clone()).collect();
    if let Some(buf) = buffer.as_deref_mut() {
        buf.complete_pending_with(|n| agent_global_row(&states, n));
    }
    let mut transitions = Vec::with_capacity(agents.len());
    for ((agent, req), obs) in agents.iter().zip(requests).zip(&observations) {
        let state = obs.state.row();
        let (a, prob) = select_action(policy, agent.params(), &state, selection, rng)?;
        let t = env.step(req, obs, obs.choice_for(a), prob, slot)?;
        if let Some(buf) = buffer.as_deref_mut() {
            buf.stage(Experience {
                agent: agent.id,
                state,
                global: agent_global_row(&states, agent.id),
                next_global: Vec::new(),
                action: a,
                action_prob: prob,
                reward: t.reward,
            })?;
        }
        transitions.push(t);
    }
    Ok(transitions)
}

/// Network shape and trainer settings of a learned policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub trainer: TrainerConfig,
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            trainer: TrainerConfig::default(),
            encoder: EncoderConfig::default(),
            hidden: 128,
            hidden_layers: 2,
        }
    }
}

impl LearnerConfig {
    pub fn net_config(&self, env: &EnvConfig, use_encoder: bool) -> NetConfig {
        NetConfig {
            layout: StateLayout {
                query_width: env.query_width,
                input_dim: env.dim,
            },
            encoder: use_encoder.then_some(EncoderConfig {
                input_dim: env.dim,
                ..self.encoder
            }),
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
        }
    }
}

/// A learned scheduling policy: trainer, rollout agents, and their buffers.
#[derive(Clone, Debug)]
pub struct Learner {
    trainer: Trainer,
    agents: Vec<Agent>,
    buffer: ExperienceBuffer,
    rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(
        cfg: &LearnerConfig,
        env: &EnvConfig,
        use_encoder: bool,
        use_demos: bool,
        seed: u64,
    ) -> Result<Self> {
        let net = cfg.net_config(env, use_encoder);
        let trainer = Trainer::new(cfg.trainer.clone(), net, env.servers, use_demos, seed)?;
        let snapshot = trainer.snapshot();
        let agents = (0..env.servers)
            .map(|n| Agent::new(n, Arc::clone(&snapshot)))
            .collect();
        Ok(Learner {
            buffer: ExperienceBuffer::new(env.servers, cfg.trainer.l_min_m),
            trainer,
            agents,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5851_F42D_4C95_7F2D),
        })
    }

    pub fn trainer(&self) -> &Trainer {
        &self.trainer
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn buffer(&self) -> &ExperienceBuffer {
        &self.buffer
    }

    pub fn uses_encoder(&self) -> bool {
        self.trainer.policy().config().encoder.is_some()
    }

    pub fn uses_demos(&self) -> bool {
        self.trainer.uses_demos()
    }

    /// Installs the demonstration store. Ignored by variants without demos.
    pub fn set_demos(&mut self, demos: Vec<Experience>) {
        if self.uses_demos() {
            self.buffer.set_demos(demos);
        }
    }

    /// Training-phase slot: sample actions, store experience, update when
    /// every agent has handed over a batch, then broadcast the new snapshot.
    pub fn train_slot(
        &mut self,
        env: &mut Environment,
        requests: &[Request],
        slot: u64,
    ) -> Result<Vec<Transition>> {
        let transitions = collect_and_sync(
            &self.agents,
            self.trainer.policy(),
            env,
            requests,
            slot,
            ActionSelection::Sample,
            Some(&mut self.buffer),
            &mut self.rng,
        )?;
        if self.buffer.ready() {
            if let UpdateStatus::Updated(_) = self.trainer.train_update(&mut self.buffer)? {
                let snapshot = self.trainer.snapshot();
                for agent in &mut self.agents {
                    agent.sync(Arc::clone(&snapshot));
                }
            }
        }
        Ok(transitions)
    }

    /// Test-phase slot: greedy actions, no experience kept.
    pub fn test_slot(
        &mut self,
        env: &mut Environment,
        requests: &[Request],
        slot: u64,
    ) -> Result<Vec<Transition>> {
        self.buffer.clear_pending();
        collect_and_sync(
            &self.agents,
            self.trainer.policy(),
            env,
            requests,
            slot,
            ActionSelection::Argmax,
            None,
            &mut self.rng,
        )
    }

    /// Greedy decision of agent `server` for one observation.
    pub fn decide(&mut self, obs: &Observation) -> Result<(ActionChoice, f64)> {
        let agent = self
            .agents
            .get(obs.server)
            .ok_or_else(|| Error::InvalidArgument(format!("no agent {}", obs.server)))?;
        let (a, p) = select_action(
            self.trainer.policy(),
            agent.params(),
            &obs.state.row(),
            ActionSelection::Argmax,
            &mut self.rng,
        )?;
        Ok((obs.choice_for(a), p))
    }

    pub fn policy_params(&self) -> &ParamSet {
        self.trainer.policy_params()
    }
}

/// Runs Greedy-LLM on a seeded workload drawn from `topics` and records
/// `count` steps as demonstrations (behavior probability 1).
pub fn build_expert_demos(
    env_cfg: &EnvConfig,
    topics: &TopicSet,
    paraphrase: ParaphraseParams,
    count: usize,
    seed: u64,
) -> Result<Vec<Experience>> {
    let servers = env_cfg.servers;
    let mut gen = RequestGenerator::new(topics, paraphrase, servers, seed ^ DEMO_STREAM_SALT)?;
    let mut slot = 0u64;
    let slots = std::iter::from_fn(move || {
        slot += 1;
        Some(gen.rounds(slot, 1, servers))
    });
    demos_from_slots(env_cfg, slots, count, seed)
}

/// Salt separating the demo request stream from the environment seed.
pub const DEMO_STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// Records Greedy-LLM steps over `slots` (one request per server each) in a
/// fresh environment until `count` demonstrations are complete.
pub fn demos_from_slots<I>(
    env_cfg: &EnvConfig,
    slots: I,
    count: usize,
    seed: u64,
) -> Result<Vec<Experience>>
where
    I: IntoIterator<Item = Result<Vec<Request>>>,
{
    if count == 0 {
        return Err(Error::InvalidArgument(
            "demo count must be at least 1".into(),
        ));
    }
    let servers = env_cfg.servers;
    let mut env = Environment::new(EnvConfig {
        seed,
        ..env_cfg.clone()
    })?;
    let mut estimates: Vec<LlmEstimate> = (0..servers)
        .map(|_| LlmEstimate::for_env(env_cfg))
        .collect();
    let mut done: Vec<Experience> = Vec::with_capacity(count + servers);
    let mut staged: Vec<Experience> = Vec::new();
    let mut slots = slots.into_iter();
    let mut slot = 1u64;
    while done.len() < count {
        let Some(requests) = slots.next() else {
            return Err(Error::InvalidArgument(format!(
                "workload ran out after {} of {count} demonstrations",
                done.len()
            )));
        };
        let requests = requests?;
        let observations = env.observe_all(&requests)?;
        let states: Vec<LocalState> = observations.iter().map(|o| o.state.clone()).collect();
        for mut exp in staged.drain(..) {
            exp.next_global = agent_global_row(&states, exp.agent);
            done.push(exp);
        }
        for (n, (req, obs)) in requests.iter().zip(&observations).enumerate() {
            let choice = greedy_llm_decide(obs, estimates[n].estimate(), env_cfg);
            let t = env.step(req, obs, choice, 1.0, slot)?;
            if t.action == ActionChoice::Cloud {
                estimates[n].record(t.reward);
            }
            staged.push(Experience {
                agent: n,
                state: obs.state.row(),
                global: agent_global_row(&states, n),
                next_global: Vec::new(),
                action: choice.a_n(),
                action_prob: 1.0,
                reward: t.reward,
            });
        }
        slot += 1;
    }
    done.truncate(count);
    Ok(done)
}
