//! Experiment runner: builds the workload, environment and policy from one
//! config, runs the training and test phases, and collects windowed metrics.

mod check;
mod metrics;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use check::{run_checks, CheckOutcome};
pub use metrics::{
    emit_report, format_float, parse_csv_windows, parse_json_report, record_window, write_report,
    MetricsReport, MetricsWindow, Phase, PhaseSummary, ReportFormat, WindowAccumulator,
    CSV_COLUMNS, WINDOW_SIZE,
};

use crate::baselines::{
    assemble_ablation, greedy_llm_decide, greedy_threshold_decide, random_decide, LlmEstimate,
    PolicyKind,
};
use crate::marl::{build_expert_demos, demos_from_slots, Learner, LearnerConfig, TrainingRecord};
use crate::nn::ParamSet;
use crate::simenv::{
    ActionChoice, AnswerModel, DelayModel, EnvConfig, Environment, Observation, QosWeights,
    Transition,
};
use crate::vecstore::StoreConfig;
use crate::workload::{
    generate_topics_clustered, load_workload, write_workload, ParaphraseParams, Request,
    RequestGenerator, TopicSet,
};
use crate::{Error, Result};

// Salts deriving independent streams from the experiment seed.
const TOPIC_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0xBF58_476D_1CE4_E5B9;
const ENV_SALT: u64 = 0x94D0_49BB_1331_11EB;
const STORE_SALT: u64 = 0x2545_F491_4F6C_DD1D;
const POLICY_SALT: u64 = 0x6A09_E667_F3BC_C908;
const DEMO_SALT: u64 = 0xBB67_AE85_84CA_A73B;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Each request is served by its home server.
    Nearest,
    /// Test requests go to every server; the fastest response counts.
    Broadcast,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Nearest => "nearest",
            EvalMode::Broadcast => "broadcast",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(EvalMode::Nearest),
            "broadcast" => Ok(EvalMode::Broadcast),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected nearest or broadcast)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub servers: usize,
    /// Users are homed round-robin: user `m` uses server `m % servers`.
    pub users: usize,
    pub dim: usize,
    pub query_width: usize,
    /// `w = w2 / w1` with `w1 = 1`.
    pub weight_ratio: f64,
    pub reward_scale: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub tau_a: f64,
    pub eviction_period: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let env = EnvConfig::default();
        SystemConfig {
            servers: env.servers,
            users: 30,
            dim: env.dim,
            query_width: env.query_width,
            weight_ratio: 0.1,
            reward_scale: 10.0,
            phi1: env.phi1,
            phi2: env.phi2,
            tau_a: env.tau_a,
            eviction_period: env.eviction_period,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub topics: usize,
    /// Topic clusters; neighbouring topics in a cluster have similar
    /// questions but unrelated answers.
    pub clusters: usize,
    pub cluster_spread: f64,
    pub repeat_ratio: f64,
    pub paraphrase_sigma: f64,
    /// Slots in the training phase (one request per server per slot).
    pub train_rounds: usize,
    pub test_rounds: usize,
    /// Pre-embedded request file used instead of the generator.
    pub file: Option<PathBuf>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            topics: 3000,
            clusters: 1500,
            cluster_spread: 0.1,
            repeat_ratio: 0.4,
            paraphrase_sigma: 0.05,
            train_rounds: 13500,
            test_rounds: 500,
            file: None,
        }
    }
}

/// Store settings exposed in the config; the index seed derives from the
/// experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub nlist: usize,
    pub min_candidates: usize,
    pub kmeans_iters: usize,
    pub rebuild_every: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        let s = StoreConfig::default();
        IndexConfig {
            nlist: s.nlist,
            min_candidates: s.min_candidates,
            kmeans_iters: s.kmeans_iters,
            rebuild_every: s.rebuild_every,
        }
    }
}

/// Everything a run depends on. Serialized as TOML with one table per
/// section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub policy: PolicyKind,
    pub mode: EvalMode,
    pub system: SystemConfig,
    pub workload: WorkloadConfig,
    pub delay: DelayModel,
    pub answer: AnswerModel,
    pub index: IndexConfig,
    pub learner: LearnerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            policy: PolicyKind::Lrs,
            mode: EvalMode::Nearest,
            system: SystemConfig::default(),
            workload: WorkloadConfig::default(),
            delay: DelayModel::default(),
            answer: AnswerModel::default(),
            index: IndexConfig::default(),
            learner: LearnerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if s.servers == 0 || s.users == 0 || s.query_width == 0 {
            return Err(Error::config(
                "servers, users and query_width must be at least 1",
            ));
        }
        if s.users < s.servers {
            return Err(Error::config(format!(
                "need at least one user per server ({} users, {} servers)",
                s.users, s.servers
            )));
        }
        if !(s.weight_ratio > 0.0 && s.weight_ratio.is_finite()) {
            return Err(Error::config(format!(
                "weight_ratio must be positive, got {}",
                s.weight_ratio
            )));
        }
        let w = &self.workload;
        if w.train_rounds == 0 || w.test_rounds == 0 {
            return Err(Error::config(
                "train_rounds and test_rounds must be at least 1",
            ));
        }
        if w.file.is_none() {
            ParaphraseParams {
                repeat_ratio: w.repeat_ratio,
                paraphrase_sigma: w.paraphrase_sigma,
            }
            .validate()?;
            if w.topics == 0 || w.clusters == 0 {
                return Err(Error::config("topics and clusters must be at least 1"));
            }
            if !(w.cluster_spread > 0.0) {
                return Err(Error::config("cluster_spread must be positive"));
            }
        }
        self.env_config().validate()?;
        self.learner.trainer.validate()?;
        if self.policy.is_learned() {
            self.learner
                .net_config(&self.env_config(), true)
                .validate()?;
            if self.learner.hidden_layers == 0 {
                return Err(Error::config("hidden_layers must be at least 1"));
            }
        }
        if let PolicyKind::Greedy(t) = self.policy {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(format!(
                    "greedy threshold must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        let s = &self.system;
        EnvConfig {
            servers: s.servers,
            dim: s.dim,
            query_width: s.query_width,
            phi1: s.phi1,
            phi2: s.phi2,
            tau_a: s.tau_a,
            eviction_period: s.eviction_period,
            delay: self.delay.clone(),
            answer: self.answer.clone(),
            qos: QosWeights::from_ratio(s.weight_ratio, s.reward_scale),
            store: StoreConfig {
                nlist: self.index.nlist,
                min_candidates: self.index.min_candidates,
                kmeans_iters: self.index.kmeans_iters,
                rebuild_every: self.index.rebuild_every,
                seed: self.seed ^ STORE_SALT,
            },
            seed: self.seed ^ ENV_SALT,
        }
    }

    pub fn paraphrase(&self) -> ParaphraseParams {
        ParaphraseParams {
            repeat_ratio: self.workload.repeat_ratio,
            paraphrase_sigma: self.workload.paraphrase_sigma,
        }
    }
}

/// Request stream of one run, grouped by slot.
#[derive(Clone, Debug)]
pub struct Workload {
    /// `None` for imported workloads.
    pub topics: Option<TopicSet>,
    pub train: Vec<Vec<Request>>,
    pub test: Vec<Vec<Request>>,
}

impl Workload {
    pub fn requests(&self) -> impl Iterator<Item = &Request> {
        self.train.iter().chain(&self.test).flatten()
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let all: Vec<Request> = self.requests().cloned().collect();
        write_workload(path, &all)
    }
}

/// Generates (or loads) the train and test request streams. Slots are
/// numbered from 1; test slots continue after the training slots.
pub fn build_workload(cfg: &ExperimentConfig) -> Result<Workload> {
    let w = &cfg.workload;
    let servers = cfg.system.servers;
    let (train_rounds, test_rounds) = (w.train_rounds, w.test_rounds);
    if let Some(path) = &w.file {
        let requests = load_workload(path, Some(cfg.system.dim)).map_err(|e| match e {
            Error::Io(io) => {
                Error::config(format!("cannot read workload {}: {io}", path.display()))
            }
            other => other,
        })?;
        let slots = group_by_slot(requests, servers)?;
        if slots.len() < train_rounds + test_rounds {
            return Err(Error::config(format!(
                "workload has {} slots, config needs {}",
                slots.len(),
                train_rounds + test_rounds
            )));
        }
        let mut slots = slots;
        slots.truncate(train_rounds + test_rounds);
        let test = slots.split_off(train_rounds);
        return Ok(Workload {
            topics: None,
            train: slots,
            test,
        });
    }
    let topics = generate_topics_clustered(
        w.topics,
        w.clusters,
        w.cluster_spread,
        cfg.system.dim,
        cfg.seed ^ TOPIC_SALT,
    )?;
    let (train, test) = {
        let mut gen =
            RequestGenerator::new(&topics, cfg.paraphrase(), servers, cfg.seed ^ STREAM_SALT)?;
        let mut take = |first: u64, n: usize| -> Result<Vec<Vec<Request>>> {
            (0..n)
                .map(|i| gen.rounds(first + i as u64, 1, cfg.system.users))
                .collect()
        };
        let train = take(1, train_rounds)?;
        let test = take(1 + train_rounds as u64, test_rounds)?;
        (train, test)
    };
    Ok(Workload {
        topics: Some(topics),
        train,
        test,
    })
}

/// Groups a slot-ordered stream; every slot must carry exactly one request
/// per server.
fn group_by_slot(requests: Vec<Request>, servers: usize) -> Result<Vec<Vec<Request>>> {
    let mut out: Vec<Vec<Request>> = Vec::new();
    let mut current: Option<u64> = None;
    for r in requests {
        if r.server >= servers {
            return Err(Error::config(format!(
                "request {} targets server {} but only {servers} are configured",
                r.id, r.server
            )));
        }
        if current != Some(r.slot) {
            out.push(Vec::with_capacity(servers));
            current = Some(r.slot);
        }
        out.last_mut().expect("pushed above").push(r);
    }
    for slot in &mut out {
        slot.sort_by_key(|r| r.server);
        let ok = slot.len() == servers && slot.iter().enumerate().all(|(i, r)| r.server == i);
        if !ok {
            return Err(Error::config(format!(
                "slot {} does not have exactly one request per server",
                slot[0].slot
            )));
        }
    }
    Ok(out)
}

/// Policy state across the run.
enum Runtime {
    Greedy(f64),
    GreedyLlm(Vec<LlmEstimate>),
    Random(Box<ChaCha8Rng>),
    Learned(Box<Learner>),
}

impl Runtime {
    fn decide(&mut self, obs: &Observation, env: &EnvConfig) -> Result<(ActionChoice, f64)> {
        Ok(match self {
            Runtime::Greedy(t) => (greedy_threshold_decide(obs, *t), 1.0),
            Runtime::GreedyLlm(est) => {
                (greedy_llm_decide(obs, est[obs.server].estimate(), env), 1.0)
            }
            Runtime::Random(rng) => (random_decide(obs, rng), 0.5),
            Runtime::Learned(l) => l.decide(obs)?,
        })
    }

    fn feedback(&mut self, t: &Transition) {
        if let Runtime::GreedyLlm(est) = self {
            if t.action == ActionChoice::Cloud {
                est[t.server].record(t.reward);
            }
        }
    }

    fn nearest_slot(
        &mut self,
        env: &mut Environment,
        requests: &[Request],
        slot: u64,
        phase: Phase,
    ) -> Result<Vec<Transition>> {
        if let Runtime::Learned(l) = self {
            return match phase {
                Phase::Train => l.train_slot(env, requests, slot),
                Phase::Test => l.test_slot(env, requests, slot),
            };
        }
        let env_cfg = env.config().clone();
        let mut out = Vec::with_capacity(requests.len());
        for req in requests {
            let obs = env.observe(req.server, &req.question_vec)?;
            let (choice, prob) = self.decide(&obs, &env_cfg)?;
            let t = env.step(req, &obs, choice, prob, slot)?;
            self.feedback(&t);
            out.push(t);
        }
        Ok(out)
    }

    fn broadcast_slot(
        &mut self,
        env: &mut Environment,
        requests: &[Request],
        slot: u64,
    ) -> Result<Vec<Transition>> {
        let env_cfg = env.config().clone();
        let mut out = Vec::with_capacity(requests.len());
        for req in requests {
            let mut decisions = Vec::with_capacity(env.servers());
            for n in 0..env.servers() {
                let obs = env.observe(n, &req.question_vec)?;
                let (choice, prob) = self.decide(&obs, &env_cfg)?;
                decisions.push((obs, choice, prob));
            }
            let outcome = env.broadcast_step(req, &decisions, slot)?;
            for t in &outcome.transitions {
                self.feedback(t);
            }
            out.push(outcome.winning().clone());
        }
        Ok(out)
    }
}

/// Optional by-products of a run.
#[derive(Clone, Debug, Default)]
pub struct RunArtifacts {
    /// Every completed request in order (winning transitions in broadcast
    /// mode); filled only when requested.
    pub transitions: Vec<(Phase, Transition)>,
    pub training_log: Vec<TrainingRecord>,
    pub policy_params: Option<ParamSet>,
    pub fallbacks: u64,
    /// Largest cache value left in any store at the end of the run.
    pub max_cache_value: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub keep_transitions: bool,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    run_experiment_with(cfg, RunOptions::default()).map(|(r, _)| r)
}

/// Runs the training phase (always nearest-server) and the frozen test
/// phase in the configured mode.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    opts: RunOptions,
) -> Result<(MetricsReport, RunArtifacts)> {
    cfg.validate()?;
    let workload = build_workload(cfg)?;
    run_on_workload(cfg, &workload, opts)
}

pub fn run_on_workload(
    cfg: &ExperimentConfig,
    workload: &Workload,
    opts: RunOptions,
) -> Result<(MetricsReport, RunArtifacts)> {
    cfg.validate()?;
    let env_cfg = cfg.env_config();
    let mut env = Environment::new(env_cfg.clone())?;
    let policy_seed = cfg.seed ^ POLICY_SALT;
    let mut runtime = match cfg.policy {
        PolicyKind::Greedy(t) => Runtime::Greedy(t),
        PolicyKind::GreedyLlm => Runtime::GreedyLlm(
            (0..env_cfg.servers)
                .map(|_| LlmEstimate::for_env(&env_cfg))
                .collect(),
        ),
        PolicyKind::Random => Runtime::Random(Box::new(ChaCha8Rng::seed_from_u64(policy_seed))),
        kind => {
            let mut learner = assemble_ablation(kind, &cfg.learner, &env_cfg, policy_seed)?;
            if learner.uses_demos() {
                let count = cfg.learner.trainer.demo_count;
                let demo_seed = cfg.seed ^ DEMO_SALT;
                let demos = match &workload.topics {
                    Some(topics) => {
                        build_expert_demos(&env_cfg, topics, cfg.paraphrase(), count, demo_seed)?
                    }
                    None => demos_from_slots(
                        &env_cfg,
                        workload.train.iter().cycle().map(|s| Ok(s.clone())),
                        count,
                        demo_seed,
                    )?,
                };
                learner.set_demos(demos);
            }
            Runtime::Learned(Box::new(learner))
        }
    };

    let mut artifacts = RunArtifacts::default();
    let mut windows = Vec::new();
    let mut summaries = [
        metrics::SummaryAccumulator::default(),
        metrics::SummaryAccumulator::default(),
    ];
    for (phase, slots) in [
        (Phase::Train, &workload.train),
        (Phase::Test, &workload.test),
    ] {
        let mut acc = WindowAccumulator::new(phase, env_cfg.servers);
        let summary = &mut summaries[usize::from(phase == Phase::Test)];
        for requests in slots {
            let slot = requests.first().map_or(0, |r| r.slot);
            let transitions = match (phase, cfg.mode) {
                (Phase::Test, EvalMode::Broadcast) => {
                    runtime.broadcast_slot(&mut env, requests, slot)?
                }
                _ => runtime.nearest_slot(&mut env, requests, slot, phase)?,
            };
            for t in transitions {
                record_window(&mut acc, &t, &mut windows);
                summary.record(&t);
                if opts.keep_transitions {
                    artifacts.transitions.push((phase, t));
                }
            }
        }
        if let Some(w) = acc.finish() {
            windows.push(w);
        }
    }
    if let Runtime::Learned(l) = &runtime {
        artifacts.training_log = l.trainer().log().to_vec();
        artifacts.policy_params = Some(l.policy_params().clone());
    }
    artifacts.fallbacks = env.fallbacks();
    artifacts.max_cache_value = (0..env.servers())
        .flat_map(|n| env.store(n).records().map(|r| r.cache_value))
        .reduce(f64::max);
    let report = MetricsReport {
        config: cfg.clone(),
        windows,
        train: summaries[0].finish(),
        test: summaries[1].finish(),
    };
    Ok((report, artifacts))
}
