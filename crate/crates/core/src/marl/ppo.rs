use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::nn::{log_softmax, Gradients, ParamSet, PolicyNet, ValueNet};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
    pub lr_policy: f64,
    pub lr_value: f64,
    /// Per-agent experience handed to the trainer at once.
    pub l_min_m: usize,
    /// Demos are mixed in only while the quota exceeds this.
    pub l_min_g: usize,
    /// Size of the demonstration store.
    pub demo_count: usize,
    /// Stop training after this many updates; 0 means no limit.
    pub u_max: u64,
    pub epochs: usize,
    pub minibatch: usize,
    pub normalize_advantages: bool,
    pub normalize_values: bool,
    /// Global gradient-norm clip per network; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            value_coeff: 0.5,
            entropy_coeff: 0.01,
            lr_policy: 3e-4,
            lr_value: 1e-3,
            l_min_m: 128,
            l_min_g: 16,
            demo_count: 1000,
            u_max: 0,
            epochs: 4,
            minibatch: 64,
            normalize_advantages: true,
            normalize_values: true,
            max_grad_norm: 0.5,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config(format!(
                "gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config(format!(
                "clip must be positive, got {}",
                self.clip
            )));
        }
        if !(self.lr_policy > 0.0 && self.lr_value > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.value_coeff < 0.0 || self.entropy_coeff < 0.0 || self.max_grad_norm < 0.0 {
            return Err(Error::config(
                "loss coefficients and grad clip must be non-negative",
            ));
        }
        if self.l_min_m == 0 || self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::config(
                "l_min_m, epochs and minibatch must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Running mean and variance of value targets (Welford). The critic learns
/// normalized targets; predictions are mapped back before computing
/// advantages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValueNormalizer {
    count: f64,
    mean: f64,
    m2: f64,
}

impl ValueNormalizer {
    pub fn update(&mut self, values: &[f64]) {
        for &v in values {
            self.count += 1.0;
            let delta = v - self.mean;
            self.mean += delta / self.count;
            self.m2 += delta * (v - self.mean);
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt().max(1e-6)
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std() + self.mean
    }
}

/// Inputs of one loss evaluation. `returns` are the critic's regression
/// targets in whatever scale the critic is trained on.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub states: Array2<f64>,
    pub globals: Array2<f64>,
    pub actions: Vec<usize>,
    pub old_probs: Vec<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Negated objective, to be minimized.
    pub loss: f64,
    pub clip_objective: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Ratios after clipping to `[1−ε, 1+ε]`.
    pub clipped_ratios: Vec<f64>,
    pub clip_fraction: f64,
    pub policy_grads: Gradients,
    pub value_grads: Gradients,
}

/// Clipped-surrogate loss with value and entropy terms:
/// `loss = −(L_clip − c_v·MSE(V, R) + c_e·H)`, averaged over the batch.
pub fn ppo_loss(
    policy: &PolicyNet,
    policy_params: &ParamSet,
    value: &ValueNet,
    value_params: &ParamSet,
    batch: &PpoBatch,
    cfg: &TrainerConfig,
) -> Result<LossOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty PPO batch".into()));
    }
    if let Some((i, p)) = batch
        .old_probs
        .iter()
        .enumerate()
        .find(|(_, p)| !(**p > 0.0 && **p <= 1.0))
    {
        return Err(Error::CorruptExperience(format!(
            "sample {i} has old action probability {p}"
        )));
    }
    if let Some(a) = batch.actions.iter().find(|&&a| a > 1) {
        return Err(Error::CorruptExperience(format!(
            "action index {a} out of range"
        )));
    }
    let inv_n = 1.0 / n as f64;

    let out = policy.forward(policy_params, batch.states.view())?;
    let logp = log_softmax(&out.logits);
    let mut dlogits = Array2::zeros((n, 2));
    let mut clip_objective = 0.0;
    let mut entropy = 0.0;
    let mut clipped_ratios = Vec::with_capacity(n);
    let mut clipped = 0usize;
    for i in 0..n {
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        let ratio = (logp[[i, a]] - batch.old_probs[i].ln()).exp();
        let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        clipped_ratios.push(clipped_ratio);
        let unclipped_term = ratio * adv;
        let clipped_term = clipped_ratio * adv;
        let p = [out.probs[[i, 0]], out.probs[[i, 1]]];
        if unclipped_term <= clipped_term {
            clip_objective += unclipped_term;
            for k in 0..2 {
                let onehot = if k == a { 1.0 } else { 0.0 };
                dlogits[[i, k]] -= inv_n * adv * ratio * (onehot - p[k]);
            }
        } else {
            clip_objective += clipped_term;
            clipped += 1;
        }
        let h = -(p[0] * logp[[i, 0]] + p[1] * logp[[i, 1]]);
        entropy += h;
        for k in 0..2 {
            dlogits[[i, k]] += inv_n * cfg.entropy_coeff * p[k] * (logp[[i, k]] + h);
        }
    }
    clip_objective *= inv_n;
    entropy *= inv_n;
    let policy_grads = policy.backward(policy_params, &out.cache, dlogits);

    let (v, vcache) = value.forward(value_params, batch.globals.view())?;
    let err = &v - &batch.returns;
    let value_loss = err.mapv(|e| e * e).sum() * inv_n;
    let dv = err * (2.0 * cfg.value_coeff * inv_n);
    let value_grads = value.backward(value_params, &vcache, &dv);

    Ok(LossOutput {
        loss: -(clip_objective - cfg.value_coeff * value_loss + cfg.entropy_coeff * entropy),
        clip_objective,
        value_loss,
        entropy,
        clipped_ratios,
        clip_fraction: clipped as f64 * inv_n,
        policy_grads,
        value_grads,
    })
}
