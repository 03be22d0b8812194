use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One agent step in trainer format. `global` and `next_global` are the
/// concatenated local states of all agents (server order) at this slot and the
/// next one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub agent: usize,
    pub state: Vec<f64>,
    pub global: Vec<f64>,
    pub next_global: Vec<f64>,
    pub action: usize,
    /// Behavior probability of `action` when it was taken.
    pub action_prob: f64,
    pub reward: f64,
}

/// Demonstration quota `floor(l_g / u)`.
pub fn expert_quota(l_g: usize, u: u64) -> Result<usize> {
    if u == 0 {
        return Err(Error::InvalidArgument("expert quota needs u >= 1".into()));
    }
    Ok((l_g as u64 / u) as usize)
}

/// Whether a quota is large enough for demos to be mixed in.
pub fn demos_active(quota: usize, l_min_g: usize) -> bool {
    quota > l_min_g
}

/// Per-agent lists `E_n`, the trainer pool `E_N` and the demo store `E_g`.
///
/// A step waits in a per-agent pending slot until the next global state is
/// known. When an agent's list reaches `handoff` steps it moves into the pool
/// as one contiguous segment and the list restarts.
#[derive(Clone, Debug)]
pub struct ExperienceBuffer {
    handoff: usize,
    agents: Vec<Vec<Experience>>,
    pending: Vec<Option<Experience>>,
    pool: Vec<Vec<Experience>>,
    handed: Vec<usize>,
    demos: Vec<Experience>,
}

impl ExperienceBuffer {
    pub fn new(agents: usize, handoff: usize) -> Self {
        ExperienceBuffer {
            handoff,
            agents: vec![Vec::new(); agents],
            pending: vec![None; agents],
            pool: Vec::new(),
            handed: vec![0; agents],
            demos: Vec::new(),
        }
    }

    pub fn agents(&self) -> usize {
        self.agents.len()
    }

    /// `l_n` for one agent.
    pub fn local_len(&self, agent: usize) -> usize {
        self.agents[agent].len()
    }

    /// Number of steps currently in the pool `E_N`.
    pub fn pool_len(&self) -> usize {
        self.pool.iter().map(Vec::len).sum()
    }

    pub fn pool(&self) -> &[Vec<Experience>] {
        &self.pool
    }

    pub fn demos(&self) -> &[Experience] {
        &self.demos
    }

    pub fn set_demos(&mut self, demos: Vec<Experience>) {
        self.demos = demos;
    }

    /// Every agent has handed at least one full segment to the pool.
    pub fn ready(&self) -> bool {
        self.handed.iter().all(|&h| h > 0)
    }

    /// Completes all pending steps with the global state of the new slot.
    pub fn complete_pending(&mut self, next_global: &[f64]) {
        self.complete_pending_with(|_| next_global.to_vec());
    }

    /// Like [`complete_pending`](Self::complete_pending), with a separate
    /// next global state per agent.
    pub fn complete_pending_with(&mut self, mut next_global: impl FnMut(usize) -> Vec<f64>) {
        for n in 0..self.agents.len() {
            if let Some(mut exp) = self.pending[n].take() {
                exp.next_global = next_global(n);
                self.agents[n].push(exp);
                if self.agents[n].len() >= self.handoff {
                    let segment = std::mem::take(&mut self.agents[n]);
                    self.pool.push(segment);
                    self.handed[n] += 1;
                }
            }
        }
    }

    /// Stages a step whose next global state is not known yet. A step already
    /// pending for the same agent is an error.
    pub fn stage(&mut self, exp: Experience) -> Result<()> {
        let n = exp.agent;
        if n >= self.agents.len() {
            return Err(Error::InvalidArgument(format!("unknown agent {n}")));
        }
        if self.pending[n].is_some() {
            return Err(Error::CorruptExperience(format!(
                "agent {n} staged two steps without completing the first"
            )));
        }
        self.pending[n] = Some(exp);
        Ok(())
    }

    /// Empties the pool (after an update).
    pub fn take_pool(&mut self) -> Vec<Vec<Experience>> {
        self.handed.iter_mut().for_each(|h| *h = 0);
        std::mem::take(&mut self.pool)
    }

    /// Drops in-flight steps, e.g. when switching from training to testing.
    pub fn clear_pending(&mut self) {
        self.pending.iter_mut().for_each(|p| *p = None);
        self.agents.iter_mut().for_each(Vec::clear);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(agent: usize, reward: f64) -> Experience {
        Experience {
            agent,
            state: vec![0.0],
            global: vec![reward],
            next_global: Vec::new(),
            action: 0,
            action_prob: 0.5,
            reward,
        }
    }

    #[test]
    fn quota_examples() {
        assert_eq!(expert_quota(1000, 10).unwrap(), 100);
        let q = expert_quota(1000, 1000).unwrap();
        assert_eq!(q, 1);
        assert!(!demos_active(q, 16));
        assert!(expert_quota(1000, 0).is_err());
        let seq: Vec<usize> = (1..=100).map(|u| expert_quota(1000, u).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn handoff_resets_local_length() {
        let mut buf = ExperienceBuffer::new(2, 3);
        for t in 0..4 {
            buf.complete_pending(&[t as f64]);
            for n in 0..2 {
                assert!(buf.local_len(n) < 3);
                buf.stage(exp(n, t as f64)).unwrap();
            }
        }
        // three completed steps per agent → one segment each
        assert!(buf.ready());
        assert_eq!(buf.pool_len(), 6);
        assert_eq!(buf.local_len(0), 0);
        for seg in buf.pool() {
            for (i, e) in seg.iter().enumerate() {
                assert_eq!(e.next_global, vec![i as f64 + 1.0]);
            }
        }
        assert!(buf.stage(exp(0, 9.0)).is_err());
        let taken = buf.take_pool();
        assert_eq!(taken.len(), 2);
        assert_eq!(buf.pool_len(), 0);
        assert!(!buf.ready());
    }
}
