//! A world model and a policy acting together on a batch of environments.

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::env::Observation;
use crate::policy::{ActOutput, Policy, PolicyError, PolicyInput};
use crate::rssm::{Carry, LatentSampler, RssmError, WorldModel};
use crate::tensor::Mat;

#[derive(Debug, Clone, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Model(#[from] RssmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub world_model: WorldModel,
    pub policy: Policy,
}

/// Per-stream recurrent carry and the last applied action.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub carry: Carry,
    pub last_action: Mat,
    /// Steps since the last reset, per stream.
    pub steps: Vec<usize>,
}

impl Agent {
    pub fn begin(&self, n: usize) -> AgentState {
        AgentState {
            carry: self.world_model.initial_carry(n),
            last_action: Mat::zeros(n, self.world_model.config.action_dim),
            steps: vec![0; n],
        }
    }

    /// Zeros the carry of one stream after its episode ends.
    pub fn reset_stream(&self, state: &mut AgentState, e: usize) {
        state.carry.h.row_mut(e).fill(0.0);
        state.carry.z.row_mut(e).fill(0.0);
        state.last_action.row_mut(e).fill(0.0);
        state.steps[e] = 0;
    }

    /// Advances the world model on the new observations and picks actions.
    /// With `stride > 1` the recurrent state is only advanced every
    /// `stride` steps of each stream and held in between.
    pub fn act(
        &self,
        state: &mut AgentState,
        observations: &[Observation],
        rng: &mut dyn RngCore,
        deterministic: bool,
    ) -> Result<ActOutput, AgentError> {
        let stride = self.world_model.config.stride.max(1);
        let flat: Vec<Vec<f64>> = observations.iter().map(|o| o.flat()).collect();
        let next = self.world_model.observe(
            &state.carry,
            &Mat::from_rows(&flat),
            &state.last_action,
            &mut LatentSampler::Rng(rng),
        )?;
        for (e, &s) in state.steps.iter().enumerate() {
            if s % stride == 0 {
                state.carry.h.row_mut(e).copy_from_slice(next.h.row(e));
                state.carry.z.row_mut(e).copy_from_slice(next.z.row(e));
            }
        }
        let proprio: Vec<&[f64]> = observations.iter().map(|o| o.proprio.as_slice()).collect();
        let input = PolicyInput {
            h: state.carry.h.clone(),
            proprio: Mat::from_rows(&proprio),
        };
        let out = self.policy.act(&input, rng, deterministic)?;
        state.last_action = out.actions.map(|a| a.clamp(-1.0, 1.0));
        state.steps.iter_mut().for_each(|s| *s += 1);
        Ok(out)
    }
}

/// Independent 64-bit seed derived from a list of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
