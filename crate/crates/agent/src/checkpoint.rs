//! JSON checkpoints of a trained policy.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sfc_core::env::ObsNormalization;

use crate::error::{AgentError, Result};
use crate::nn::PolicyNet;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub obs_len: usize,
    pub hidden: Vec<usize>,
    pub head_sizes: Vec<usize>,
    /// Hash of the experiment configuration that produced the weights.
    pub config_hash: String,
    pub seed: u64,
    pub normalization: Option<ObsNormalization>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        net: &PolicyNet,
        config_hash: impl Into<String>,
        seed: u64,
        normalization: Option<ObsNormalization>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            obs_len: net.obs_len(),
            hidden: net.hidden().to_vec(),
            head_sizes: net.head_sizes().to_vec(),
            config_hash: config_hash.into(),
            seed,
            normalization,
            params: net.params().to_vec(),
        }
    }

    /// Rebuilds the network, checking the parameter count against the
    /// declared architecture.
    pub fn to_net(&self) -> Result<PolicyNet> {
        let mut net = PolicyNet::zeros(self.obs_len, &self.hidden, &self.head_sizes);
        net.set_params(self.params.clone())
            .map_err(|_| AgentError::CheckpointMismatch(format!(
                "{} parameters stored, architecture needs {}",
                self.params.len(),
                net.num_params()
            )))?;
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(AgentError::CheckpointMismatch("non-finite parameter".into()));
        }
        Ok(net)
    }

    /// Errors unless the checkpoint fits an environment with this
    /// observation length and these action heads.
    pub fn check_compatible(&self, obs_len: usize, head_sizes: &[usize]) -> Result<()> {
        if self.obs_len != obs_len || self.head_sizes != head_sizes {
            return Err(AgentError::CheckpointMismatch(format!(
                "checkpoint has observation length {} and heads {:?}, environment has {} and {:?}",
                self.obs_len, self.head_sizes, obs_len, head_sizes
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(AgentError::CheckpointMismatch(format!(
                "version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let net = PolicyNet::init(7, &[5, 3], &[4, 2, 2, 4], 3);
        let norm = ObsNormalization { activity_scale: 12.5, vnf_scale: 5.0 };
        let ck = Checkpoint::new(&net, "abc", 9, Some(norm));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_net().unwrap(), net);
    }

    #[test]
    fn mismatches_are_rejected() {
        let net = PolicyNet::init(7, &[5], &[4, 2, 2, 4], 3);
        let ck = Checkpoint::new(&net, "abc", 9, None);
        ck.check_compatible(7, &[4, 2, 2, 4]).unwrap();
        assert!(ck.check_compatible(7, &[4, 3, 2, 4]).is_err());
        assert!(ck.check_compatible(8, &[4, 2, 2, 4]).is_err());

        let mut short = ck.clone();
        short.params.pop();
        assert!(matches!(short.to_net(), Err(AgentError::CheckpointMismatch(_))));

        let mut v = ck.clone();
        v.version = 99;
        assert!(Checkpoint::from_json(&v.to_json().unwrap()).is_err());
    }
}
