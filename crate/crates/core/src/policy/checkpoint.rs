use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{IoSpec, PolicyConfig, PolicyNetwork};
use super::params::ParamRecord;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "pathnav-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named parameter arrays plus everything needed to rebuild the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub iteration: usize,
    pub policy: PolicyConfig,
    pub io: IoSpec,
    /// Full experiment configuration the weights were trained with.
    pub experiment: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

impl PolicyNetwork {
    pub fn to_checkpoint(&self, iteration: usize, experiment: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            iteration,
            policy: self.config.clone(),
            io: self.io.clone(),
            experiment,
            params: self.store.to_records(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = PolicyNetwork::new(ck.policy.clone(), ck.io.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        net.store.load_records(&ck.params)?;
        Ok(net)
    }

    /// Loads weights into an existing network, refusing any shape mismatch.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.io != self.io {
            return Err(Error::Checkpoint(format!(
                "io mismatch: checkpoint {:?}, network {:?}",
                ck.io, self.io
            )));
        }
        self.store.load_records(&ck.params)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = serde_json::to_vec(ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            ck.format,
            ck.version
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn io() -> IoSpec {
        IoSpec {
            n_rays: 8,
            n_waypoints: 4,
            action_limits: [1.0, 0.5, 1.0],
        }
    }

    fn cfg() -> PolicyConfig {
        PolicyConfig {
            waypoint_dim: 4,
            query_dim: 4,
            path_embed_dim: 4,
            scan_dim: 4,
            hidden_dim: 6,
            head_dim: 4,
            critic_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let net = PolicyNetwork::new(cfg(), io(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        save_checkpoint(&p, &net.to_checkpoint(3, serde_json::json!({"seed": 1}))).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        let back = PolicyNetwork::from_checkpoint(&ck).unwrap();
        assert_eq!(back.store.to_records(), net.store.to_records());
        assert_eq!(ck.iteration, 3);
    }

    #[test]
    fn mismatched_shapes_are_refused() {
        let net = PolicyNetwork::new(cfg(), io(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ck = net.to_checkpoint(0, serde_json::Value::Null);
        let other_cfg = PolicyConfig { hidden_dim: 8, ..cfg() };
        let mut other = PolicyNetwork::new(other_cfg, io(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(other.load_params(&ck).is_err());
        let mut io2 = io();
        io2.n_rays = 9;
        let mut other = PolicyNetwork::new(cfg(), io2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(other.load_params(&ck).is_err());
    }
}
