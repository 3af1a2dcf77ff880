//! Versioned JSON checkpoints. Floats are written with round-trip precision,
//! so save/load is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamState;
use crate::error::{Error, Result};
use crate::nets::ActorCritic;

use super::config::TrainConfig;
use super::normalize::{RewardNormalizer, RunningMeanStd};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Nominal step this checkpoint stands for (a multiple of the interval).
    pub label: u64,
    /// Environment steps actually taken when it was written.
    pub global_step: u64,
    pub iteration: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub model: ActorCritic<f64>,
    pub optimizer: AdamState<f64>,
    pub obs_norm: Option<RunningMeanStd>,
    pub reward_norm: Option<RewardNormalizer>,
}

impl Checkpoint {
    pub fn file_name(label: u64) -> String {
        format!("step_{label:09}.json")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Invalid("checkpoint config hash does not match its config".into()));
        }
        Ok(ck)
    }

    /// Writes `dir/step_<label>.json` through a temporary file.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(Self::file_name(self.label));
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Checkpoint labels present in `dir`, ascending.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(label) = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            out.push((label, path));
        }
    }
    out.sort();
    Ok(out)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
