//! Training checkpoints.
//!
//! A checkpoint is the magic line `IPCCKPT1` followed by a JSON document
//! holding the config snapshot, the step, the vocabulary, the loss history,
//! every parameter tensor in f64 and the optimizer state. Floats are written
//! with shortest round-trip formatting, so a reload is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::confounder::ConfounderDictionary;
use crate::error::{io_at, Error, Result};
use crate::params::{Adam, ParamStore};

pub const CHECKPOINT_MAGIC: &str = "IPCCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dvc,
    Qa,
}

/// Loss components after one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub components: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub step: usize,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub history: Vec<StepLog>,
    pub dictionary: Option<ConfounderDictionary>,
    pub store: ParamStore,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = format!("{CHECKPOINT_MAGIC}\n").into_bytes();
        serde_json::to_writer(&mut out, self)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = CHECKPOINT_MAGIC.len() + 1;
        if bytes.len() < header
            || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC.as_bytes()
            || bytes[header - 1] != b'\n'
        {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut ckpt: Checkpoint = serde_json::from_slice(&bytes[header..])?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.store.reindex();
        if ckpt.optimizer.m.len() != ckpt.store.len() || ckpt.optimizer.v.len() != ckpt.store.len()
        {
            return Err(Error::Format(
                "optimizer state does not match the parameters".into(),
            ));
        }
        Ok(ckpt)
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| io_at(path, e))?)
    }

    pub fn expect_kind(self, kind: ModelKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Invalid(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(self)
    }
}
