//! JSON checkpoints carrying a format version and the hash of the configuration
//! that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, StudentModel};
use crate::error::{Error, Result};
use crate::optim::{load_params, store_params, Adam, StoredTensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of the JSON serialization of `config`.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Envelope<T> {
    pub version: u32,
    pub kind: String,
    pub config_hash: String,
    pub payload: T,
}

pub(crate) fn write_envelope<T: Serialize>(path: &Path, kind: &str, hash: &str, payload: T) -> Result<()> {
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config_hash: hash.to_string(),
        payload,
    };
    let text = serde_json::to_string(&env).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_envelope<T: DeserializeOwned>(path: &Path, kind: &str, expected_hash: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} but this build reads {}",
            path.display(),
            env.version,
            CHECKPOINT_VERSION
        )));
    }
    if env.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {} checkpoint, expected {kind}",
            path.display(),
            env.kind
        )));
    }
    if env.config_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "{}: config hash {} does not match the current config {}",
            path.display(),
            env.config_hash,
            expected_hash
        )));
    }
    Ok(env.payload)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentCheckpoint {
    pub arch: ArchConfig,
    pub params: BTreeMap<String, StoredTensor>,
    pub optimizer: Option<Adam>,
}

pub fn save_student(path: &Path, model: &StudentModel, optimizer: Option<&Adam>, hash: &str) -> Result<()> {
    let payload = StudentCheckpoint {
        arch: model.arch.clone(),
        params: store_params(&model.params),
        optimizer: optimizer.cloned(),
    };
    write_envelope(path, "student", hash, payload)
}

pub fn load_student(path: &Path, expected_hash: &str) -> Result<(StudentModel, Option<Adam>)> {
    let c: StudentCheckpoint = read_envelope(path, "student", expected_hash)?;
    let params = load_params(&c.params).ok_or_else(|| Error::Checkpoint("malformed tensor".into()))?;
    let reference = super::init_student(&c.arch, 0)?;
    for (name, t) in &reference.params {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(Error::Checkpoint(format!("parameter {name} missing or misshapen"))),
        }
    }
    Ok((StudentModel { arch: c.arch, params }, c.optimizer))
}
