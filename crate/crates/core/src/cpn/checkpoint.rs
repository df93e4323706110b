//! Binary checkpoint: magic, version, a JSON header and a little-endian
//! `f64` payload.
//!
//! ```text
//! b"CAUSNETM" | u32 version | u64 header length | header JSON | payload
//! ```
//!
//! The header carries the model and dataset configs, the normalizer, the
//! split, the training phase reached and one `{name, shape, offset}` entry per
//! parameter. Offsets count `f64` values from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CpnError, ModelConfig, ModelState, ParamInfo};
use crate::data::{DatasetSplit, Normalizer};
use crate::dataset::DatasetConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAUSNETM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with everything needed to apply it to new data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub dataset: DatasetConfig,
    pub normalizer: Normalizer,
    pub split: DatasetSplit,
    /// Training phase the parameters come from, `1..=3`.
    pub phase: u8,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    dataset: DatasetConfig,
    normalizer: Normalizer,
    split: DatasetSplit,
    phase: u8,
    params: Vec<ParamInfo>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.state.config.clone(),
            dataset: self.dataset.clone(),
            normalizer: self.normalizer,
            split: self.split.clone(),
            phase: self.phase,
            params: ModelState::layout(&self.state.config),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.state.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.state.values() {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, CpnError> {
        let bad = |reason: String| CpnError::Checkpoint {
            path: origin.to_string(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        header.model.validate()?;
        if header.params != ModelState::layout(&header.model) {
            return Err(bad("parameter table does not match the model config".into()));
        }
        let payload = &bytes[20 + hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values".into()));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let state = ModelState::from_flat(&header.model, &flat).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            state,
            dataset: header.dataset,
            normalizer: header.normalizer,
            split: header.split,
            phase: header.phase,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CpnError> {
        fs::write(path, self.to_bytes()).map_err(|e| CpnError::Checkpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CpnError> {
        let bytes = fs::read(path).map_err(|e| CpnError::Checkpoint {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
