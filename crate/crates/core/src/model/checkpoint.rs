//! `CKPT1` checkpoint files.
//!
//! Layout: the 5-byte magic `CKPT1`, a single-line JSON header terminated by
//! `\n`, then the parameter blob: every parameter as a little-endian `f32`,
//! in layout order (cascade, then conv layer, then weights `[out, in, ky, kx]`
//! followed by the layer's biases).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CascadeConfig, CascadeModel};
use crate::error::{Error, Result};
use crate::kspace::container::{f32_to_le, le_to_f32, read_bytes, write_bytes};

pub const MAGIC: &[u8; 5] = b"CKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub dataset_id: String,
    pub epochs: usize,
    /// Epoch at which the parameters were captured (0 = initialisation).
    pub epoch: usize,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub best_val_psnr: Option<f64>,
    /// Slice shape the model was trained on, `[height, width]`.
    pub image_shape: Option<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: CascadeConfig,
    training_meta: TrainingMeta,
    parameter_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeCheckpoint {
    pub config: CascadeConfig,
    pub parameters: Vec<f32>,
    pub format_version: u32,
    pub training_meta: TrainingMeta,
}

impl CascadeCheckpoint {
    pub fn from_model(model: &CascadeModel, training_meta: TrainingMeta) -> Self {
        Self {
            config: *model.config(),
            parameters: model.parameters().to_vec(),
            format_version: FORMAT_VERSION,
            training_meta,
        }
    }

    pub fn model(&self) -> Result<CascadeModel> {
        CascadeModel::from_parameters(self.config, self.parameters.clone())
    }

    pub fn parameter_blob(&self) -> Vec<u8> {
        f32_to_le(&self.parameters)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: self.format_version,
            config: self.config,
            training_meta: self.training_meta.clone(),
            parameter_count: self.parameters.len(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header)?);
        out.push(b'\n');
        out.extend(self.parameter_blob());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Container {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic (expected CKPT1)".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header terminator".into()))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| bad(format!("invalid header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let blob = &rest[nl + 1..];
        if blob.len() != 4 * header.parameter_count {
            return Err(bad(format!(
                "parameter blob has {} bytes, expected {}",
                blob.len(),
                4 * header.parameter_count
            )));
        }
        let expected = header.config.parameter_count();
        if header.parameter_count != expected {
            return Err(bad(format!(
                "config implies {expected} parameters, header says {}",
                header.parameter_count
            )));
        }
        Ok(Self {
            config: header.config,
            parameters: le_to_f32(blob),
            format_version: header.format_version,
            training_meta: header.training_meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }
}
