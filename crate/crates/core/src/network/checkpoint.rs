//! Model checkpoints: a tensor container holding every parameter by name,
//! plus a JSON sidecar (`<stem>.json`) with the architecture, the init seed
//! and a creation timestamp. Only the sidecar varies between otherwise
//! identical saves.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::LsatConfig;
use super::model::LsatModel;
use crate::error::{Error, Result};
use crate::tensor::serialize;
use crate::tensor::{DType, StorageElement, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: LsatConfig,
    pub seed: u64,
    pub dtype: DType,
    pub created_unix_secs: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint<T: StorageElement>(model: &LsatModel<T>, path: &Path) -> Result<()> {
    let named: Vec<(&str, &Tensor<T>)> = model.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    serialize::save(path, &named)?;
    let meta = CheckpointMeta {
        config: model.config.clone(),
        seed: model.seed,
        dtype: T::DTYPE,
        created_unix_secs: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path: side,
        message: format!("invalid checkpoint sidecar: {e}"),
    })
}

/// Rebuilds the architecture from the sidecar and overwrites every parameter
/// with the stored value. Missing, extra or reshaped tensors are errors.
pub fn load_checkpoint<T: StorageElement>(path: &Path) -> Result<LsatModel<T>> {
    let meta = read_meta(path)?;
    let mut model = LsatModel::<T>::new(meta.config, meta.seed)?;
    let tensors = serialize::load::<T>(path)?;
    if tensors.len() != model.params.len() {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: format!(
                "checkpoint holds {} tensors, architecture expects {}",
                tensors.len(),
                model.params.len()
            ),
        });
    }
    for (name, value) in tensors {
        let id = model.params.id_of(&name).ok_or_else(|| Error::Data {
            path: path.to_path_buf(),
            message: format!("unknown parameter {name:?}"),
        })?;
        model.params.set_value(id, value).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            message: format!("parameter {name:?}: {e}"),
        })?;
    }
    Ok(model)
}
