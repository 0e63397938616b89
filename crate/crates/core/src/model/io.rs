//! Model checkpoints: parameters and normalization statistics in the tensor
//! checkpoint format, next to a JSON sidecar with the configuration.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use softcbm_tensor::{checkpoint, Tensor};

use super::config::BottleneckConfig;
use super::network::ConceptModel;
use super::train::TrainingHistory;
use crate::error::{CoreError, Result};

pub const SIDECAR_FORMAT: &str = "softcbm-model/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format: String,
    pub config: BottleneckConfig,
    pub history: TrainingHistory,
    #[serde(default)]
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

/// `model.scl` → `model.json`
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

impl ConceptModel {
    fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut entries: Vec<(String, Tensor)> = self.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        for (l, r) in self.running_stats().iter().enumerate() {
            let n = r.mean.len();
            entries.push((format!("bn{l}.running_mean"), Tensor::new(vec![n], r.mean.clone()).expect("1-d")));
            entries.push((format!("bn{l}.running_var"), Tensor::new(vec![n], r.var.clone()).expect("1-d")));
        }
        entries
    }

    pub fn sidecar(&self) -> ModelSidecar {
        ModelSidecar {
            format: SIDECAR_FORMAT.into(),
            config: self.config().clone(),
            history: self.history.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Writes the weights to `path` and the sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(path, &self.checkpoint_entries())?;
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: ModelSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        if sidecar.format != SIDECAR_FORMAT {
            return Err(CoreError::Config(format!("unsupported model format `{}`", sidecar.format)));
        }
        let mut model = ConceptModel::new(sidecar.config, 0)?;
        let mut entries: std::collections::HashMap<String, Tensor> = checkpoint::load(path)?.into_iter().collect();
        for p in model.params_mut().iter_mut() {
            let t = entries
                .remove(&p.name)
                .ok_or_else(|| CoreError::Data(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(CoreError::Data(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t;
        }
        for (l, r) in model.running_stats_mut().iter_mut().enumerate() {
            for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let name = format!("bn{l}.{suffix}");
                let t = entries.remove(&name).ok_or_else(|| CoreError::Data(format!("checkpoint lacks `{name}`")))?;
                if t.len() != dst.len() {
                    return Err(CoreError::Data(format!("`{name}` has {} entries, expected {}", t.len(), dst.len())));
                }
                *dst = t.into_data();
            }
        }
        if let Some(extra) = entries.keys().next() {
            return Err(CoreError::Data(format!("unexpected checkpoint entry `{extra}`")));
        }
        model.history = sidecar.history;
        model.provenance = sidecar.provenance;
        Ok(model)
    }
}
