//! Checkpoint directory: one `LSTN` file per parameter buffer plus a JSON
//! manifest describing architecture, schedule and training provenance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DenoiserConfig, DiffusionError, Denoiser, NoiseSchedule, ScheduleParams};
use crate::numerics::Tensor;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub architecture: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub train_seed: u64,
    pub corpus_hash: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub train_seed: u64,
    pub corpus_hash: String,
}

fn io_err(path: &Path, e: std::io::Error) -> DiffusionError {
    DiffusionError::Checkpoint(format!("{}: {e}", path.display()))
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        let tensors = self
            .model
            .params()
            .into_iter()
            .zip(self.model.param_shapes())
            .map(|((name, _), shape)| TensorEntry {
                file: format!("{name}.lstn"),
                name,
                shape,
            })
            .collect();
        CheckpointManifest {
            architecture: self.model.config().clone(),
            schedule: self.schedule.params(),
            train_seed: self.train_seed,
            corpus_hash: self.corpus_hash.clone(),
            tensors,
        }
    }

    /// Writes every file into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<(), DiffusionError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = self.manifest();
        for ((_, data), entry) in self.model.params().into_iter().zip(&manifest.tensors) {
            let t = Tensor::new(entry.shape.clone(), data.to_vec())?;
            let path = dir.join(&entry.file);
            fs::write(&path, t.to_lstn_bytes()).map_err(|e| io_err(&path, e))?;
        }
        let path = dir.join(CHECKPOINT_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DiffusionError> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| DiffusionError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut buffers = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let p = dir.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
            let t = Tensor::from_lstn_bytes(&bytes)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(DiffusionError::Checkpoint(format!(
                    "{}: shape {:?} does not match manifest {:?}",
                    p.display(),
                    t.shape(),
                    entry.shape
                )));
            }
            buffers.push(t.into_data());
        }
        let model = Denoiser::from_params(manifest.architecture.clone(), buffers)?;
        let expected = model.param_shapes();
        let declared: Vec<Vec<usize>> = manifest.tensors.iter().map(|e| e.shape.clone()).collect();
        if expected != declared {
            return Err(DiffusionError::Checkpoint(
                "tensor shapes do not match the declared architecture".into(),
            ));
        }
        Ok(Self {
            model,
            schedule: NoiseSchedule::linear(manifest.schedule)?,
            train_seed: manifest.train_seed,
            corpus_hash: manifest.corpus_hash,
        })
    }

    /// SHA-256 over the manifest and every tensor file, in manifest order.
    pub fn content_hash(dir: &Path) -> Result<String, DiffusionError> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&text)
            .map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        let mut h = Sha256::new();
        h.update(&text);
        for entry in &manifest.tensors {
            let p = dir.join(&entry.file);
            h.update(fs::read(&p).map_err(|e| io_err(&p, e))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
