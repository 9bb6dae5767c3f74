//! Versioned JSON checkpoint: model configuration, run snapshot, every
//! parameter with its name, group and shape, optimizer moments, and the
//! epoch / score it was taken at.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TimesClip};
use crate::tensor::Group;
use crate::training::AdamW;

pub const FORMAT: &str = "timesclip-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    /// Resolved `key = value` run configuration.
    pub config: String,
    pub seed: u64,
    /// Epoch (1-based) whose parameters are stored.
    pub epoch: usize,
    pub best_score: f64,
    pub params: Vec<SavedParam>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn capture(model: &TimesClip, config: &str, seed: u64, epoch: usize, best_score: f64, optimizer: Option<&AdamW>) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| SavedParam {
                name: p.name.clone(),
                group: p.group,
                shape: p.array.shape().to_vec(),
                frozen: p.frozen,
                values: p.array.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            model: model.cfg.clone(),
            config: config.into(),
            seed,
            epoch,
            best_score,
            params,
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuild the model and load the stored values, checking names and shapes.
    pub fn restore(&self) -> Result<TimesClip> {
        let mut model = TimesClip::new(self.model.clone(), self.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, saved) in ids.into_iter().zip(&self.params) {
            let p = model.store.get_mut(id);
            if p.name != saved.name || p.array.shape() != saved.shape.as_slice() || p.group != saved.group {
                return Err(Error::Checkpoint(format!(
                    "layout mismatch: model `{}` {:?}, checkpoint `{}` {:?}",
                    p.name,
                    p.array.shape(),
                    saved.name,
                    saved.shape
                )));
            }
            if saved.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite values in `{}`", saved.name)));
            }
            p.array.data_mut().copy_from_slice(&saved.values);
            p.frozen = saved.frozen;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = TimesClip::new(ModelConfig::toy(32, 8, 2), 3).unwrap();
        let ck = Checkpoint::capture(&model, "run.seed = 3\n", 3, 4, 0.5, Some(&AdamW::new(&model.store)));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore().unwrap();
        for ((_, a), (_, b)) in restored.store.iter().zip(model.store.iter()) {
            assert_eq!(a.array, b.array);
        }
    }

    #[test]
    fn rejects_foreign_json() {
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
