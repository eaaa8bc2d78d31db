//! JSON checkpoints. Writes go through a temporary file in the target
//! directory and are renamed into place, so a crash never leaves a truncated
//! checkpoint behind.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LanguageModel, LoraConfig, ModelConfig};
use crate::packing::Regime;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "vulnlab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    format: String,
    version: u32,
    config: ModelConfig,
    lora: Option<LoraConfig>,
    regime: Option<Regime>,
    tensors: Vec<StoredTensor>,
}

/// A loaded checkpoint: the model plus the regime it was trained under, if
/// recorded.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: LanguageModel,
    pub regime: Option<Regime>,
}

pub fn to_json(model: &LanguageModel, regime: Option<Regime>) -> Result<String> {
    let stored = Stored {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config().clone(),
        lora: model.lora().cloned(),
        regime,
        tensors: model
            .params()
            .iter()
            .map(|(name, p)| StoredTensor {
                name: name.to_string(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
                data: p.tensor.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&stored)?)
}

pub fn from_json(text: &str) -> Result<Checkpoint> {
    let stored: Stored =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if stored.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", stored.format)));
    }
    if stored.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", stored.version)));
    }
    let mut params = ParamStore::new();
    for t in stored.tensors {
        let tensor = Tensor::new(t.shape, t.data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", t.name)))?;
        params.insert(t.name, tensor, t.trainable);
    }
    let model = LanguageModel::from_parts(stored.config, stored.lora, params)?;
    Ok(Checkpoint {
        model,
        regime: stored.regime,
    })
}

pub fn save(path: &Path, model: &LanguageModel, regime: Option<Regime>) -> Result<()> {
    let json = to_json(model, regime)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(json.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    from_json(&text)
}
