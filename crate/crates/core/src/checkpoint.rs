//! Model checkpoints: config, vocabulary and parameters in one JSON file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex16, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiExitModel, Param};

const FORMAT: &str = "flexexit-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    params: Vec<Param>,
}

/// A trained model together with the vocabulary it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MultiExitModel,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = Stored {
            format: FORMAT.into(),
            version: VERSION,
            config: self.model.config().clone(),
            vocab: self.vocab.entries().to_vec(),
            params: self.model.params().to_vec(),
        };
        fs::write(path, serde_json::to_vec(&stored)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let stored: Stored = serde_json::from_slice(&bytes)?;
        if stored.format != FORMAT {
            return Err(Error::config(format!(
                "{} is not a checkpoint",
                path.display()
            )));
        }
        if stored.version != VERSION {
            return Err(Error::config(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                stored.version
            )));
        }
        let vocab = Vocab::from_tokens(stored.vocab);
        if vocab.len() != stored.config.vocab_size {
            return Err(Error::config(format!(
                "checkpoint vocabulary has {} entries but the model expects {}",
                vocab.len(),
                stored.config.vocab_size
            )));
        }
        Ok(Self {
            model: MultiExitModel::from_params(stored.config, stored.params)?,
            vocab,
        })
    }
}

/// Content hash of a model's config and weights (hex, 16 chars).
pub fn model_hash(model: &MultiExitModel) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("model serializes"));
    hex16(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskKind;

    fn sample() -> Checkpoint {
        let vocab = Vocab::from_tokens(vec!["a".into(), "b".into()]);
        let model = MultiExitModel::new(ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 8,
            vocab_size: vocab.len(),
            max_seq_len: 6,
            n_classes: 3,
            task_kind: TaskKind::Mlc,
            zero_init_heads: false,
            ..ModelConfig::default()
        })
        .unwrap();
        Checkpoint { model, vocab }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(model_hash(&back.model), model_hash(&ck.model));
    }

    #[test]
    fn version_and_corruption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        sample().save(&path).unwrap();
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":7");
        fs::write(&path, text).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Config(_))));

        fs::write(&path, "{not json").unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap_err().exit_code(), 2);
        assert_eq!(
            Checkpoint::load(&dir.path().join("none"))
                .unwrap_err()
                .exit_code(),
            3
        );
    }

    #[test]
    fn hash_changes_with_weights() {
        let mut ck = sample();
        let before = model_hash(&ck.model);
        ck.model.params_mut()[0].value.data_mut()[0] += 1e-9;
        assert_ne!(model_hash(&ck.model), before);
    }
}
