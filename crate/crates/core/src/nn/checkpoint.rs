//! Versioned JSON checkpoints. Parameter arrays are stored as base64 of
//! little-endian `f64` values.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::model::{ModelSpec, SequenceModel};
use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    hyperparameters: ModelSpec,
    parameters: Vec<NamedArray>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    shape: [usize; 2],
    data: String,
}

fn encode(m: &Matrix) -> String {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for v in &m.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn checkpoint_to_string(model: &SequenceModel) -> String {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        hyperparameters: model.spec,
        parameters: model
            .params()
            .into_iter()
            .map(|(name, m)| NamedArray {
                name,
                shape: [m.rows, m.cols],
                data: encode(m),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serializes")
}

pub fn checkpoint_from_str(text: &str) -> Result<SequenceModel, NnError> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut model = SequenceModel::zeros(file.hyperparameters)?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    if names.len() != file.parameters.len() {
        return Err(NnError::Checkpoint(format!(
            "expected {} parameter arrays, found {}",
            names.len(),
            file.parameters.len()
        )));
    }
    for ((slot, name), stored) in model.params_mut().into_iter().zip(&names).zip(&file.parameters) {
        if &stored.name != name || stored.shape != [slot.rows, slot.cols] {
            return Err(NnError::Checkpoint(format!(
                "parameter `{}` {:?} does not match expected `{name}` {:?}",
                stored.name,
                stored.shape,
                [slot.rows, slot.cols]
            )));
        }
        let bytes = STANDARD
            .decode(&stored.data)
            .map_err(|e| NnError::Checkpoint(format!("{name}: {e}")))?;
        if bytes.len() != slot.len() * 8 {
            return Err(NnError::Checkpoint(format!(
                "{name}: {} bytes for {} values",
                bytes.len(),
                slot.len()
            )));
        }
        for (v, chunk) in slot.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SequenceModel, path: &Path) -> Result<(), NnError> {
    std::fs::write(path, checkpoint_to_string(model))
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<SequenceModel, NnError> {
    let text = std::fs::read_to_string(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{HeadKind, ModelInput};

    fn model() -> SequenceModel {
        SequenceModel::init(
            ModelSpec {
                input: ModelInput::Tokens {
                    vocab_size: 5,
                    embedding_dim: 3,
                },
                hidden_size: 4,
                num_layers: 2,
                num_directions: 2,
                output_dim: 5,
                head: HeadKind::Classification,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back = checkpoint_from_str(&checkpoint_to_string(&m)).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = checkpoint_to_string(&model()).replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(checkpoint_from_str(&text), Err(NnError::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn truncated_file_rejected() {
        let text = checkpoint_to_string(&model());
        assert!(checkpoint_from_str(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }
}
