//! Versioned checkpoint container: named tensors (bit-exact f64 bytes,
//! base64) plus the model shape, schema, vocabulary, and an opaque run-config
//! snapshot.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::codec::{DomainSchema, Schema};
use crate::corpus::Vocabulary;
use crate::error::{CreditError, Result};
use crate::model::{CreditModel, ModelMeta};
use crate::tape::ParamId;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    meta: ModelMeta,
    schema: Vec<DomainSchema>,
    vocab: Vec<String>,
    /// Run-configuration snapshot; opaque here, round-tripped for provenance.
    config: serde_json::Value,
    tensors: Vec<NamedTensor>,
}

fn encode_tensor(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_tensor(rows: usize, cols: usize, data: &str) -> Result<Tensor> {
    let bytes = B64
        .decode(data)
        .map_err(|e| CreditError::Checkpoint(format!("bad tensor payload: {e}")))?;
    if bytes.len() != rows * cols * 8 {
        return Err(CreditError::Checkpoint(format!(
            "tensor payload is {} bytes, expected {}",
            bytes.len(),
            rows * cols * 8
        )));
    }
    let vals = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Tensor::from_vec(rows, cols, vals))
}

pub fn save_checkpoint(path: &Path, model: &CreditModel, config: serde_json::Value) -> Result<()> {
    let tensors = model
        .params
        .iter()
        .map(|(_, name, t)| NamedTensor {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            data: encode_tensor(t),
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        meta: model.meta.clone(),
        schema: model.schema.domains.clone(),
        vocab: model.vocab.tokens().to_vec(),
        config,
        tensors,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CreditModel, serde_json::Value)> {
    let bytes = std::fs::read(path)
        .map_err(|e| CreditError::Checkpoint(format!("{}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CreditError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    let schema = Schema::new(file.schema)?;
    let vocab = Vocabulary::from_tokens(file.vocab)?;
    let mut model = CreditModel::new(file.meta, schema, vocab, 0)?;
    if file.tensors.len() != model.params.len() {
        return Err(CreditError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            file.tensors.len(),
            model.params.len()
        )));
    }
    for (i, nt) in file.tensors.iter().enumerate() {
        let id = ParamId(i);
        if model.params.name(id) != nt.name {
            return Err(CreditError::Checkpoint(format!(
                "tensor {i} is {:?}, expected {:?}",
                nt.name,
                model.params.name(id)
            )));
        }
        let t = decode_tensor(nt.rows, nt.cols, &nt.data)?;
        if t.shape() != model.params.get(id).shape() {
            return Err(CreditError::Checkpoint(format!("tensor {} shape mismatch", nt.name)));
        }
        *model.params.get_mut(id) = t;
    }
    Ok((model, file.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Dialogue;
    use crate::model::DecodeOptions;

    #[test]
    fn roundtrip_is_bit_identical() {
        let schema = Schema::new(vec![DomainSchema {
            domain: "hotel".into(),
            slots: vec!["area".into()],
        }])
        .unwrap();
        let empty: Vec<Dialogue> = Vec::new();
        let vocab = Vocabulary::build(&[&empty], &schema, 64);
        let meta = ModelMeta { d_emb: 5, d_h: 3, ..ModelMeta::default() };
        let model = CreditModel::new(meta, schema, vocab, 99).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &model, serde_json::json!({"note": "test"})).unwrap();
        let (loaded, config) = load_checkpoint(&path).unwrap();
        assert_eq!(config["note"], "test");
        assert_eq!(loaded.params, model.params);

        // bit-identical forward pass on a fixed input
        let utts = vec![vec![4, 5, 6]];
        let a = model.predict(&utts, &DecodeOptions::default());
        let b = loaded.predict(&utts, &DecodeOptions::default());
        assert_eq!(a.state_tokens, b.state_tokens);
        assert_eq!(a.decoder_passes, b.decoder_passes);
    }

    #[test]
    fn corrupted_payloads_are_rejected() {
        let err = decode_tensor(2, 2, "AAAA").unwrap_err();
        assert!(matches!(err, CreditError::Checkpoint(_)));
    }
}
