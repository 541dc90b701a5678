//! Checkpoint layout: the 8-byte magic `HISTOCK1`, a little-endian `u64`
//! header length, the JSON header, then every parameter as little-endian
//! `f64` in canonical order. Offsets in the header are byte offsets into
//! the data section.

use std::path::Path;

use cbamnet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{Model, Network};
use crate::error::{data_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HISTOCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Free-form run information, e.g. the resolved run configuration.
    pub metadata: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config_hash: String,
    pub metadata: serde_json::Value,
}

pub fn encode_checkpoint(
    model: &Model,
    config_hash: &str,
    metadata: &serde_json::Value,
) -> Vec<u8> {
    let mut params = Vec::new();
    let mut data = Vec::new();
    model.params.map(&mut |name, t| {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
            len: t.len(),
        });
        data.extend_from_slice(&t.to_le_bytes());
    });
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed: model.config.seed,
        config_hash: config_hash.to_string(),
        metadata: metadata.clone(),
        params,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

/// Parses and validates a checkpoint against the shapes its own config
/// implies. Any inconsistency is a data error.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return data_err("not a checkpoint (bad magic)");
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let Some(data_start) = usize::try_from(hlen).ok().and_then(|h| h.checked_add(16)) else {
        return data_err("checkpoint header length overflows");
    };
    if data_start > bytes.len() {
        return data_err("checkpoint truncated inside header");
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let data = &bytes[data_start..];
    let template = Network::zeros(&header.config)
        .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let expected = template.named();
    if expected.len() != header.params.len() {
        return data_err(format!(
            "checkpoint lists {} parameters, config implies {}",
            header.params.len(),
            expected.len()
        ));
    }
    let mut end = 0;
    for ((name, t), entry) in expected.iter().zip(&header.params) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() || entry.len != t.len() {
            return data_err(format!(
                "checkpoint parameter {} does not match {name} {:?}",
                entry.name,
                t.shape()
            ));
        }
        if entry.offset != end {
            return data_err(format!(
                "checkpoint parameter {} is not contiguous",
                entry.name
            ));
        }
        end += 8 * entry.len;
    }
    if end != data.len() {
        return data_err(format!(
            "checkpoint data is {} bytes, manifest needs {end}",
            data.len()
        ));
    }
    let mut entries = header.params.iter();
    let mut failure = None;
    let params = template.map(&mut |_, t| {
        let e = entries.next().expect("validated count");
        match Tensor::from_le_bytes(t.shape(), &data[e.offset..e.offset + 8 * e.len]) {
            Ok(v) => v,
            Err(err) => {
                failure.get_or_insert(err);
                t.clone()
            }
        }
    });
    if let Some(err) = failure {
        return data_err(format!("checkpoint data: {err}"));
    }
    Ok(Checkpoint {
        model: Model {
            config: header.config,
            params,
        },
        config_hash: header.config_hash,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    config_hash: &str,
    metadata: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, config_hash, metadata))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::backbone::build_model;

    #[test]
    fn round_trip_is_bitwise() {
        for attention in [
            AttentionKind::None,
            AttentionKind::Cbam,
            AttentionKind::SelfAttention,
            AttentionKind::Deformable,
        ] {
            let cfg = ModelConfig {
                attention,
                seed: 5,
                ..ModelConfig::default()
            };
            let m = build_model(&cfg).unwrap();
            let meta = serde_json::json!({"note": "x"});
            let bytes = encode_checkpoint(&m, "abc", &meta);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back.model, m);
            assert_eq!(back.config_hash, "abc");
            assert_eq!(back.metadata, meta);
            assert_eq!(encode_checkpoint(&back.model, "abc", &meta), bytes);
        }
    }

    #[test]
    fn corruption_is_a_data_error() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let bytes = encode_checkpoint(&m, "h", &serde_json::Value::Null);
        for bad in [
            b"garbage".to_vec(),
            bytes[..bytes.len() - 8].to_vec(),
            [&bytes[..], &[0u8; 8]].concat(),
            {
                let mut b = bytes.clone();
                b[20] ^= 0xff;
                b
            },
        ] {
            assert!(matches!(decode_checkpoint(&bad), Err(Error::Data(_))));
        }
    }
}
