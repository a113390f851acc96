//! Checkpoint container.
//!
//! Layout on disk:
//!
//! ```text
//! [u64 LE: header length H][H bytes UTF-8 JSON header][payload]
//! ```
//!
//! The header is `{"config": {...}, "metadata": {...}, "tensors": {name:
//! {"shape": [...], "offset": o, "length": n}}}` where `offset` and `length`
//! are in bytes relative to the start of the payload. The payload is the
//! concatenation of little-endian `f32` tensors in header (name) order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture metadata for a decoder-only transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidModelConfig(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_ff == 0 {
            return bad("d_ff must be at least 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.max_seq == 0 {
            return bad("max_seq must be at least 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every tensor name the architecture requires, with its shape.
    pub fn required_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let (d, dm) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("emb.E".to_string(), vec![self.vocab_size, d]),
            ("emb.pos".to_string(), vec![self.max_seq, d]),
        ];
        for i in 0..self.n_layers {
            for p in ["g", "b"] {
                out.push((format!("layer.{i}.ln1.{p}"), vec![d]));
            }
            for p in ["q", "k", "v", "o"] {
                out.push((format!("layer.{i}.attn.{p}"), vec![d, d]));
            }
            for p in ["g", "b"] {
                out.push((format!("layer.{i}.ln2.{p}"), vec![d]));
            }
            out.push((ffn_key_name(i), vec![d, dm]));
            out.push((ffn_value_name(i), vec![dm, d]));
        }
        out
    }
}

pub fn ffn_key_name(layer: usize) -> String {
    format!("layer.{layer}.ffn.K")
}

pub fn ffn_value_name(layer: usize) -> String {
    format!("layer.{layer}.ffn.V")
}

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::named("<tensor>", shape, data)
    }

    fn named(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidTensor {
                name: name.into(),
                reason: format!("shape {shape:?} has a zero extent"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor {
                name: name.into(),
                reason: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { name: name.into(), index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    metadata: BTreeMap<String, Value>,
    tensors: BTreeMap<String, Entry>,
}

/// A validated set of model tensors plus free-form metadata (edit
/// provenance and the like).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMap {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, Value>,
}

impl TensorMap {
    /// Builds a map, checking that exactly the required tensors are present
    /// with the required shapes and finite values.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let map = Self { config, tensors, metadata: BTreeMap::new() };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let required = self.config.required_tensors();
        for (name, shape) in &required {
            let t = self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape != *shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
            if let Some(index) = t.data.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { name: name.clone(), index });
            }
        }
        if self.tensors.len() != required.len() {
            let known: std::collections::BTreeSet<&str> =
                required.iter().map(|(n, _)| n.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|n| !known.contains(n.as_str())) {
                return Err(Error::UnexpectedTensor(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Replaces the data of an existing tensor; shape and finiteness are
    /// checked.
    pub fn set_data(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let t = self.tensors.get_mut(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
        *t = Tensor::named(name, t.shape.clone(), data)?;
        Ok(())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn metadata(&self) -> &BTreeMap<String, Value> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, Value> {
        &mut self.metadata
    }

    /// Serializes to the container byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = 4 * t.data.len() as u64;
            entries.insert(name.clone(), Entry { shape: t.shape.clone(), offset, length });
            offset += length;
        }
        let header = Header { config: self.config, metadata: self.metadata.clone(), tensors: entries };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader("file shorter than the 8-byte length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let hend = 8u64
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "header length {hlen} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;
        let text = std::str::from_utf8(&bytes[8..hend])
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::MalformedHeader(format!("header JSON: {e}")))?;
        let payload = &bytes[hend..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.length != 4 * n as u64 {
                return Err(Error::MalformedHeader(format!(
                    "tensor `{name}`: length {} does not match shape {:?}",
                    e.length, e.shape
                )));
            }
            let end = e.offset.checked_add(e.length).ok_or_else(|| {
                Error::MalformedHeader(format!("tensor `{name}`: offset overflow"))
            })?;
            if end > payload.len() as u64 {
                return Err(Error::Truncated { name, end, available: payload.len() as u64 });
            }
            let raw = &payload[e.offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::named(&name, e.shape, data)?;
            tensors.insert(name, t);
        }
        let map = Self { config: header.config, tensors, metadata: header.metadata };
        map.validate()?;
        Ok(map)
    }

    /// SHA-256 of the serialized container, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorMap::from_bytes(&bytes)
}

pub fn save_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = map.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 4, d_ff: 3, vocab_size: 5, n_heads: 2, max_seq: 6 }
    }

    fn toy_map() -> TensorMap {
        let cfg = toy_config();
        let mut tensors = BTreeMap::new();
        for (k, (name, shape)) in cfg.required_tensors().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|i| ((i * 7 + k) % 11) as f32 * 0.125 - 0.5).collect();
            tensors.insert(name.clone(), Tensor::new(shape, data).unwrap());
        }
        TensorMap::new(cfg, tensors).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let map = toy_map();
        assert_eq!(map.tensors().len(), 2 + 2 * 10);
        let bytes = map.to_bytes().unwrap();
        let back = TensorMap::from_bytes(&bytes).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = toy_map().to_bytes().unwrap();
        let err = TensorMap::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("payload shorter than header declares"), "{err}");
    }

    #[test]
    fn missing_tensor_is_named() {
        let map = toy_map();
        let mut tensors = map.tensors().clone();
        tensors.remove("layer.1.ffn.V");
        let err = TensorMap::new(*map.config(), tensors).unwrap_err();
        assert!(matches!(err, Error::MissingTensor(ref n) if n == "layer.1.ffn.V"));
    }

    #[test]
    fn shape_and_value_errors() {
        let map = toy_map();
        let mut tensors = map.tensors().clone();
        tensors.insert("emb.E".into(), Tensor::zeros(vec![4, 4]));
        assert!(matches!(TensorMap::new(*map.config(), tensors), Err(Error::ShapeMismatch { .. })));

        let mut m2 = map.clone();
        let mut data = m2.get("emb.pos").unwrap().data().to_vec();
        data[3] = f32::NAN;
        let err = m2.set_data("emb.pos", data).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref name, index: 3 } if name == "emb.pos"));

        let mut tensors = map.tensors().clone();
        tensors.insert("extra".into(), Tensor::zeros(vec![1]));
        assert!(matches!(TensorMap::new(*map.config(), tensors), Err(Error::UnexpectedTensor(_))));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(TensorMap::from_bytes(&[1, 2]), Err(Error::MalformedHeader(_))));
        let mut bytes = 100u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(TensorMap::from_bytes(&bytes), Err(Error::MalformedHeader(_))));
        let mut bytes = 2u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(TensorMap::from_bytes(&bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn metadata_survives_round_trip() {
        let mut map = toy_map();
        map.metadata_mut().insert("edit".into(), serde_json::json!({"layer_start": 1}));
        let back = TensorMap::from_bytes(&map.to_bytes().unwrap()).unwrap();
        assert_eq!(back.metadata()["edit"]["layer_start"], 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_config();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config();
        cfg.vocab_size = 1;
        assert!(cfg.validate().is_err());
    }
}
