//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"BTSEGCKP" | u32 version | u64 header_len | header JSON | f64 payload
//! ```
//!
//! The JSON header carries the model spec, the training step, the config
//! fingerprint and a table of named tensors; the payload holds the tensors
//! back to back in table order as raw `f64`, so values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, SegModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BTSEGCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_spec: ModelSpec,
    pub step: usize,
    pub config_fingerprint: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_spec: ModelSpec,
    step: usize,
    config_fingerprint: String,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Parameters (keyed by module path) and buffers of `model`.
    pub fn from_model(model: &SegModel, step: usize, config_fingerprint: &str) -> Self {
        let p = model.params();
        let mut tensors: Vec<NamedTensor> = p
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: p.values()[e.range()].to_vec(),
            })
            .collect();
        for (name, data) in model.buffers() {
            tensors.push(NamedTensor {
                name,
                shape: vec![data.len()],
                data,
            });
        }
        Self {
            model_spec: model.spec().clone(),
            step,
            config_fingerprint: config_fingerprint.to_string(),
            tensors,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model and overwrites every parameter and buffer.
    pub fn restore_model(&self) -> Result<SegModel> {
        let mut model = SegModel::new(self.model_spec.clone())?;
        let entries = model.params().entries().to_vec();
        for e in entries {
            let t = self
                .get(&e.name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {}", e.name)))?;
            if t.shape != e.shape {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} in model",
                    e.name, t.shape, e.shape
                )));
            }
            model.params_mut().values_mut()[e.range()].copy_from_slice(&t.data);
        }
        for (name, _) in model.buffers() {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks buffer {name}")))?;
            model.set_buffer(&name, &t.data)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model_spec: self.model_spec.clone(),
            step: self.step,
            config_fingerprint: self.config_fingerprint.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorRecord {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut cursor = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for rec in header.tensors {
            let n: usize = rec.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + n * 8)
                .ok_or_else(|| bad(&format!("truncated tensor {}", rec.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor += n * 8;
            tensors.push(NamedTensor {
                name: rec.name,
                shape: rec.shape,
                data,
            });
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            model_spec: header.model_spec,
            step: header.step,
            config_fingerprint: header.config_fingerprint,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProjectorMode;
    use ndarray::Array2;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = SegModel::new(crate::model::ModelSpec::default()).unwrap();
        let x = Array2::from_shape_fn((4, 48), |(i, j)| ((i * 7 + j) as f64).sin());
        model.project(&x, ProjectorMode::Train).unwrap();
        let mut ck = Checkpoint::from_model(&model, 17, "abc");
        ck.push("extra", vec![3], vec![0.1, -0.0, f64::MIN_POSITIVE]);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore_model().unwrap();
        assert_eq!(restored.params(), model.params());
        assert_eq!(restored.buffers(), model.buffers());
        assert_eq!(back.get("extra").unwrap().data[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope", Path::new("x")).is_err());
        let model = SegModel::new(crate::model::ModelSpec::default()).unwrap();
        let mut bytes = Checkpoint::from_model(&model, 0, "").to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
