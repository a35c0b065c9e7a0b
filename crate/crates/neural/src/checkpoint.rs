//! Self-describing checkpoint container.
//!
//! Layout: the 5 magic bytes `RPAC1`, a little-endian `u32` header length, a
//! JSON header `{config, vocab_hash, tensors: {name: {shape, offset}}}` and
//! then every tensor as little-endian `f32` in directory order. `offset` is
//! the byte offset of the tensor inside the data section.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{NeuralError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"RPAC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub vocab_hash: String,
    /// Directory order is parameter registration order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(config: Value, vocab_hash: impl Into<String>, store: &ParamStore<T>) -> Self {
        Self {
            config,
            vocab_hash: vocab_hash.into(),
            tensors: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.value(id).cast()))
                .collect(),
        }
    }

    /// Copies tensors into a store with the same names and shapes.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(NeuralError::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (id, (name, t)) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.tensors) {
            if store.name(id) != name {
                return Err(NeuralError::Format(format!(
                    "tensor `{name}` where `{}` expected",
                    store.name(id)
                )));
            }
            store.set(id, t.cast())?;
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut dir = Map::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let entry = TensorEntry {
                shape: t.shape().to_vec(),
                offset,
            };
            dir.insert(name.clone(), serde_json::to_value(entry)?);
            offset += 4 * t.len() as u64;
        }
        let mut header = Map::new();
        header.insert("config".into(), self.config.clone());
        header.insert("vocab_hash".into(), Value::String(self.vocab_hash.clone()));
        header.insert("tensors".into(), Value::Object(dir));
        let header = serde_json::to_vec(&Value::Object(header))?;
        let len = u32::try_from(header.len())
            .map_err(|_| NeuralError::Format("header too large".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(4 * t.len());
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NeuralError::Format("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: Value = serde_json::from_slice(&header)?;
        let config = header.get("config").cloned().unwrap_or(Value::Null);
        let vocab_hash = header
            .get("vocab_hash")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let dir = header
            .get("tensors")
            .and_then(Value::as_object)
            .ok_or_else(|| NeuralError::Format("missing tensor directory".into()))?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let mut tensors = Vec::with_capacity(dir.len());
        for (name, entry) in dir {
            let entry: TensorEntry = serde_json::from_value(entry.clone())?;
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            let bytes = data
                .get(start..end)
                .ok_or_else(|| NeuralError::Format(format!("tensor `{name}` truncated")))?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name.clone(), Tensor::new(entry.shape, values)?));
        }
        Ok(Self {
            config,
            vocab_hash,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
