//! Named-tensor checkpoint file.
//!
//! Layout: a little-endian `u64` giving the byte length of a JSON index, the
//! index itself, then the tensors as raw little-endian `f64` data. The index is
//! `{"meta": <any JSON>, "tensors": {name: {"offset", "shape", "dtype"}}}`
//! with offsets in bytes from the start of the data section. External
//! backbones can be converted in by writing the same layout with the
//! encoder's parameter names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::Params;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn encode(meta: &serde_json::Value, params: &Params) -> Vec<u8> {
    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        tensors.insert(
            name.clone(),
            TensorEntry {
                offset,
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            },
        );
        offset += 8 * t.len() as u64;
    }
    let index = serde_json::to_vec(&Index {
        meta: meta.clone(),
        tensors,
    })
    .expect("index serializes");
    let mut out = Vec::with_capacity(8 + index.len() + offset as usize);
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    for (_, t) in params.iter() {
        for &x in t.as_standard_layout().iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(serde_json::Value, Params)> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 8 {
        return Err(bad("file shorter than its header".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(format!("index length {n} exceeds file")))?;
    let index: Index =
        serde_json::from_slice(&bytes[8..data_start]).map_err(|e| bad(format!("bad index: {e}")))?;
    let data = &bytes[data_start..];
    let mut params = Params::new();
    for (name, e) in index.tensors {
        if e.dtype != "f64" {
            return Err(bad(format!("tensor `{name}` has unsupported dtype {}", e.dtype)));
        }
        let len: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * len;
        if end > data.len() {
            return Err(bad(format!("tensor `{name}` runs past the end of the file")));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_shape_vec(IxDyn(&e.shape), values).expect("sized");
        params.insert(name, t);
    }
    Ok((index.meta, params))
}

pub fn save(path: &Path, meta: &serde_json::Value, params: &Params) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(meta, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(serde_json::Value, Params)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
