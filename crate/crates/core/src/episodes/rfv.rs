//! The RFV volume file format and the on-disk dataset layout.
//!
//! An RFV file is one line of UTF-8 JSON,
//! `{"dims":[D,H,W],"dtype":"f32","fields":["voxels","labels"]}`, a newline,
//! then each field as raw little-endian data in the listed order: `voxels`
//! as float32, `labels` and `clusters` as int32. Pseudo-mask files use
//! `"dtype":"i32"` with the single field `clusters`.
//!
//! A dataset directory holds `manifest.json` and one directory per patient
//! containing `volume.rfv` and optionally `pseudo.rfv`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::supervoxel::PseudoMaskSet;
use super::volume::{SynthParams, VolumeAdapter, VolumeScan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    dtype: String,
    fields: Vec<String>,
}

fn encode(header: &Header, payload: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    payload(&mut out);
    out
}

fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    Ok((header, &bytes[nl + 1..]))
}

fn read_f32(data: &[u8], n: usize) -> Vec<f32> {
    data[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_i32(data: &[u8], n: usize) -> Vec<i32> {
    data[..4 * n]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn encode_volume(v: &VolumeScan) -> Vec<u8> {
    let (d, h, w) = v.dims();
    let header = Header {
        dims: [d, h, w],
        dtype: "f32".into(),
        fields: vec!["voxels".into(), "labels".into()],
    };
    encode(&header, |out| {
        out.reserve(8 * d * h * w);
        for &x in v.voxels.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &l in v.labels.iter() {
            out.extend_from_slice(&l.to_le_bytes());
        }
    })
}

pub fn decode_volume(bytes: &[u8], path: &Path, patient_id: &str) -> Result<VolumeScan> {
    let (header, data) = split_header(bytes, path)?;
    if header.dtype != "f32" || header.fields != ["voxels", "labels"] {
        return Err(Error::format(
            path,
            format!("unsupported layout {:?}/{:?}", header.dtype, header.fields),
        ));
    }
    let [d, h, w] = header.dims;
    let n = d * h * w;
    if data.len() != 8 * n {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {}", data.len(), 8 * n),
        ));
    }
    let voxels = Array3::from_shape_vec((d, h, w), read_f32(data, n)).expect("sized");
    let labels = Array3::from_shape_vec((d, h, w), read_i32(&data[4 * n..], n)).expect("sized");
    VolumeScan::new(voxels, labels, patient_id, "rfv")
}

pub fn encode_pseudo(p: &PseudoMaskSet) -> Vec<u8> {
    let (d, h, w) = p.clusters.dim();
    let header = Header {
        dims: [d, h, w],
        dtype: "i32".into(),
        fields: vec!["clusters".into()],
    };
    encode(&header, |out| {
        for &c in p.clusters.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    })
}

pub fn decode_pseudo(bytes: &[u8], path: &Path, volume_ref: &str) -> Result<PseudoMaskSet> {
    let (header, data) = split_header(bytes, path)?;
    if header.dtype != "i32" || header.fields != ["clusters"] {
        return Err(Error::format(path, "not a pseudo-mask file"));
    }
    let [d, h, w] = header.dims;
    let n = d * h * w;
    if data.len() != 4 * n {
        return Err(Error::format(path, "truncated cluster payload"));
    }
    let clusters = Array3::from_shape_vec((d, h, w), read_i32(data, n)).expect("sized");
    PseudoMaskSet::from_clusters(volume_ref, clusters)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, v: &VolumeScan) -> Result<()> {
    write(path, &encode_volume(v))
}

pub fn read_volume(path: &Path, patient_id: &str) -> Result<VolumeScan> {
    decode_volume(&read(path)?, path, patient_id)
}

pub fn write_pseudo(path: &Path, p: &PseudoMaskSet) -> Result<()> {
    write(path, &encode_pseudo(p))
}

pub fn read_pseudo(path: &Path, volume_ref: &str) -> Result<PseudoMaskSet> {
    decode_pseudo(&read(path)?, path, volume_ref)
}

/// Reads native RFV files.
pub struct RfvAdapter;

impl VolumeAdapter for RfvAdapter {
    fn load(&self, path: &Path, patient_id: &str) -> Result<VolumeScan> {
        read_volume(path, patient_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: i32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub patients: Vec<String>,
    pub classes: Vec<ClassInfo>,
    pub dims: [usize; 3],
    pub seed: u64,
    pub granularity: usize,
    pub modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthParams>,
}

impl Manifest {
    pub fn class_name(&self, id: i32) -> String {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.clone())
            .unwrap_or_else(|| format!("class_{id}"))
    }
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

pub fn volume_path(root: &Path, patient: &str) -> PathBuf {
    root.join(patient).join("volume.rfv")
}

pub fn pseudo_path(root: &Path, patient: &str) -> PathBuf {
    root.join(patient).join("pseudo.rfv")
}

pub fn write_manifest(root: &Path, m: &Manifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(m)?;
    bytes.push(b'\n');
    write(&manifest_path(root), &bytes)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = manifest_path(root);
    serde_json::from_slice(&read(&path)?).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::volume::generate_synthetic_volume;

    #[test]
    fn header_is_exact() {
        let v = generate_synthetic_volume(1, &SynthParams::cube(16, 1), "p").unwrap();
        let bytes = encode_volume(&v);
        let line = br#"{"dims":[16,16,16],"dtype":"f32","fields":["voxels","labels"]}"#;
        assert_eq!(&bytes[..line.len()], line);
        assert_eq!(bytes[line.len()], b'\n');
        assert_eq!(bytes.len(), line.len() + 1 + 8 * 16 * 16 * 16);
    }

    #[test]
    fn byte_exact_round_trip() {
        let v = generate_synthetic_volume(3, &SynthParams::cube(16, 2), "p").unwrap();
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes, Path::new("mem"), "p").unwrap();
        assert_eq!(back.voxels, v.voxels);
        assert_eq!(back.labels, v.labels);
        assert_eq!(encode_volume(&back), bytes);
    }

    #[test]
    fn rejects_truncated_and_bad_headers() {
        let v = generate_synthetic_volume(3, &SynthParams::cube(16, 1), "p").unwrap();
        let bytes = encode_volume(&v);
        assert!(decode_volume(&bytes[..bytes.len() - 1], Path::new("m"), "p").is_err());
        assert!(decode_volume(b"not json\n", Path::new("m"), "p").is_err());
        assert!(decode_volume(b"no newline", Path::new("m"), "p").is_err());
    }
}
