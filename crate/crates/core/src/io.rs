//! The `MSVOL1` container.
//!
//! Layout: the ASCII magic `MSVOL1` followed by `\n`, one line of JSON
//! header terminated by `\n`, then the raw payload: every tensor listed in
//! the header, in order, as little-endian `f32`.
//!
//! The same container carries volumes, probability maps, label volumes,
//! model checkpoints and adaptation states; `kind` tells them apart.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, MultiSequenceVolume, ProbabilityMap};

pub const MAGIC: &[u8; 6] = b"MSVOL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub endianness: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    /// Free-form metadata (model config, counters, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl Header {
    pub fn new(kind: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_owned(),
            dtype: "f32".into(),
            endianness: "little".into(),
            tensors: Vec::new(),
            sequence_names: None,
            spacing: None,
            meta: serde_json::Value::Null,
        }
    }
}

/// A decoded container: header plus one flat buffer per tensor entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub payloads: Vec<Vec<f32>>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self { header: Header::new(kind), payloads: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.header.tensors.push(TensorEntry { name: name.into(), shape: shape.to_vec() });
        self.payloads.push(data);
    }

    pub fn get(&self, name: &str) -> Option<(&TensorEntry, &[f32])> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| (&self.header.tensors[i], self.payloads[i].as_slice()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` container, found `{}`",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header)
            .map_err(|e| Error::Format(format!("header encode: {e}")))?;
        let payload_len: usize = self.payloads.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 2 + payload_len * 4);
        out.extend_from_slice(MAGIC);
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for p in &self.payloads {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 1 || &bytes[..MAGIC.len()] != MAGIC || bytes[MAGIC.len()] != b'\n' {
            return Err(Error::Format("missing MSVOL1 magic".into()));
        }
        let rest = &bytes[MAGIC.len() + 1..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("unterminated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::Format(format!("header decode: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
        }
        if header.dtype != "f32" || header.endianness != "little" {
            return Err(Error::Format(format!(
                "unsupported payload encoding {}/{}",
                header.dtype, header.endianness
            )));
        }
        let payload = &rest[nl + 1..];
        let expected: usize = header.tensors.iter().map(|t| t.len() * 4).sum();
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let mut payloads = Vec::with_capacity(header.tensors.len());
        let mut offset = 0;
        for t in &header.tensors {
            let n = t.len() * 4;
            let buf = payload[offset..offset + n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payloads.push(buf);
            offset += n;
        }
        Ok(Self { header, payloads })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Single-tensor accessor used by the volume-like kinds.
    fn single_array4(&self, name: &str) -> Result<Array4<f32>> {
        let (entry, data) = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if entry.shape.len() != 4 {
            return Err(Error::Format(format!("tensor `{name}` is not 4-dimensional")));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data.to_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        arr.into_dimensionality().map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn save_volume(vol: &MultiSequenceVolume, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new("volume");
    c.header.sequence_names = Some(vol.sequence_names().to_vec());
    c.header.spacing = Some(vol.spacing());
    c.push("data", vol.data().shape(), vol.data().iter().copied().collect());
    c.save(path)
}

pub fn volume_from_container(c: &Container) -> Result<MultiSequenceVolume> {
    c.expect_kind("volume")?;
    let data = c.single_array4("data")?;
    let names = c
        .header
        .sequence_names
        .clone()
        .ok_or_else(|| Error::Format("volume header lacks sequence names".into()))?;
    let spacing = c.header.spacing.unwrap_or([1.0; 3]);
    MultiSequenceVolume::new(data, names, spacing).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<MultiSequenceVolume> {
    volume_from_container(&Container::load(path)?)
}

pub fn save_probabilities(p: &ProbabilityMap, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new("probabilities");
    c.header.spacing = Some(spacing);
    c.push("data", p.data().shape(), p.data().iter().copied().collect());
    c.save(path)
}

pub fn load_probabilities(path: impl AsRef<Path>) -> Result<(ProbabilityMap, [f64; 3])> {
    let c = Container::load(path)?;
    c.expect_kind("probabilities")?;
    let p = ProbabilityMap::new(c.single_array4("data")?).map_err(|e| Error::Format(e.to_string()))?;
    Ok((p, c.header.spacing.unwrap_or([1.0; 3])))
}

pub fn save_labels(labels: &LabelVolume, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new("labels");
    c.header.spacing = Some(spacing);
    c.header.meta = serde_json::json!({ "nested": labels.nested() });
    c.push("data", labels.data().shape(), labels.to_f32().iter().copied().collect());
    c.save(path)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(LabelVolume, [f64; 3])> {
    let c = Container::load(path)?;
    c.expect_kind("labels")?;
    let raw = c.single_array4("data")?;
    if raw.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Format("label payload is not binary".into()));
    }
    let nested = c.header.meta.get("nested").and_then(|v| v.as_bool()).unwrap_or(false);
    let labels = LabelVolume::new(raw.mapv(|v| v == 1.0), nested).map_err(|e| Error::Format(e.to_string()))?;
    Ok((labels, c.header.spacing.unwrap_or([1.0; 3])))
}
