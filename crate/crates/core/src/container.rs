//! Versioned model file.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `CAELOC\0\x01` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `h` (`u64`) |
//! | h     | JSON [`ContainerHeader`] |
//! | rest  | parameter payload |
//!
//! The payload holds every tensor back to back in layer order, and within a
//! layer in the order listed by the header. `f32` and `f16` values are stored
//! as little-endian IEEE bits, `i8` codes as single bytes. Each header entry
//! records the byte offset, element count, dtype and, for `i8`, the affine
//! `scale` and `zero_point`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::quant::QuantizedTensor;

pub const MAGIC: [u8; 8] = *b"CAELOC\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F16,
    I8,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::F32, Precision::F16, Precision::I8];

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F16 => "f16",
            Precision::I8 => "i8",
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "float32" => Ok(Precision::F32),
            "f16" | "float16" => Ok(Precision::F16),
            "i8" | "int8" => Ok(Precision::I8),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected f32, f16 or i8)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    I8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_point: Option<i32>,
}

/// Free-form description of how a model was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cell_length: f64,
    #[serde(default)]
    pub cae_epochs: usize,
    #[serde(default)]
    pub clf_epochs: usize,
    /// Classifier epochs actually run before early stopping.
    #[serde(default)]
    pub epochs_run: usize,
    /// Caller-supplied run configuration, embedded verbatim.
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub precision: Precision,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    #[serde(default)]
    pub grid_file: Option<String>,
    pub grid_digest: String,
    pub metadata: ModelMetadata,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub spec: LayerSpec,
    pub tensors: Vec<(String, QuantizedTensor)>,
}

/// A model in storage form: layer specs plus tensors at their stored precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub precision: Precision,
    pub input_shape: Vec<usize>,
    pub layers: Vec<StoredLayer>,
    pub class_count: usize,
    pub grid_file: Option<String>,
    pub grid_digest: String,
    pub metadata: ModelMetadata,
}

impl ModelFile {
    pub fn payload_bytes(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.tensors)
            .map(|(_, t)| t.byte_len())
            .sum()
    }

    pub fn header(&self) -> ContainerHeader {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            for (name, t) in &layer.tensors {
                let (scale, zero_point) = match t {
                    QuantizedTensor::I8 { scale, zero_point, .. } => (Some(*scale), Some(*zero_point)),
                    _ => (None, None),
                };
                tensors.push(TensorEntry {
                    layer: li,
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: t.dtype(),
                    offset,
                    count: t.len(),
                    scale,
                    zero_point,
                });
                offset += t.byte_len();
            }
        }
        ContainerHeader {
            precision: self.precision,
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
            class_count: self.class_count,
            grid_file: self.grid_file.clone(),
            grid_digest: self.grid_digest.clone(),
            metadata: self.metadata.clone(),
            tensors,
            payload_bytes: offset,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(20 + header.len() + self.payload_bytes());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.layers.iter().flat_map(|l| &l.tensors) {
            t.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || bytes[..8] != MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: ContainerHeader = serde_json::from_slice(&bytes[20..payload_start])?;
        let payload = &bytes[payload_start..];
        if payload.len() != header.payload_bytes {
            return Err(Error::Format(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }

        let mut layers: Vec<StoredLayer> = header
            .layers
            .iter()
            .map(|spec| StoredLayer {
                spec: spec.clone(),
                tensors: Vec::new(),
            })
            .collect();
        for entry in &header.tensors {
            let layer = layers
                .get_mut(entry.layer)
                .ok_or_else(|| Error::Format(format!("tensor `{}` names missing layer {}", entry.name, entry.layer)))?;
            let end = entry
                .count
                .checked_mul(entry.dtype.size())
                .and_then(|n| n.checked_add(entry.offset))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Format(format!("tensor `{}` overruns the payload", entry.name)))?;
            let tensor = QuantizedTensor::read_le(entry, &payload[entry.offset..end])?;
            layer.tensors.push((entry.name.clone(), tensor));
        }
        Ok(ModelFile {
            precision: header.precision,
            input_shape: header.input_shape,
            layers,
            class_count: header.class_count,
            grid_file: header.grid_file,
            grid_digest: header.grid_digest,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
