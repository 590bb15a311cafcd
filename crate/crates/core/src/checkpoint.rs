//! Named-tensor checkpoint container.
//!
//! Layout: a UTF-8 text header followed by raw little-endian tensor bytes.
//!
//! ```text
//! DUPLEXKIT-CKPT 1
//! tensors <n>
//! <name>\t<dtype>\t<d0>x<d1>...\t<byte offset>\t<role>
//! ...
//! end
//! <data>
//! ```
//!
//! Offsets are relative to the first data byte. Roles are optional metadata
//! (`-` when unassigned).

use std::fmt::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &str = "DUPLEXKIT-CKPT 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: data ends at byte {end}, file holds {len}")]
    Truncated { name: String, end: usize, len: usize },
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("tensor {name}: shape {shape:?} needs {expected} values, got {got}")]
    ShapeMismatch { name: String, shape: Vec<usize>, expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len() * self.dtype().size()];
        match self {
            TensorData::F32(v) => LittleEndian::write_f32_into(v, &mut out),
            TensorData::F64(v) => LittleEndian::write_f64_into(v, &mut out),
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Option<String>,
    pub data: TensorData,
}

impl NamedTensor {
    /// Hex SHA-256 of the tensor's little-endian bytes.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.data.to_le_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, tensor: NamedTensor) -> Result<(), CheckpointError> {
        let expected: usize = tensor.shape.iter().product();
        if expected != tensor.data.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: tensor.name,
                shape: tensor.shape,
                expected,
                got: tensor.data.len(),
            });
        }
        if self.get(&tensor.name).is_some() {
            return Err(CheckpointError::Duplicate(tensor.name));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        writeln!(header, "{MAGIC}").unwrap();
        writeln!(header, "tensors {}", self.tensors.len()).unwrap();
        let mut offset = 0;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            writeln!(
                header,
                "{}\t{}\t{}\t{}\t{}",
                t.name,
                t.data.dtype().name(),
                dims.join("x"),
                offset,
                t.role.as_deref().unwrap_or("-")
            )
            .unwrap();
            offset += t.data.len() * t.data.dtype().size();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for t in &self.tensors {
            out.extend_from_slice(&t.data.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Header(m.to_string());
        let end_marker = find_subslice(bytes, b"\nend\n").ok_or_else(|| bad("missing end line"))?;
        let header = std::str::from_utf8(&bytes[..end_marker]).map_err(|_| bad("header is not UTF-8"))?;
        let data = &bytes[end_marker + 5..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("bad magic"));
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("tensors "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing tensor count"))?;
        let mut ckpt = Checkpoint::default();
        for line in lines.by_ref().take(n) {
            let f: Vec<&str> = line.split('\t').collect();
            let [name, dtype, dims, offset, role] = f.as_slice() else {
                return Err(bad(&format!("bad tensor line {line:?}")));
            };
            let dtype = match *dtype {
                "f32" => DType::F32,
                "f64" => DType::F64,
                other => return Err(bad(&format!("unknown dtype {other}"))),
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(&format!("bad shape {dims}"))))
                .collect::<Result<_, _>>()?;
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            let count: usize = shape.iter().product();
            let end = offset + count * dtype.size();
            if end > data.len() {
                return Err(CheckpointError::Truncated { name: name.to_string(), end, len: data.len() });
            }
            let raw = &data[offset..end];
            let values = match dtype {
                DType::F32 => {
                    let mut v = vec![0f32; count];
                    LittleEndian::read_f32_into(raw, &mut v);
                    TensorData::F32(v)
                }
                DType::F64 => {
                    let mut v = vec![0f64; count];
                    LittleEndian::read_f64_into(raw, &mut v);
                    TensorData::F64(v)
                }
            };
            let role = (*role != "-").then(|| role.to_string());
            ckpt.push(NamedTensor { name: name.to_string(), shape, role, data: values })?;
        }
        if ckpt.tensors.len() != n {
            return Err(bad("fewer tensor lines than declared"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}
