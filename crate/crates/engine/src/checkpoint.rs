//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "WAMICKPT"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header
//! offset 16+H          data section: raw little-endian tensors
//! ```
//!
//! The header is
//! `{"format_version":1,"dtype":"f32"|"f64","meta":{...},"tensors":[{"name","shape","offset","nbytes"}]}`
//! where `offset` is relative to the start of the data section and tensors
//! are stored contiguously in header order. `meta` is free-form JSON owned by
//! the caller (network spec, training info).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::layer::NamedTensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"WAMICKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(meta: serde_json::Value, tensors: Vec<NamedTensor<F>>) -> Self {
        Checkpoint { meta, tensors }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let size = F::DTYPE.size_of() as u64;
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.values.len() {
                return Err(EngineError::Checkpoint(format!("{}: dims do not match value count", t.name)));
            }
            let nbytes = t.values.len() as u64 * size;
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.dims.clone(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            dtype: F::DTYPE,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for t in &self.tensors {
            buf.clear();
            t.values.iter().for_each(|v| v.write_le(&mut buf));
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint, converting from the stored dtype if it differs.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(EngineError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 64 << 20 {
            return Err(EngineError::Checkpoint(format!("implausible header length {len}")));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.format_version != FORMAT_VERSION {
            return Err(EngineError::Checkpoint(format!("unsupported version {}", header.format_version)));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let size = header.dtype.size_of();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            let (start, nbytes) = (e.offset as usize, e.nbytes as usize);
            if nbytes != count * size || start.checked_add(nbytes).is_none_or(|end| end > data.len()) {
                return Err(EngineError::Checkpoint(format!("{}: truncated or inconsistent entry", e.name)));
            }
            let bytes = &data[start..start + nbytes];
            let values = match header.dtype {
                DType::F32 => bytes.chunks_exact(4).map(|b| F::of(f32::read_le(b) as f64)).collect(),
                DType::F64 => bytes.chunks_exact(8).map(|b| F::of(f64::read_le(b))).collect(),
            };
            tensors.push(NamedTensor {
                name: e.name,
                dims: e.shape,
                values,
            });
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        Checkpoint::new(
            serde_json::json!({"net": "probe"}),
            vec![
                NamedTensor {
                    name: "a.weight".into(),
                    dims: vec![2, 3],
                    values: vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0],
                },
                NamedTensor {
                    name: "a.bias".into(),
                    dims: vec![2],
                    values: vec![0.25, -0.5],
                },
            ],
        )
    }

    #[test]
    fn layout_is_magic_length_header_data() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&buf[16..16 + hlen]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["tensors"][1]["offset"], 24);
        let data = &buf[16 + hlen..];
        assert_eq!(data.len(), 32);
        assert_eq!(f32::from_le_bytes(data[24..28].try_into().unwrap()), 0.25);
    }

    #[test]
    fn round_trip_and_widening() {
        let mut buf = Vec::new();
        let ck = sample();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::<f32>::read_from(buf.as_slice()).unwrap(), ck);
        let wide = Checkpoint::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(wide.tensors[0].values[4], 1e-7f32 as f64);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::<f32>::read_from(buf.as_slice()).is_err());
        assert!(Checkpoint::<f32>::read_from(&b"NOTACKPT"[..]).is_err());
    }
}
