//! Checkpoint container: magic "DPCN", format version, a named tensor
//! table (u32 name length, UTF-8 name, u32 rank, u32 dims, little-endian
//! f32 data) and a trailing CRC-32 over everything before it.
//!
//! Parameters and BatchNorm running statistics are stored in model order,
//! so save -> load -> save reproduces the file byte for byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::DpcnModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DPCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&out);
    out.extend_from_slice(&hasher.finalize().to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 12 + 4 {
        return Err(Error::Data("checkpoint too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(Error::Data(format!(
            "checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("bad checkpoint magic (want DPCN)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(tensors)
}

fn model_tensors(model: &DpcnModel) -> Vec<NamedTensor> {
    let mut tensors: Vec<NamedTensor> = model
        .store
        .iter()
        .map(|(_, p)| NamedTensor {
            name: p.name.clone(),
            dims: p.value.shape().to_vec(),
            data: p.value.data().iter().map(|&v| v as f32).collect(),
        })
        .collect();
    for (name, data) in model.buffers() {
        tensors.push(NamedTensor {
            name,
            dims: vec![data.len()],
            data: data.iter().map(|&v| v as f32).collect(),
        });
    }
    tensors
}

pub fn save_model(model: &DpcnModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&model_tensors(model)))?;
    Ok(())
}

/// Load every parameter and buffer into an already-built model of the same
/// architecture; names and shapes must match exactly.
pub fn load_model(model: &mut DpcnModel, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let tensors = decode(&bytes)?;
    for t in &tensors {
        if let Some(id) = model.store.by_name(&t.name) {
            let current = model.store.get(id).value.shape().to_vec();
            if current != t.dims {
                return Err(Error::Data(format!(
                    "checkpoint tensor {} has dims {:?}, model wants {:?}",
                    t.name, t.dims, current
                )));
            }
            let data: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
            model.store.get_mut(id).value = Tensor::new(t.dims.clone(), data)?;
        } else {
            let data: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
            model
                .set_buffer(&t.name, &data)
                .map_err(|_| Error::Data(format!("checkpoint tensor {} unknown to model", t.name)))?;
        }
    }
    Ok(())
}
