//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "HTCK"
//! version   u32      1
//! meta_len  u32      length of the UTF-8 JSON metadata string
//! meta      bytes
//! count     u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims u64 × ndim
//!   values   f64 × product(dims), row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::Tensor;

const MAGIC: &[u8; 4] = b"HTCK";
const VERSION: u32 = 1;

/// Named tensors plus a free-form JSON metadata string.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: impl Into<String>) -> Self {
        let tensors = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Checkpoint { metadata: metadata.into(), tensors }
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.add(name.clone(), t.clone());
        }
        store
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large")))
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&len_u32(ck.metadata.len(), "metadata")?.to_le_bytes())?;
    w.write_all(ck.metadata.as_bytes())?;
    w.write_all(&len_u32(ck.tensors.len(), "tensor count")?.to_le_bytes())?;
    for (name, t) in &ck.tensors {
        w.write_all(&len_u32(name.len(), "name")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&len_u32(t.shape().len(), "rank")?.to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    if &read_array::<4>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let metadata = read_string(r)?;
    let count = read_u32(r)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = read_string(r)?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(r)?));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { metadata, tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ck)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
