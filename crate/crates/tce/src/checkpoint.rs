//! TCEM checkpoint container: named tensors in a little-endian binary layout.
//!
//! File header: magic `TCEM`, version u32, tensor count u32. Each tensor
//! record carries a header — name length u16 + UTF-8 name, rank u32, one u32
//! per dimension, precision flag u32 (0 = f32, 1 = f64) — followed by the
//! row-major IEEE-754 payload in the flagged precision.

use crate::error::{Result, TceError};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"TCEM";
pub const VERSION: u32 = 1;

/// Storage precision of one tensor payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    fn flag(self) -> u32 {
        match self {
            Precision::Single => 0,
            Precision::Double => 1,
        }
    }

    fn from_flag(flag: u32, file: &Path) -> Result<Self> {
        match flag {
            0 => Ok(Precision::Single),
            1 => Ok(Precision::Double),
            other => Err(TceError::Format {
                file: file.to_path_buf(),
                msg: format!("unknown precision flag {other}"),
            }),
        }
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> TceError {
    TceError::Format { file: path.to_path_buf(), msg: msg.into() }
}

/// Writes named tensors sorted by name, so identical contents produce
/// identical bytes.
pub fn save_tensors<P: AsRef<Path>>(
    path: P,
    tensors: &BTreeMap<String, Tensor>,
    precision: Precision,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(format_err(path, format!("tensor name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&precision.flag().to_le_bytes())?;
        match precision {
            Precision::Double => {
                for &v in tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Precision::Single => {
                for &v in tensor.data() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors<P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err(path, "truncated header"))?;
    if &magic != MAGIC {
        return Err(format_err(path, format!("bad magic bytes {magic:?}, expected \"TCEM\"")));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, path)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| format_err(path, "truncated name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let precision = Precision::from_flag(read_u32(&mut r, path)?, path)?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match precision {
            Precision::Double => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated payload"))?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            Precision::Single => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated payload"))?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| format_err(path, format!("invalid tensor {name}: {e}")))?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(format_err(path, format!("duplicate tensor name {name}")));
        }
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated field"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R, path: &Path) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated field"))?;
    Ok(u16::from_le_bytes(buf))
}

const BUFFER_SUFFIXES: [&str; 2] = ["running_mean", "running_var"];

fn is_buffer_name(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Saves parameters and running buffers as one container. Double precision by
/// default so a save/load round trip is bitwise exact.
pub fn save_store<P: AsRef<Path>>(path: P, store: &ParamStore, precision: Precision) -> Result<()> {
    let mut all = BTreeMap::new();
    for (name, t) in store.params() {
        all.insert(name.clone(), t.clone());
    }
    for (name, t) in store.buffers() {
        all.insert(name.clone(), t.clone());
    }
    save_tensors(path, &all, precision)
}

/// Rebuilds a store from a container, classifying running-stat tensors as
/// buffers by their name suffix.
pub fn load_store<P: AsRef<Path>>(path: P) -> Result<ParamStore> {
    let tensors = load_tensors(path)?;
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        if is_buffer_name(&name) {
            store.insert_buffer(&name, t)?;
        } else {
            store.insert(&name, t)?;
        }
    }
    Ok(store)
}
