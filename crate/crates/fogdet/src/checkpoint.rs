//! Versioned key→tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"FDCK"
//! version u32 (currently 1)
//! count   u32
//! entry*  name_len u16, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!         ndim u8, dims u32 x ndim, data (element bytes, little-endian)
//! ```
//!
//! Entries are written in name order. Loading into an existing store is
//! partial by design: ablation variants share a subset of keys.

use crate::autograd::Elem;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use ndarray::ArrayD;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FDCK";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Marker for the element width a store serializes as.
pub trait CheckpointElem: Elem {
    const DTYPE: u8;
    fn write_bytes(vals: &[Self], w: &mut impl Write) -> std::io::Result<()>;
    fn read_bytes(n: usize, r: &mut impl Read) -> std::io::Result<Vec<Self>>;
}

impl CheckpointElem for f32 {
    const DTYPE: u8 = DTYPE_F32;
    fn write_bytes(vals: &[Self], w: &mut impl Write) -> std::io::Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn read_bytes(n: usize, r: &mut impl Read) -> std::io::Result<Vec<Self>> {
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl CheckpointElem for f64 {
    const DTYPE: u8 = DTYPE_F64;
    fn write_bytes(vals: &[Self], w: &mut impl Write) -> std::io::Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn read_bytes(n: usize, r: &mut impl Read) -> std::io::Result<Vec<Self>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Writes every parameter of `store` to `path`.
pub fn save<E: CheckpointElem>(store: &ParamStore<E>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Checkpoint("too many parameters for container".into()))?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;

    for (name, value) in store.iter() {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&[E::DTYPE]).map_err(io_err)?;
        let ndim = u8::try_from(value.ndim())
            .map_err(|_| Error::Checkpoint(format!("too many dims on {name}")))?;
        w.write_all(&[ndim]).map_err(io_err)?;
        for &d in value.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("dimension too large on {name}")))?;
            w.write_all(&d.to_le_bytes()).map_err(io_err)?;
        }
        let flat = value.as_slice().expect("parameters are standard layout");
        E::write_bytes(flat, &mut w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

fn read_exact_or<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Reads a whole checkpoint into a fresh store, converting element width
/// if the file was written at the other precision.
pub fn load<E: CheckpointElem>(path: &Path) -> Result<ParamStore<E>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let magic: [u8; 4] = read_exact_or(&mut r, path)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact_or(&mut r, path)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = u32::from_le_bytes(read_exact_or(&mut r, path)?);

    let mut store = ParamStore::<E>::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact_or(&mut r, path)?) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let [dtype] = read_exact_or::<1>(&mut r, path)?;
        let [ndim] = read_exact_or::<1>(&mut r, path)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_exact_or(&mut r, path)?) as usize);
        }
        let n: usize = shape.iter().product();
        let vals: Vec<E> = match dtype {
            DTYPE_F32 => f32::read_bytes(n, &mut r)
                .map_err(|e| Error::io(path, e))?
                .into_iter()
                .map(|v| E::from_f64(v as f64))
                .collect(),
            DTYPE_F64 => f64::read_bytes(n, &mut r)
                .map_err(|e| Error::io(path, e))?
                .into_iter()
                .map(E::from_f64)
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown dtype tag {other} on {name}"
                )))
            }
        };
        let value = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), vals)
            .map_err(|e| Error::Checkpoint(format!("bad shape on {name}: {e}")))?;
        store.insert(name, value);
    }
    Ok(store)
}

/// Outcome of a partial load.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    /// Parameters overwritten from the file.
    pub loaded: usize,
    /// File entries with no counterpart in the target store.
    pub extra: Vec<String>,
    /// Target parameters the file did not provide (all under allowed
    /// prefixes, otherwise the load errors instead).
    pub missing: Vec<String>,
}

/// Overwrites `target` parameters from the checkpoint at `path`.
///
/// Every target parameter must be present in the file unless its name
/// starts with one of `optional_prefixes`; a disallowed miss is an error
/// naming the key. File entries the target does not declare are reported
/// but ignored, so a full training checkpoint loads into a detection-only
/// model.
pub fn load_into<E: CheckpointElem>(
    path: &Path,
    target: &mut ParamStore<E>,
    optional_prefixes: &[&str],
) -> Result<LoadReport> {
    let file_store = load::<E>(path)?;
    let mut report = LoadReport::default();

    let target_names: Vec<String> = target.names().cloned().collect();
    for name in &target_names {
        match file_store.get(name) {
            Some(value) => {
                let slot = target.get_mut(name).expect("name listed above");
                if slot.shape() != value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch on {name}: store {:?} vs file {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value.clone();
                report.loaded += 1;
            }
            None if optional_prefixes.iter().any(|p| name.starts_with(p)) => {
                report.missing.push(name.clone());
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {} is missing required parameter {name}",
                    path.display()
                )));
            }
        }
    }
    for name in file_store.names() {
        if !target.contains(name) {
            report.extra.push(name.clone());
        }
    }
    Ok(report)
}
