//! `HORD` checkpoint container.
//!
//! ```text
//! magic   "HORD"
//! version u32 (= 1)
//! count   u32
//! count × { name_len u32, name utf-8, rank u32, extents u32 × rank, values f64 × product(extents) }
//! ```
//! All integers and floats are little-endian. Entries are written in name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::binio::*;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HORD";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_len(w, store.len(), "entry count")?;
    for (name, t) in store.iter() {
        put_len(w, name.len(), "name length")?;
        w.write_all(name.as_bytes())?;
        put_len(w, t.rank(), "rank")?;
        for &d in t.shape() {
            put_len(w, d, "extent")?;
        }
        put_f64s(w, t.data())?;
    }
    Ok(())
}

/// Reads a checkpoint. The returned store has seed 0; values are exact.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamStore> {
    expect_magic(r, CHECKPOINT_MAGIC)?;
    let version = get_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = get_u32(r, "entry count")?;
    let mut store = ParamStore::new(0);
    for _ in 0..count {
        let len = get_u32(r, "name length")? as usize;
        let name = String::from_utf8(get_bytes(r, len, "name")?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = get_u32(r, "rank")? as usize;
        if rank == 0 {
            return Err(Error::Format(format!("`{name}` has rank 0")));
        }
        let shape = (0..rank)
            .map(|_| get_u32(r, "extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= 1 << 28)
            .ok_or_else(|| Error::Format(format!("`{name}` has unusable shape {shape:?}")))?;
        let values = get_f64s(r, n, "values")?;
        let t = Tensor::new(shape, values).map_err(|e| Error::Format(e.to_string()))?;
        store
            .insert(&name, t)
            .map_err(|_| Error::Format(format!("duplicate entry `{name}`")))?;
    }
    expect_eof(r)?;
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
