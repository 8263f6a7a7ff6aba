//! Binary checkpoint format.
//!
//! Layout, all integers unsigned 64-bit little-endian:
//!
//! ```text
//! "NRX1" count { name_len name_utf8 rank dims[rank] data[f64 LE; product(dims)] }*count
//! ```

use super::{Result, TensorError};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NRX1";

/// One named parameter in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(mut w: W, records: &[CheckpointRecord]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for rec in records {
        let expected: usize = rec.shape.iter().product();
        if expected != rec.data.len() {
            return Err(TensorError::DataLength {
                shape: rec.shape.clone(),
                expected,
                actual: rec.data.len(),
            });
        }
        w.write_all(&(rec.name.len() as u64).to_le_bytes())?;
        w.write_all(rec.name.as_bytes())?;
        w.write_all(&(rec.shape.len() as u64).to_le_bytes())?;
        for &d in &rec.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &rec.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

// Guards allocation against corrupt length fields.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let count = read_u64(&mut r)?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)?;
        if name_len > 4096 {
            return Err(TensorError::Checkpoint(format!("name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| TensorError::Checkpoint(format!("parameter name is not UTF-8: {e}")))?;
        let rank = read_u64(&mut r)?;
        if rank > 8 {
            return Err(TensorError::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            total = total.saturating_mul(d);
            shape.push(d as usize);
        }
        if total > MAX_ELEMENTS {
            return Err(TensorError::Checkpoint(format!("`{name}` holds {total} values")));
        }
        let mut data = Vec::with_capacity(total as usize);
        let mut buf = [0u8; 8];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push(CheckpointRecord { name, shape, data });
    }
    Ok(records)
}
