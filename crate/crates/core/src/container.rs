//! Binary container for named matrices (datasets and checkpoints).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RCMLAB01"
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), rows u64, cols u64, rows*cols f64
//! ```

use std::io::{Read, Write};

use crate::error::{LabError, Result};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"RCMLAB01";

pub fn write_container<W: Write>(mut w: W, entries: &[(String, DenseMatrix)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, m) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| LabError::Container(format!("truncated input: {e}")))?;
    Ok(buf)
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, DenseMatrix)>> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(LabError::Container("bad magic bytes".into()));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| LabError::Container(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| LabError::Container("entry name is not UTF-8".into()))?;
        let rows = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| LabError::Container("dimension overflow".into()))?;
        let mut data = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        let m = DenseMatrix::from_vec(rows, cols, data)
            .map_err(|e| LabError::Container(format!("entry `{name}`: {e}")))?;
        out.push((name, m));
    }
    Ok(out)
}
