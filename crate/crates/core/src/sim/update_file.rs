//! Binary container for a parameter matrix:
//! `"RFA1" | u32 LE rows | u64 LE cols | rows*cols f64 LE, row-major`.

use std::path::Path;

use crate::aggregation::ParamMatrix;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RFA1";
const HEADER_LEN: usize = 16;

pub fn encode(m: &ParamMatrix) -> Result<Vec<u8>> {
    let k = u32::try_from(m.rows()).map_err(|_| Error::invalid("too many rows for an update file"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.values().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&k.to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParamMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")),
        });
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let n = usize::try_from(n).map_err(|_| Error::invalid("column count overflows"))?;
    let needed = k
        .checked_mul(n)
        .and_then(|c| c.checked_mul(8))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::invalid("matrix size overflows"))?;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::invalid(format!(
            "{} trailing bytes after the matrix",
            bytes.len() - needed
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParamMatrix::new(k, n, values)
}

pub fn write_update_file(path: &Path, m: &ParamMatrix) -> Result<()> {
    std::fs::write(path, encode(m)?).map_err(|e| Error::io(path, e))
}

pub fn read_update_file(path: &Path) -> Result<ParamMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
