//! Binary feature-file format.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! bytes 0..4   magic "RMIL"
//! bytes 4..8   version (currently 1)
//! bytes 8..12  n  (token count)
//! bytes 12..16 d  (embedding dimension)
//! bytes 16..   n*d IEEE-754 binary32 values, row-major, little-endian
//! ```
//!
//! The minimal 1x1 file is exactly 20 bytes. Values are stored as f32
//! regardless of the in-memory precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const FEATURE_MAGIC: &[u8; 4] = b"RMIL";
const FEATURE_VERSION: u32 = 1;

pub fn write_features<T: Scalar>(path: &Path, seq: &FeatureSequence<T>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(seq.n).map_err(|_| Error::Input(format!("n {} exceeds u32", seq.n)))?.to_le_bytes())?;
    w.write_all(&u32::try_from(seq.d).map_err(|_| Error::Input(format!("d {} exceeds u32", seq.d)))?.to_le_bytes())?;
    for v in seq.values() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features<T: Scalar>(path: &Path) -> Result<FeatureSequence<T>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, 0, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {:?}, expected \"RMIL\"", String::from_utf8_lossy(&magic)),
        });
    }
    let version = read_u32(&mut r, 4, "version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format { offset: 4, detail: format!("unsupported version {version}") });
    }
    let n = read_u32(&mut r, 8, "token count")? as usize;
    let d = read_u32(&mut r, 12, "dimension")? as usize;
    if n == 0 || d == 0 {
        return Err(Error::Format { offset: 8, detail: format!("degenerate shape {n} x {d}") });
    }

    let mut data = Vec::with_capacity(n * d);
    let mut buf = [0u8; 4];
    for i in 0..n * d {
        let offset = 16 + 4 * i as u64;
        read_exact_at(&mut r, &mut buf, offset, "value")?;
        data.push(T::from_f32(f32::from_le_bytes(buf)));
    }
    // Trailing bytes indicate a corrupt or mismatched file.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format {
            offset: 16 + 4 * (n * d) as u64,
            detail: "trailing bytes after declared payload".into(),
        });
    }
    FeatureSequence::new(n, d, data)
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format { offset, detail: format!("truncated while reading {what}") }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, offset: u64, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset, what)?;
    Ok(u32::from_le_bytes(buf))
}
