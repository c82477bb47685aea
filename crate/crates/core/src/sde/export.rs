//! Path export.
//!
//! CSV: header `time,x0,x1,..`, one row per record.
//!
//! Binary frame, all integers and floats little-endian:
//!
//! | bytes | content                        |
//! |-------|--------------------------------|
//! | 5     | magic `SFAV1`                  |
//! | 4     | state dimension `u32`          |
//! | 8     | step `f64`                     |
//! | 8     | number of paths `u64`          |
//! | 8     | records per path `u64`         |
//! | 8 R   | record times `f64`             |
//! | 8 PRD | states, path-major `f64`       |

use std::io::{Read, Write};

use super::{PathEnsemble, SdePath};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"SFAV1";

pub fn write_csv<W: Write>(path: &SdePath, mut w: W) -> Result<()> {
    let mut header = String::from("time");
    for i in 0..path.dim() {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(w, "{header}")?;
    for (t, s) in path.times().iter().zip(path.states()) {
        let mut line = format!("{t:e}");
        for x in s {
            line.push_str(&format!(",{x:e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_binary<W: Write>(ensemble: &PathEnsemble, mut w: W) -> Result<()> {
    let dim = u32::try_from(ensemble.dim()).map_err(|_| Error::domain("dimension too large"))?;
    w.write_all(MAGIC)?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&ensemble.path(0).step().to_le_bytes())?;
    w.write_all(&(ensemble.len() as u64).to_le_bytes())?;
    w.write_all(&(ensemble.times().len() as u64).to_le_bytes())?;
    for t in ensemble.times() {
        w.write_all(&t.to_le_bytes())?;
    }
    for p in ensemble.paths() {
        for s in p.states() {
            for x in s {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Decoded binary frame: `(dim, step, times, states)` with `states[p]` the
/// flattened records of path `p`.
pub type BinaryFrame = (usize, f64, Vec<f64>, Vec<Vec<f64>>);

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<BinaryFrame> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::domain("not an SFAV1 frame"));
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let dim = u32::from_le_bytes(b) as usize;
    let step = read_f64(&mut r)?;
    let paths = read_u64(&mut r)? as usize;
    let records = read_u64(&mut r)? as usize;
    let times = (0..records).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
    let states = (0..paths)
        .map(|_| (0..records * dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok((dim, step, times, states))
}
