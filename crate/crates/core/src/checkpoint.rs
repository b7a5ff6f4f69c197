//! Versioned binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//! `b"SLATCKPT"`, `u32` version = 1, then per parameter:
//! `u32` name length, name bytes (UTF-8), `u32` rank, `u64` dims, `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SlatError};
use crate::models::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SLATCKPT";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| SlatError::Checkpoint(format!("unexpected end of checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_params<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(SlatError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(SlatError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            break;
        }
        let rest: [u8; 3] = read_exact(&mut r)?;
        let name_len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| SlatError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| SlatError::Checkpoint(e.to_string()))?;
        let rank = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(read_exact(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(f64::from_le_bytes(read_exact(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| SlatError::Checkpoint(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

impl Model {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let params: Vec<(String, Tensor)> = self.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        write_params(BufWriter::new(File::create(path)?), &params)
    }

    /// Loads parameters into an already-built model of the same architecture.
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let loaded = read_params(BufReader::new(File::open(path)?))?;
        if loaded.len() != self.params().len() {
            return Err(SlatError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                loaded.len(),
                self.params().len()
            )));
        }
        for (p, (name, t)) in self.params().iter().zip(&loaded) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(SlatError::Checkpoint(format!(
                    "parameter {name} {:?} does not match model parameter {} {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, t)) in self.params_mut().iter_mut().zip(loaded) {
            p.value = t;
        }
        Ok(())
    }
}
