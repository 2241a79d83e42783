//! Binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"OCSCKPT\0"
//! version u32
//! meta    u32 length + UTF-8 JSON (model kind, config, seed)
//! count   u32
//! repeat count times:
//!   name  u32 length + UTF-8
//!   rank  u32, then rank x u64 dims
//!   data  product(dims) x f64
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 8] = b"OCSCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

fn read_exact(
    r: &mut impl Read,
    buf: &mut [u8],
    what: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what),
        _ => CheckpointError::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, what: &'static str) -> Result<String, CheckpointError> {
    let len = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
}

fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub fn write_checkpoint<'a>(
    w: &mut impl Write,
    meta: &str,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_string(w, meta)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        write_string(w, name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Returns the metadata string and the named tensors in file order.
pub fn read_checkpoint(
    r: &mut impl Read,
) -> Result<(String, Vec<(String, Tensor)>), CheckpointError> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let meta = read_string(r, "metadata")?;
    let count = read_u32(r, "tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = read_string(r, "tensor name")?;
        let rank = read_u32(r, "tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{name}` has rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(r, &mut b, "tensor dims")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 32))
            .ok_or_else(|| {
                CheckpointError::Corrupt(format!("tensor `{name}` has shape {shape:?}"))
            })?;
        let mut raw = vec![0u8; n * 8];
        read_exact(r, &mut raw, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.push((name, t));
    }
    Ok((meta, out))
}
