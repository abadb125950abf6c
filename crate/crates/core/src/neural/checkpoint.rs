//! Named-tensor checkpoint container.
//!
//! Layout: magic `MFCK`, format version, config-hash string, tensor count,
//! then per tensor: name, dtype tag (0 = f32, 1 = f64), rank, dims,
//! little-endian payload. Loaders match names and shapes and reject
//! mismatches.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MFCK";
const VERSION: u32 = 1;

pub type NamedTensor = (String, ArrayD<f64>);

pub fn write_tensors(path: &Path, config_hash: &str, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let hash = config_hash.as_bytes();
    buf.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    buf.extend_from_slice(hash);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(1u8); // f64
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<(String, Vec<NamedTensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Data(format!(
                "truncated checkpoint {}",
                path.display()
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 =
        |pos: &mut usize| -> Result<u32> { Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap())) };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Data(format!("bad checkpoint magic in {}", path.display())));
    }
    let ver = read_u32(&mut pos)?;
    if ver != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {ver}")));
    }
    let hash_len = read_u32(&mut pos)? as usize;
    let hash = String::from_utf8(take(&mut pos, hash_len)?.to_vec())
        .map_err(|_| Error::Data("invalid hash string".into()))?;
    let count = read_u32(&mut pos)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Data("invalid tensor name".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        let rank = read_u32(&mut pos)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut pos)? as usize);
        }
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match dtype {
            0 => take(&mut pos, n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            1 => take(&mut pos, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(Error::Data(format!("unknown dtype tag {other}")));
            }
        };
        tensors.push((name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap()));
    }
    Ok((hash, tensors))
}
