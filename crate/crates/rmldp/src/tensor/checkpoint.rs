use std::io::{Read, Write};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"RMLDP1";

/// Payload precision for a stored tensor.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Write a [`ParamSet`] to the checkpoint container: magic bytes, a count,
/// then per tensor name, dtype tag, rank, dims, and row-major little-endian
/// payload. f64 round-trips bit-exactly.
pub fn save_checkpoint<W: Write>(w: &mut W, params: &ParamSet, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[match dtype {
            Dtype::F32 => 4u8,
            Dtype::F64 => 8u8,
        }])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match dtype {
            Dtype::F32 => {
                for &x in t.data() {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &x in t.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<ParamSet> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let count = read_u32(r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match tag[0] {
            4 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            8 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
