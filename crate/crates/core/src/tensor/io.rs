//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"GTNS"
//! version  u32 (= 1)
//! count    u32
//! count × { name_len u32, name UTF-8 bytes, ndim u32, extents ndim × u64, data numel × f64 }
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GTNS";
const VERSION: u32 = 1;

pub type NamedTensor = (String, Tensor);

pub fn write_named_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
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

pub fn read_named_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a named-tensor file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
