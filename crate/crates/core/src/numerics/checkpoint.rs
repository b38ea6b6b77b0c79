//! Binary parameter container.
//!
//! ```text
//! magic    8 bytes  "DTTSCKPT"
//! version  u8       1
//! count    u32 LE   number of records
//! record:
//!   name_len u16 LE, name (UTF-8)
//!   rank     u8, dims (u32 LE × rank)
//!   frozen   u8 (0 or 1)
//!   data     f32 LE × product(dims)
//! ```
//! Records are written in lexicographic name order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DTTSCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, value, frozen) in store.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize || value.rank() > u8::MAX as usize {
            return Err(Error::Format(format!("cannot encode parameter {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[value.rank() as u8])?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[frozen as u8])?;
        let mut buf = Vec::with_capacity(value.len() * 4);
        for v in value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let b = read_exact(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore<f32>> {
    let magic = read_exact(&mut r, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_exact(&mut r, 1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nl = read_exact(&mut r, 2)?;
        let name_len = u16::from_le_bytes([nl[0], nl[1]]) as usize;
        let name = String::from_utf8(read_exact(&mut r, name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_exact(&mut r, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let frozen = match read_exact(&mut r, 1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad freeze flag {b}"))),
        };
        let n: usize = shape.iter().product();
        let raw = read_exact(&mut r, n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        store.insert(name.clone(), t)?;
        store.set_frozen(&name, frozen)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b.w", Tensor::matrix(2, 2, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        s.insert("a", Tensor::vector(vec![0.25])).unwrap();
        s.set_frozen("a", true).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(&buf[..]).unwrap();
        assert!(back.get("b.w").unwrap().bit_eq(s.get("b.w").unwrap()));
        assert!(back.is_frozen("a").unwrap());
        assert!(!back.is_frozen("b.w").unwrap());
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        assert!(matches!(read_checkpoint(&b"NOTACKPT\x01"[..]), Err(Error::Format(_))));
        let mut s = ParamStore::<f32>::new();
        s.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format(_))));
    }
}
