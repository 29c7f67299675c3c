//! Raw tensor file format.
//!
//! Layout: magic `STNS`, format version byte `0x01`, dtype byte
//! (`0x01` = f32, `0x02` = f64), `u8` rank, rank × `u32` little-endian
//! extents, then the row-major little-endian payload. Round-trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 4] = b"STNS";
const VERSION: u8 = 0x01;

/// Serialize a tensor to the raw byte layout.
pub fn to_bytes<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(Error::format(format!("rank {rank} exceeds format limit")));
    }
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(Error::format(format!("extent {d} exceeds u32 range")));
        }
    }
    let mut out = Vec::with_capacity(6 + 4 * rank + t.numel() * T::byte_width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.byte_tag());
    out.push(rank as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Parse a tensor, requiring the stored dtype to match `T`.
pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dtype, shape, payload) = parse_header(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::format(format!(
            "dtype mismatch: file holds {dtype}, requested {}",
            T::DTYPE
        )));
    }
    let numel: usize = shape.iter().product();
    let width = T::byte_width();
    if payload.len() != numel * width {
        return Err(Error::format(format!(
            "payload is {} bytes, shape {:?} requires {}",
            payload.len(),
            shape,
            numel * width
        )));
    }
    let data: Vec<T> = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Dtype stored in a serialized tensor without decoding the payload.
pub fn peek_dtype(bytes: &[u8]) -> Result<Dtype> {
    let (dtype, _, _) = parse_header(bytes)?;
    Ok(dtype)
}

fn parse_header(bytes: &[u8]) -> Result<(Dtype, Vec<usize>, &[u8])> {
    if bytes.len() < 7 {
        return Err(Error::format("truncated header".to_string()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("bad magic, not a tensor file".to_string()));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(format!(
            "unsupported format version 0x{:02x}",
            bytes[4]
        )));
    }
    let dtype = Dtype::from_byte_tag(bytes[5])?;
    let rank = bytes[6] as usize;
    let header_len = 7 + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::format("truncated shape header".to_string()));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        shape.push(d as usize);
    }
    Ok((dtype, shape, &bytes[header_len..]))
}

pub fn write_file<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path.as_ref(), to_bytes(t)?)?;
    Ok(())
}

pub fn read_file<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::format(format!("{}: {e}", path.as_ref().display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![1.5, -2.25, 0.0, 3.75, f32::MIN_POSITIVE, 1e30]).unwrap();
        let bytes = to_bytes(&t).unwrap();
        let back: Tensor<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let t = Tensor::<f64>::scalar(1.0);
        let mut bytes = to_bytes(&t).unwrap();
        bytes[0] = b'X';
        assert!(from_bytes::<f64>(&bytes).is_err());
        let mut bytes = to_bytes(&t).unwrap();
        bytes[4] = 0x02;
        assert!(from_bytes::<f64>(&bytes).is_err());
    }

    #[test]
    fn rejects_dtype_mismatch() {
        let t = Tensor::<f32>::scalar(1.0);
        let bytes = to_bytes(&t).unwrap();
        assert!(from_bytes::<f64>(&bytes).is_err());
        assert_eq!(peek_dtype(&bytes).unwrap(), Dtype::F32);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::<f64>::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = to_bytes(&t).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }
}
