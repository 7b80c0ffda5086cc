//! `QTENSOR1` binary tensor files.
//!
//! Layout: the 8 ASCII bytes `QTENSOR1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the row-major `f32` values, little-endian,
//! with no padding anywhere.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const QTENSOR_MAGIC: &[u8; 8] = b"QTENSOR1";

pub fn tensor_to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(QTENSOR_MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let rest = bytes.strip_prefix(QTENSOR_MAGIC.as_slice()).ok_or("bad magic")?;
    let (rank, mut rest) = take_u32(rest).ok_or("truncated header")?;
    if rank == 0 {
        return Err("rank must be at least 1".into());
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let (d, r) = take_u32(rest).ok_or("truncated dims")?;
        shape.push(d as usize);
        rest = r;
    }
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or("dims overflow")?;
    if rest.len() != count * 4 {
        return Err(format!("expected {} payload bytes for shape {shape:?}, found {}", count * 4, rest.len()));
    }
    let data = rest.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

fn take_u32(bytes: &[u8]) -> Option<(u32, &[u8])> {
    let (head, rest) = bytes.split_first_chunk::<4>()?;
    Some((u32::from_le_bytes(*head), rest))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes).map_err(|detail| Error::TensorFormat { path: path.to_path_buf(), detail })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = tensor_to_bytes(&t);
        let mut expected = b"QTENSOR1".to_vec();
        expected.extend([2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert!(tensor_from_bytes(&bytes).unwrap().bit_eq(&t));
    }

    #[test]
    fn rejects_malformed() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert!(tensor_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(tensor_from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(tensor_from_bytes(&magic).is_err());
        let mut zero_rank = b"QTENSOR1".to_vec();
        zero_rank.extend([0, 0, 0, 0]);
        assert!(tensor_from_bytes(&zero_rank).is_err());
    }
}
