//! TVGF: checksummed container for one `f32` feature tensor.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "TVGF"
//! 4       2         version (u16 LE, = 1)
//! 6       1         dtype code (1 = f32)
//! 7       1         rank (>= 1)
//! 8       8·rank    extents (u64 LE each, all > 0)
//! ..      4·n       payload, row-major f32 LE
//! ..      4         CRC-32 (IEEE) of every preceding byte, u32 LE
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TVGF";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
const FIXED_HEADER: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"TVGF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported TVGF version {0}")]
    Version(u16),
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("tensor has no extents")]
    EmptyExtents,
    #[error("extent {index} is zero")]
    ZeroExtent { index: usize },
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
}

pub fn encode_tvgf(tensor: &Tensor<f32>) -> Result<Vec<u8>, FormatError> {
    let rank = tensor.rank();
    if rank == 0 {
        return Err(FormatError::EmptyExtents);
    }
    let rank = u8::try_from(rank).expect("rank fits in a byte");
    let mut out = Vec::with_capacity(FIXED_HEADER + 8 * rank as usize + 4 * tensor.numel() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(rank);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn need(bytes: &[u8], n: usize) -> Result<(), FormatError> {
    if bytes.len() < n {
        Err(FormatError::Truncated {
            needed: n,
            available: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn decode_tvgf(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    need(bytes, FIXED_HEADER)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(FormatError::Dtype(dtype));
    }
    let rank = bytes[7] as usize;
    if rank == 0 {
        return Err(FormatError::EmptyExtents);
    }
    let header = FIXED_HEADER + 8 * rank;
    need(bytes, header)?;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for index in 0..rank {
        let at = FIXED_HEADER + 8 * index;
        let e = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        if e == 0 {
            return Err(FormatError::ZeroExtent { index });
        }
        count = count.saturating_mul(e);
        shape.push(e);
    }
    let total = count.saturating_mul(4).saturating_add(header).saturating_add(4);
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(FormatError::TrailingBytes(bytes.len() - total));
    }
    let body = &bytes[..total - 4];
    let stored = u32::from_le_bytes(bytes[total - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let data = body[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data).expect("payload length matches extents"))
}

pub fn write_feature_file(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let bytes = encode_tvgf(tensor).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tvgf(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        let data = (0..7 * 768).map(|i| (i as f32 * 0.37).sin()).collect();
        Tensor::new(vec![7, 768], data).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample();
        let bytes = encode_tvgf(&t).unwrap();
        let back = decode_tvgf(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
        assert_eq!(encode_tvgf(&back).unwrap(), bytes);
    }

    #[test]
    fn each_corruption_has_its_own_error() {
        let bytes = encode_tvgf(&sample()).unwrap();

        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_tvgf(&flipped), Err(FormatError::Checksum { .. })));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_tvgf(&magic), Err(FormatError::BadMagic(_))));

        let mut version = bytes.clone();
        version[4] = 9;
        assert_eq!(decode_tvgf(&version), Err(FormatError::Version(9)));

        let mut dtype = bytes.clone();
        dtype[6] = 2;
        assert_eq!(decode_tvgf(&dtype), Err(FormatError::Dtype(2)));

        assert!(matches!(decode_tvgf(&bytes[..bytes.len() - 10]), Err(FormatError::Truncated { .. })));

        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(decode_tvgf(&long), Err(FormatError::TrailingBytes(1)));

        let mut rank0 = bytes[..8].to_vec();
        rank0[7] = 0;
        assert_eq!(decode_tvgf(&rank0), Err(FormatError::EmptyExtents));
    }

    #[test]
    fn scalar_is_rejected_on_write() {
        assert_eq!(encode_tvgf(&Tensor::scalar(1.0)), Err(FormatError::EmptyExtents));
    }
}
