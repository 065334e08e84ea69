//! Binary tensor container.
//!
//! Layout: magic `PRC1`, one byte dtype code (1 = f32, 2 = f64), one byte
//! rank, `rank` little-endian u32 dimensions, then the little-endian
//! row-major payload. Tensors are always written as f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"PRC1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F64);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let format = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format("bad magic bytes"));
    }
    if bytes.len() < 6 {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected: 6,
            found: bytes.len(),
        });
    }
    let width = match bytes[4] {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        code => return Err(format(&format!("unknown dtype code {code}"))),
    };
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = header + count * width;
    if bytes.len() < expected {
        return Err(Error::Truncation {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            msg: format!(
                "dimensions {shape:?} account for {expected} bytes but the file has {}",
                bytes.len()
            ),
        });
    }
    let payload = &bytes[header..];
    let data: Vec<f64> = if width == 8 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let mut b = encode_tensor(&Tensor::from_vec(vec![1.0, 2.0]));
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn short_payload_is_truncation() {
        let b = encode_tensor(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(matches!(decode_tensor(&b[..b.len() - 3], p()), Err(Error::Truncation { .. })));
        assert!(matches!(decode_tensor(&b[..7], p()), Err(Error::Truncation { .. })));
    }

    #[test]
    fn trailing_bytes_are_length_mismatch() {
        let mut b = encode_tensor(&Tensor::from_vec(vec![1.0]));
        b.push(0);
        assert!(matches!(decode_tensor(&b, p()), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn reads_f32_payload() {
        let mut b = Vec::from(&MAGIC[..]);
        b.push(DTYPE_F32);
        b.push(1);
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(decode_tensor(&b, p()).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn header_layout_is_fixed() {
        let b = encode_tensor(&Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap());
        assert_eq!(&b[..6], &[b'P', b'R', b'C', b'1', 2, 2]);
        assert_eq!(&b[6..14], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[14..22], &1.0f64.to_le_bytes());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let mut rng = crate::nn::RngStream::new(seed);
            let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.next_u64() >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t), p()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
