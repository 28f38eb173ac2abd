//! Binary file formats.
//!
//! Tensor file (`.bsat`), all integers little-endian:
//!
//! | offset | size     | field                        |
//! |--------|----------|------------------------------|
//! | 0      | 4        | magic `BSAT`                 |
//! | 4      | 4        | version (u32, = 1)           |
//! | 8      | 1        | dtype (u8, 0 = f32)          |
//! | 9      | 4        | ndim (u32)                   |
//! | 13     | 8 × ndim | dims (u64 each)              |
//! | …      | 4 × numel| payload, f32 row-major       |
//!
//! Block-mask file (`.bsm`):
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `BSMK`                        |
//! | 4      | 4    | version (u32, = 1)                  |
//! | 8      | 4    | heads (u32)                         |
//! | 12     | 4    | query blocks (u32)                  |
//! | 16     | 4    | key blocks (u32)                    |
//! | 20     | 4    | query block size (u32)              |
//! | 24     | 4    | key block size (u32)                |
//! | 28     | 8    | patch tokens (u64)                  |
//! | 36     | …    | rows, `ceil(key blocks / 8)` bytes each, bit `j` at byte `j / 8`, LSB first |
//!
//! Rows are ordered head-major, then by query block. Padding bits must be zero.

use std::fs;
use std::path::Path;

use crate::error::{DecodeError, Result};
use crate::layout::BlockGeometry;
use crate::mask::BlockMask;
use crate::tensor::{checked_numel, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"BSAT";
pub const MASK_MAGIC: [u8; 4] = *b"BSMK";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

const TENSOR_FIXED_HEADER: usize = 13;
const MASK_HEADER: usize = 36;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(TENSOR_FIXED_HEADER + 8 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Cursor over untrusted bytes; every read is bounds checked.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DecodeError::Truncated {
                needed: self.pos as u64 + n as u64,
                available: self.bytes.len() as u64,
            }),
        }
    }

    fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), DecodeError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(DecodeError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u8(&mut self) -> std::result::Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Checks that exactly `n` bytes remain before allocating anything for them.
    fn expect_exact(&self, n: u64) -> std::result::Result<(), DecodeError> {
        let have = self.remaining() as u64;
        if have < n {
            Err(DecodeError::Truncated {
                needed: self.pos as u64 + n,
                available: self.bytes.len() as u64,
            })
        } else if have > n {
            Err(DecodeError::TrailingBytes(have - n))
        } else {
            Ok(())
        }
    }
}

fn version(r: &mut Reader<'_>) -> std::result::Result<(), DecodeError> {
    match r.u32()? {
        FORMAT_VERSION => Ok(()),
        v => Err(DecodeError::UnsupportedVersion(v)),
    }
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, DecodeError> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    version(&mut r)?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(DecodeError::UnsupportedDtype(dtype));
    }
    let ndim = r.u32()? as usize;
    if ndim == 0 {
        return Err(DecodeError::InvalidHeader("ndim is zero".into()));
    }
    // Bound the dims allocation by what the input can actually hold.
    if ndim > r.remaining() / 8 {
        return Err(DecodeError::Truncated {
            needed: r.pos as u64 + 8 * ndim as u64,
            available: bytes.len() as u64,
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for axis in 0..ndim {
        let d = r.u64()?;
        if d == 0 {
            return Err(DecodeError::InvalidHeader(format!(
                "dimension {axis} is zero"
            )));
        }
        let d = usize::try_from(d)
            .map_err(|_| DecodeError::InvalidHeader(format!("dimension {axis} too large")))?;
        shape.push(d);
    }
    let payload = checked_numel(&shape)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DecodeError::InvalidHeader(format!("shape {shape:?} overflows")))?;
    r.expect_exact(payload as u64)?;
    let raw = r.take(payload)?;
    let mut data = Vec::with_capacity(payload / 4);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(DecodeError::NonFinite(i));
        }
        data.push(v);
    }
    Ok(Tensor::new(shape, data).expect("validated shape"))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(decode_tensor(&fs::read(path)?)?)
}

fn row_bytes(nk_blocks: usize) -> usize {
    nk_blocks.div_ceil(8)
}

pub fn encode_mask(mask: &BlockMask) -> Vec<u8> {
    let geom = mask.geometry();
    let rb = row_bytes(geom.nk_blocks);
    let mut out = Vec::with_capacity(MASK_HEADER + mask.heads() * geom.nq_blocks * rb);
    out.extend_from_slice(&MASK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        mask.heads(),
        geom.nq_blocks,
        geom.nk_blocks,
        geom.block_q,
        geom.block_k,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(geom.n_patch as u64).to_le_bytes());
    for h in 0..mask.heads() {
        for qb in 0..geom.nq_blocks {
            let start = out.len();
            out.resize(start + rb, 0);
            for kb in mask.selected(h, qb) {
                out[start + kb / 8] |= 1 << (kb % 8);
            }
        }
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> std::result::Result<BlockMask, DecodeError> {
    let mut r = Reader::new(bytes);
    r.magic(MASK_MAGIC)?;
    version(&mut r)?;
    let heads = r.u32()? as usize;
    let nq = r.u32()? as usize;
    let nk = r.u32()? as usize;
    let block_q = r.u32()? as usize;
    let block_k = r.u32()? as usize;
    let n_patch = usize::try_from(r.u64()?)
        .map_err(|_| DecodeError::InvalidHeader("patch count too large".into()))?;
    if heads == 0 {
        return Err(DecodeError::InvalidHeader("zero heads".into()));
    }
    let geom = BlockGeometry::new(n_patch, block_q, block_k)
        .map_err(|e| DecodeError::InvalidHeader(e.to_string()))?;
    if geom.nq_blocks != nq || geom.nk_blocks != nk {
        return Err(DecodeError::InvalidHeader(format!(
            "block counts {nq}x{nk} do not match {n_patch} tokens at block sizes {block_q}/{block_k}"
        )));
    }
    let rb = row_bytes(nk);
    let body = heads
        .checked_mul(nq)
        .and_then(|n| n.checked_mul(rb))
        .ok_or_else(|| DecodeError::InvalidHeader("mask size overflows".into()))?;
    r.expect_exact(body as u64)?;
    let raw = r.take(body)?;
    let mut mask = BlockMask::empty(heads, geom);
    let pad_mask: u8 = if nk.is_multiple_of(8) {
        0
    } else {
        !((1u8 << (nk % 8)) - 1)
    };
    for (row, chunk) in raw.chunks_exact(rb).enumerate() {
        if chunk[rb - 1] & pad_mask != 0 {
            return Err(DecodeError::InvalidHeader(format!(
                "nonzero padding bits in row {row}"
            )));
        }
        let (h, qb) = (row / nq, row % nq);
        for kb in 0..nk {
            if chunk[kb / 8] >> (kb % 8) & 1 == 1 {
                mask.set(h, qb, kb, true);
            }
        }
    }
    Ok(mask)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BlockMask) -> Result<()> {
    fs::write(path, encode_mask(mask))?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BlockMask> {
    Ok(decode_mask(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t23() -> Tensor {
        Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-30, -7.0]).unwrap()
    }

    #[test]
    fn tensor_round_trip_is_bit_identical() {
        let t = t23();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::zeros(vec![10, 64]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[0..4], b"BSAT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b[8], 0);
        assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[13..21].try_into().unwrap()), 10);
        assert_eq!(u64::from_le_bytes(b[21..29].try_into().unwrap()), 64);
        assert_eq!(b.len(), 29 + 640 * 4);
    }

    #[test]
    fn truncation_is_reported() {
        let mut b = encode_tensor(&t23());
        b.truncate(b.len() - 4);
        assert!(matches!(
            decode_tensor(&b),
            Err(DecodeError::Truncated { .. })
        ));
    }

    #[test]
    fn distinct_parse_errors() {
        let good = encode_tensor(&t23());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_tensor(&bad),
            Err(DecodeError::BadMagic { .. })
        ));
        let mut bad = good.clone();
        bad[8] = 1;
        assert_eq!(decode_tensor(&bad), Err(DecodeError::UnsupportedDtype(1)));
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode_tensor(&bad), Err(DecodeError::UnsupportedVersion(2)));
        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(decode_tensor(&bad), Err(DecodeError::TrailingBytes(1)));
        let mut bad = good;
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode_tensor(&bad), Err(DecodeError::NonFinite(5)));
    }

    #[test]
    fn huge_declared_shape_does_not_allocate() {
        let mut b = Vec::new();
        b.extend_from_slice(b"BSAT");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(0);
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_tensor(&b).is_err());
        let mut b = b[..9].to_vec();
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_tensor(&b),
            Err(DecodeError::Truncated { .. })
        ));
    }

    #[test]
    fn mask_round_trip_and_padding() {
        let geom = BlockGeometry::new(300, 128, 64).unwrap();
        let mut m = BlockMask::empty(2, geom);
        m.set(0, 0, 0, true);
        m.set(0, 2, 4, true);
        m.set(1, 1, 3, true);
        let bytes = encode_mask(&m);
        assert_eq!(&bytes[0..4], b"BSMK");
        assert_eq!(bytes.len(), 36 + 2 * 3);
        assert_eq!(decode_mask(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        bad[36] |= 0x80;
        assert!(matches!(
            decode_mask(&bad),
            Err(DecodeError::InvalidHeader(_))
        ));
        let mut bad = bytes;
        bad[12] = 9;
        assert!(matches!(
            decode_mask(&bad),
            Err(DecodeError::InvalidHeader(_))
        ));
    }

    proptest! {
        #[test]
        fn tensor_bytes_round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed: u32) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = encode_tensor(&t);
            let back = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(encode_tensor(&back), bytes);
        }

        #[test]
        fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
            let _ = decode_tensor(&bytes);
            let _ = decode_mask(&bytes);
        }
    }
}
