//! Little-endian byte and bit helpers shared by the `.t4`, `.cdq` and `.cpf` formats.

use crate::error::{Error, Result};
use crate::tensor::Dims;

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated {
            needed: usize::MAX,
            available: self.bytes.len(),
        })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(Error::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn dims(&mut self) -> Result<Dims> {
        Ok([
            self.u32()? as usize,
            self.u32()? as usize,
            self.u32()? as usize,
            self.u32()? as usize,
        ])
    }

    /// Reads `n` floats; any non-finite value is rejected with its index.
    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Overflow(format!("{n} floats")))?;
        let raw = self.take(len)?;
        let mut out = Vec::with_capacity(n);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite(i));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Packs `values` at `width` (at most 33) bits each, LSB-first, zero-padded to a byte boundary.
pub(crate) fn pack_bits(values: &[u32], width: u8) -> Vec<u8> {
    let width = width as usize;
    let total_bits = values.len() * width;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &v in values {
        for b in 0..width {
            if (v as u64 >> b) & 1 == 1 {
                out[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], count: usize, width: u8) -> Result<Vec<u32>> {
    let width = width as usize;
    let total_bits = count
        .checked_mul(width)
        .ok_or_else(|| Error::Overflow(format!("{count} packed indices")))?;
    if bytes.len() != total_bits.div_ceil(8) {
        return Err(Error::Malformed(format!(
            "packed index block is {} bytes, expected {}",
            bytes.len(),
            total_bits.div_ceil(8)
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut bit = 0usize;
    for _ in 0..count {
        let mut v = 0u64;
        for b in 0..width {
            if (bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                v |= 1 << b;
            }
            bit += 1;
        }
        out.push(u32::try_from(v).map_err(|_| Error::Malformed(format!("index {v} exceeds 32 bits")))?);
    }
    if !bit.is_multiple_of(8) && bytes[bit / 8] >> (bit % 8) != 0 {
        return Err(Error::Malformed("non-zero padding bits".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lsb_first_layout() {
        // 3-bit values 1, 2, 5 -> bits 100 010 101 (LSB first) -> 0b01_010_001, 0b1
        assert_eq!(pack_bits(&[1, 2, 5], 3), vec![0b0101_0001, 0b0000_0001]);
    }

    #[test]
    fn padding_bits_must_be_zero() {
        assert!(unpack_bits(&[0b1000_0000], 1, 3).is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip(width in 1u8..=32, raw in prop::collection::vec(any::<u32>(), 0..64)) {
            let mask = if width == 32 { u32::MAX } else { (1u32 << width) - 1 };
            let values: Vec<u32> = raw.iter().map(|v| v & mask).collect();
            let packed = pack_bits(&values, width);
            prop_assert_eq!(packed.len(), (values.len() * width as usize).div_ceil(8));
            prop_assert_eq!(unpack_bits(&packed, values.len(), width).unwrap(), values);
        }
    }
}
