//! MSB-first bit packing with little-endian byte fields.

use super::BitstreamError;

#[derive(Clone, Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    /// Pending bits, right-aligned; fewer than 8 between calls.
    acc: u64,
    used: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `n` bits of `value`, most significant first.
    pub fn write_bits(&mut self, value: u64, n: u32) {
        debug_assert!(n <= 32);
        if n == 0 {
            return;
        }
        let value = value & ((1u64 << n) - 1);
        self.acc = (self.acc << n) | value;
        self.used += n;
        while self.used >= 8 {
            self.used -= 8;
            self.bytes.push((self.acc >> self.used) as u8);
        }
        self.acc &= (1u64 << self.used) - 1;
    }

    /// Pads with zero bits to the next byte boundary.
    pub fn align(&mut self) {
        if self.used > 0 {
            self.bytes.push((self.acc << (8 - self.used)) as u8);
            self.acc = 0;
            self.used = 0;
        }
    }

    pub fn is_aligned(&self) -> bool {
        self.used == 0
    }

    pub fn write_bytes(&mut self, data: &[u8]) {
        assert!(self.is_aligned(), "byte write at unaligned position");
        self.bytes.extend_from_slice(data);
    }

    pub fn write_u8(&mut self, v: u8) {
        self.write_bytes(&[v]);
    }

    pub fn write_u16(&mut self, v: u16) {
        self.write_bytes(&v.to_le_bytes());
    }

    pub fn write_u32(&mut self, v: u32) {
        self.write_bytes(&v.to_le_bytes());
    }

    pub fn write_f32(&mut self, v: f32) {
        self.write_bytes(&v.to_le_bytes());
    }

    /// Bytes written so far, counting a partial byte as one.
    pub fn len_bytes(&self) -> usize {
        self.bytes.len() + usize::from(self.used > 0)
    }

    pub fn into_bytes(mut self) -> Vec<u8> {
        self.align();
        self.bytes
    }
}

#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    data: &'a [u8],
    byte: usize,
    bit: u8,
}

impl<'a> BitReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        BitReader { data, byte: 0, bit: 0 }
    }

    /// Byte offset of the next unread byte, counting a partly read byte.
    pub fn position(&self) -> usize {
        self.byte + usize::from(self.bit > 0)
    }

    pub fn remaining_bytes(&self) -> usize {
        self.data.len().saturating_sub(self.position())
    }

    pub fn read_bits(&mut self, n: u32, context: &dyn Fn() -> String) -> Result<u64, BitstreamError> {
        let available = (self.data.len() - self.byte) * 8 - usize::from(self.bit);
        if (n as usize) > available {
            return Err(BitstreamError::UnexpectedEnd(context()));
        }
        let mut v = 0u64;
        let mut n = n;
        while n > 0 {
            let avail = 8 - u32::from(self.bit);
            let take = avail.min(n);
            let bits = (u64::from(self.data[self.byte]) >> (avail - take)) & ((1u64 << take) - 1);
            v = (v << take) | bits;
            n -= take;
            self.bit += take as u8;
            if self.bit == 8 {
                self.bit = 0;
                self.byte += 1;
            }
        }
        Ok(v)
    }

    /// Skips to the next byte boundary; the skipped bits must be zero.
    pub fn align(&mut self, context: &dyn Fn() -> String) -> Result<(), BitstreamError> {
        if self.bit > 0 {
            let mask = 0xffu8 >> self.bit;
            if self.data[self.byte] & mask != 0 {
                return Err(BitstreamError::NonZeroPadding(context()));
            }
            self.bit = 0;
            self.byte += 1;
        }
        Ok(())
    }

    pub fn read_bytes(&mut self, n: usize, context: &dyn Fn() -> String) -> Result<&'a [u8], BitstreamError> {
        assert_eq!(self.bit, 0, "byte read at unaligned position");
        if self.byte + n > self.data.len() {
            return Err(BitstreamError::UnexpectedEnd(context()));
        }
        let out = &self.data[self.byte..self.byte + n];
        self.byte += n;
        Ok(out)
    }

    pub fn read_u8(&mut self, context: &dyn Fn() -> String) -> Result<u8, BitstreamError> {
        Ok(self.read_bytes(1, context)?[0])
    }

    pub fn read_u16(&mut self, context: &dyn Fn() -> String) -> Result<u16, BitstreamError> {
        let b = self.read_bytes(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn read_u32(&mut self, context: &dyn Fn() -> String) -> Result<u32, BitstreamError> {
        let b = self.read_bytes(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_f32(&mut self, context: &dyn Fn() -> String) -> Result<f32, BitstreamError> {
        let b = self.read_bytes(4, context)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Two's-complement encoding of `v` in `bits` bits.
pub fn to_twos(v: i32, bits: u8) -> u64 {
    (i64::from(v) as u64) & ((1u64 << bits) - 1)
}

pub fn from_twos(raw: u64, bits: u8) -> i32 {
    let shift = 64 - u32::from(bits);
    (((raw << shift) as i64) >> shift) as i32
}
