//! Residual mapping and the sample-adaptive Golomb power-of-two coder.
//!
//! Bits are packed MSB-first. A codeword for value `v` under parameter `k`
//! is `q = v >> k` zeros, a one, then the `k` low bits of `v`; when
//! `q >= UNARY_LIMIT` it is `UNARY_LIMIT` zeros, a one, and `v` in
//! `ESCAPE_BITS` bits.

use crate::error::{Error, Result};

pub const RESCALE_AT: u32 = 64;
pub const UNARY_LIMIT: u32 = 47;
pub const ESCAPE_BITS: u32 = 18;
pub const MAX_K: u32 = 16;
pub const INITIAL_ACCUMULATOR: u64 = 4;

/// Map a signed residual to a non-negative integer: `e >= 0 -> 2e`, `e < 0 -> -2e - 1`.
#[inline]
pub fn zigzag(e: i32) -> u32 {
    ((e << 1) ^ (e >> 31)) as u32
}

#[inline]
pub fn unzigzag(v: u32) -> i32 {
    ((v >> 1) as i32) ^ -((v & 1) as i32)
}

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    nbits: u32,
    written: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Write the low `n` bits of `value`, most significant first. `n <= 32`.
    #[inline]
    pub fn write(&mut self, value: u32, n: u32) {
        debug_assert!(n <= 32);
        if n == 0 {
            return;
        }
        let masked = value as u64 & ((1u64 << n) - 1);
        self.acc = (self.acc << n) | masked;
        self.nbits += n;
        self.written += n as u64;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.bytes.push((self.acc >> self.nbits) as u8);
        }
        self.acc &= (1u64 << self.nbits) - 1;
    }

    #[inline]
    pub fn write_bit(&mut self, bit: bool) {
        self.write(bit as u32, 1);
    }

    pub fn write_zeros(&mut self, mut n: u32) {
        while n > 0 {
            let c = n.min(32);
            self.write(0, c);
            n -= c;
        }
    }

    /// Bits written so far.
    pub fn bit_len(&self) -> u64 {
        self.written
    }

    /// Remove and return the completed bytes; pending bits stay.
    pub fn take_bytes(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.bytes)
    }

    /// Bits not yet forming a full byte, as `(value, count)` with `count < 8`.
    pub fn pending(&self) -> (u8, u32) {
        (self.acc as u8, self.nbits)
    }

    /// A writer that continues after `written` bits, `pending` of which are not yet flushed.
    pub fn resume(pending: (u8, u32), written: u64) -> Self {
        let (value, nbits) = pending;
        BitWriter {
            bytes: Vec::new(),
            acc: value as u64 & ((1u64 << nbits.min(7)) - 1),
            nbits: nbits.min(7),
            written,
        }
    }

    /// Pad with zeros to a byte boundary and return the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.write(0, pad);
            self.written -= pad as u64;
        }
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn bit_pos(&self) -> u64 {
        self.pos
    }

    pub fn remaining_bits(&self) -> u64 {
        self.bytes.len() as u64 * 8 - self.pos
    }

    #[inline]
    pub fn read_bit(&mut self) -> Result<bool> {
        let byte = (self.pos / 8) as usize;
        let b = *self.bytes.get(byte).ok_or(Error::StreamExhausted)?;
        let bit = (b >> (7 - (self.pos % 8))) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn read(&mut self, n: u32) -> Result<u32> {
        debug_assert!(n <= 32);
        if (n as u64) > self.remaining_bits() {
            return Err(Error::StreamExhausted);
        }
        let mut v = 0u32;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()? as u32;
        }
        Ok(v)
    }
}

/// Adaptive state of one Golomb context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GolombContext {
    pub accumulator: u64,
    pub counter: u32,
}

impl Default for GolombContext {
    fn default() -> Self {
        GolombContext {
            accumulator: INITIAL_ACCUMULATOR,
            counter: 1,
        }
    }
}

impl GolombContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Largest `k <= MAX_K` with `counter * 2^k <= accumulator` (0 if none).
    pub fn k(&self) -> u32 {
        let g = self.counter as u64;
        let mut k = 0;
        while k < MAX_K && g << (k + 1) <= self.accumulator {
            k += 1;
        }
        k
    }

    fn update(&mut self, v: u32) {
        self.accumulator += v as u64;
        self.counter += 1;
        if self.counter == RESCALE_AT {
            self.accumulator = (self.accumulator + 1) >> 1;
            self.counter >>= 1;
        }
    }

    pub fn encode(&mut self, w: &mut BitWriter, v: u32) -> Result<()> {
        if v >= 1 << ESCAPE_BITS {
            return Err(Error::OutOfRange { value: v as i64 });
        }
        let k = self.k();
        let q = v >> k;
        if q < UNARY_LIMIT {
            w.write_zeros(q);
            w.write_bit(true);
            w.write(v, k);
        } else {
            w.write_zeros(UNARY_LIMIT);
            w.write_bit(true);
            w.write(v, ESCAPE_BITS);
        }
        self.update(v);
        Ok(())
    }

    pub fn decode(&mut self, r: &mut BitReader<'_>) -> Result<u32> {
        let k = self.k();
        let mut q = 0;
        while !r.read_bit()? {
            q += 1;
            if q > UNARY_LIMIT {
                return Err(Error::malformed("bitstream", "unary run exceeds escape limit"));
            }
        }
        let v = if q < UNARY_LIMIT {
            (q << k) | r.read(k)?
        } else {
            r.read(ESCAPE_BITS)?
        };
        self.update(v);
        Ok(v)
    }

    /// Codeword length for `v` under the current parameter, without updating.
    pub fn cost(&self, v: u32) -> u32 {
        let k = self.k();
        let q = v >> k;
        if q < UNARY_LIMIT {
            q + 1 + k
        } else {
            UNARY_LIMIT + 1 + ESCAPE_BITS
        }
    }
}
