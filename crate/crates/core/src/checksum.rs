//! 64-bit checksums shared by the weight file and the bitstream (CRC-64/XZ).

use crc::{Crc, CRC_64_XZ};

pub const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// Incremental checksum over `u16` samples in little-endian byte order.
///
/// The running value is always the finalized checksum of everything seen so
/// far, so it can be stored and resumed with [`SampleChecksum::resume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleChecksum {
    value: u64,
}

impl SampleChecksum {
    pub fn new() -> Self {
        SampleChecksum { value: crc64(&[]) }
    }

    pub fn resume(value: u64) -> Self {
        SampleChecksum { value }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn update(&mut self, samples: &[u16]) {
        // undo the final xor and reflection to recover the register
        let initial = (self.value ^ CRC_64_XZ.xorout).reverse_bits();
        let mut digest = CRC64.digest_with_initial(initial);
        let mut buf = Vec::with_capacity(samples.len() * 2);
        for s in samples {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        digest.update(&buf);
        self.value = digest.finalize();
    }

    pub fn finalize(self) -> u64 {
        self.value
    }
}

impl Default for SampleChecksum {
    fn default() -> Self {
        Self::new()
    }
}

pub fn samples_checksum(samples: &[u16]) -> u64 {
    let mut c = SampleChecksum::new();
    c.update(samples);
    c.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xz_check_value() {
        assert_eq!(crc64(b"123456789"), 0x995d_c9bb_df19_39fa);
    }

    #[test]
    fn incremental_matches_oneshot() {
        let s: Vec<u16> = (0..1000).map(|i| (i * 37) as u16).collect();
        let mut c = SampleChecksum::new();
        c.update(&s[..300]);
        c.update(&[]);
        c.update(&s[300..]);
        let bytes: Vec<u8> = s.iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(c.finalize(), crc64(&bytes));
    }

    #[test]
    fn resumed_matches_uninterrupted() {
        let s: Vec<u16> = (0..500).map(|i| (i * 7919) as u16).collect();
        let mut a = SampleChecksum::new();
        a.update(&s[..123]);
        let mut b = SampleChecksum::resume(a.value());
        b.update(&s[123..]);
        assert_eq!(b.finalize(), samples_checksum(&s));
    }
}
