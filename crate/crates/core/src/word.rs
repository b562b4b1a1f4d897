use std::fmt;
use std::ops::BitAnd;

/// A 256-bit EVM stack word, stored big-endian.
///
/// Only the operations the analyses need are provided: construction from
/// push operands, bitwise AND, comparison, and narrowing to an offset.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Word([u8; 32]);

impl Word {
    pub const ZERO: Word = Word([0; 32]);

    pub fn from_u64(v: u64) -> Self {
        let mut b = [0u8; 32];
        b[24..].copy_from_slice(&v.to_be_bytes());
        Word(b)
    }

    /// Right-aligns up to 32 big-endian bytes.
    pub fn from_be_slice(bytes: &[u8]) -> Self {
        assert!(bytes.len() <= 32, "word wider than 32 bytes");
        let mut b = [0u8; 32];
        b[32 - bytes.len()..].copy_from_slice(bytes);
        Word(b)
    }

    pub fn to_be_bytes(&self) -> [u8; 32] {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    /// Number of significant bytes (0 for zero).
    pub fn byte_len(&self) -> usize {
        32 - self.0.iter().take_while(|&&b| b == 0).count()
    }

    pub fn as_u64(&self) -> Option<u64> {
        if self.0[..24].iter().any(|&b| b != 0) {
            return None;
        }
        Some(u64::from_be_bytes(self.0[24..].try_into().unwrap()))
    }

    /// The value as a code offset, if it fits in `u32`.
    pub fn as_offset(&self) -> Option<u32> {
        self.as_u64().and_then(|v| u32::try_from(v).ok())
    }

    /// `2^bits`; `bits` must be below 256.
    pub fn pow2(bits: u32) -> Self {
        assert!(bits < 256);
        let mut b = [0u8; 32];
        let byte = 31 - (bits / 8) as usize;
        b[byte] = 1 << (bits % 8);
        Word(b)
    }
}

impl BitAnd for Word {
    type Output = Word;

    fn bitand(self, rhs: Word) -> Word {
        let mut out = [0u8; 32];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(rhs.0.iter())) {
            *o = a & b;
        }
        Word(out)
    }
}

impl From<u64> for Word {
    fn from(v: u64) -> Self {
        Word::from_u64(v)
    }
}

impl fmt::LowerHex for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.byte_len();
        if n == 0 {
            return f.write_str("0");
        }
        let digits = hex::encode(&self.0[32 - n..]);
        f.write_str(digits.trim_start_matches('0'))
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:x}", self)
    }
}

impl fmt::Debug for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Word(0x{:x})", self)
    }
}
