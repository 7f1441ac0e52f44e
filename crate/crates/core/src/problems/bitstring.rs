use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-length 0/1 solution vector, the universal solution type.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitString {
    bits: Vec<u8>,
}

impl BitString {
    /// Build from raw bits, rejecting anything other than 0 and 1.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidBit(b));
        }
        Ok(Self { bits })
    }

    /// Parse a string of '0'/'1' characters.
    pub fn from_str01(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::InvalidBit(other as u8)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn ones(len: usize) -> Self {
        Self { bits: vec![1; len] }
    }

    /// Uniform random bit string.
    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        // Draw 64 bits at a time; cheap enough for multi-million-sample runs.
        let mut bits = Vec::with_capacity(len);
        while bits.len() < len {
            let mut word: u64 = rng.random();
            for _ in 0..64.min(len - bits.len()) {
                bits.push((word & 1) as u8);
                word >>= 1;
            }
        }
        Self { bits }
    }

    /// The `idx`-th of all 2^len bit strings, little-endian. Used for
    /// exhaustive enumeration of small search spaces.
    pub fn nth(len: usize, idx: u64) -> Self {
        let bits = (0..len).map(|i| ((idx >> i) & 1) as u8).collect();
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> u8 {
        self.bits[i]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Hamming distance to another string of equal length.
    pub fn hamming(&self, other: &Self) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count())
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    /// Pack into little-endian u64 words for fast XOR/popcount work.
    pub fn pack_words(&self) -> Vec<u64> {
        let mut words = vec![0u64; self.bits.len().div_ceil(64)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b == 1 {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
        words
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({self})")
    }
}
