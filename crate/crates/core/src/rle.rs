//! Run-length encoding of binary masks.
//!
//! Runs are taken over pixels in row-major order and alternate between
//! background and foreground, starting with background (the first run may be
//! empty).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::BinaryMask;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("run lengths sum to {actual}, mask has {expected} pixels")]
pub struct RleError {
    pub expected: u64,
    pub actual: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &bit in mask.bits() {
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            width: mask.width(),
            height: mask.height(),
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask, RleError> {
        let expected = u64::from(self.width) * u64::from(self.height);
        let actual: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        if actual != expected {
            return Err(RleError { expected, actual });
        }
        let mut bits = Vec::with_capacity(expected as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(BinaryMask::from_bits(self.width, self.height, bits).expect("length checked above"))
    }

    pub fn foreground_count(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }
}

impl From<BinaryMask> for Rle {
    fn from(mask: BinaryMask) -> Self {
        Rle::encode(&mask)
    }
}

impl TryFrom<Rle> for BinaryMask {
    type Error = RleError;

    fn try_from(rle: Rle) -> Result<Self, RleError> {
        rle.decode()
    }
}
