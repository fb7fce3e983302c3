//! Mapping between fixed-size message bytes and field-element payloads.
//!
//! A deployment fixes the message size `B` in bytes. Messages are packed
//! little-endian into field elements, `bytes_per_block` bytes each (15 for the
//! production field, so no block can wrap modulo `p`). The DPF payload is the
//! audit tag `1` followed by the `L` packed blocks.

use crate::field::{FieldElement, Modulus};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PayloadError {
    #[error("message of {actual} bytes does not fit in {capacity} bytes")]
    TooLong { capacity: usize, actual: usize },
    #[error("block {0} is outside the packed range")]
    BlockOverflow(usize),
    #[error("expected {expected} blocks, got {actual}")]
    Width { expected: usize, actual: usize },
}

/// Bytes packed per field element: the largest `k <= 15` with `256^k <= p`,
/// but at least 1. Primes below 256 therefore cannot carry arbitrary bytes.
pub fn bytes_per_block<M: Modulus>() -> usize {
    let bits = 128 - M::P.leading_zeros() as usize;
    ((bits - 1) / 8).clamp(1, 15)
}

/// Message geometry for one deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageLayout {
    /// `B`: bytes per message.
    pub msg_bytes: usize,
    /// Bytes carried by each field element.
    pub block_bytes: usize,
}

impl MessageLayout {
    pub fn new<M: Modulus>(msg_bytes: usize) -> Self {
        Self {
            msg_bytes,
            block_bytes: bytes_per_block::<M>(),
        }
    }

    /// `L = ceil(B / block_bytes)`.
    pub fn blocks(&self) -> usize {
        self.msg_bytes.div_ceil(self.block_bytes)
    }

    /// DPF output width: audit tag plus `L` blocks.
    pub fn width(&self) -> usize {
        self.blocks() + 1
    }

    /// Packs exactly `msg_bytes` bytes into `L` field elements; the last block
    /// is zero padded.
    pub fn pack<M: Modulus>(&self, bytes: &[u8]) -> Result<Vec<FieldElement<M>>, PayloadError> {
        if bytes.len() > self.msg_bytes {
            return Err(PayloadError::TooLong {
                capacity: self.msg_bytes,
                actual: bytes.len(),
            });
        }
        let mut padded = bytes.to_vec();
        padded.resize(self.blocks() * self.block_bytes, 0);
        Ok(padded
            .chunks(self.block_bytes)
            .map(|c| {
                let mut b = [0u8; 16];
                b[..c.len()].copy_from_slice(c);
                FieldElement::from_bytes(&b)
            })
            .collect())
    }

    /// Inverse of [`pack`](Self::pack). Fails if any block is out of range,
    /// which is how sums of clobbered writes usually surface.
    pub fn unpack<M: Modulus>(&self, blocks: &[FieldElement<M>]) -> Result<Vec<u8>, PayloadError> {
        if blocks.len() != self.blocks() {
            return Err(PayloadError::Width {
                expected: self.blocks(),
                actual: blocks.len(),
            });
        }
        let mut out = Vec::with_capacity(self.blocks() * self.block_bytes);
        for (i, x) in blocks.iter().enumerate() {
            let bytes = x.to_bytes();
            if bytes[self.block_bytes..].iter().any(|&b| b != 0) {
                return Err(PayloadError::BlockOverflow(i));
            }
            out.extend_from_slice(&bytes[..self.block_bytes]);
        }
        if out[self.msg_bytes..].iter().any(|&b| b != 0) {
            return Err(PayloadError::BlockOverflow(blocks.len() - 1));
        }
        out.truncate(self.msg_bytes);
        Ok(out)
    }

    /// Full DPF payload `[1, blocks...]`.
    pub fn payload<M: Modulus>(&self, bytes: &[u8]) -> Result<Vec<FieldElement<M>>, PayloadError> {
        let mut out = Vec::with_capacity(self.width());
        out.push(FieldElement::ONE);
        out.extend(self.pack(bytes)?);
        Ok(out)
    }
}
