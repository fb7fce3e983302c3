//! AES-128 based PRF streams that yield field elements.
//!
//! Block `j` of the stream keyed by `key` under `label` is
//! `fe_from_bytes(AES_key(label XOR le128(j)))`, so any block can be computed
//! on its own.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;

use crate::field::{FieldElement, Modulus};

pub type Block = [u8; 16];

/// Builds a 16-byte domain-separation label. The tag occupies the high bytes
/// so it stays clear of the counter, which is XORed into the low bytes.
pub const fn label(tag: &[u8]) -> Block {
    assert!(tag.len() <= 16);
    let mut out = [0u8; 16];
    let offset = 16 - tag.len();
    let mut i = 0;
    while i < tag.len() {
        out[offset + i] = tag[i];
        i += 1;
    }
    out
}

#[inline]
fn xor_counter(label: &Block, j: u128) -> Block {
    (u128::from_le_bytes(*label) ^ j).to_le_bytes()
}

/// A keyed PRF instance. Construct once per key and reuse.
#[derive(Clone)]
pub struct Prf {
    cipher: Aes128,
}

impl Prf {
    pub fn new(key: &Block) -> Self {
        Self {
            cipher: Aes128::new(GenericArray::from_slice(key)),
        }
    }

    /// Raw AES output for counter `j` under `label`.
    pub fn block(&self, label: &Block, j: u128) -> Block {
        let mut b = GenericArray::from(xor_counter(label, j));
        self.cipher.encrypt_block(&mut b);
        b.into()
    }

    /// Element `j` of the stream.
    pub fn element<M: Modulus>(&self, label: &Block, j: u128) -> FieldElement<M> {
        FieldElement::from_bytes(&self.block(label, j))
    }

    /// Fills `out` with stream elements `start, start + 1, ...`.
    pub fn fill<M: Modulus>(&self, label: &Block, start: u128, out: &mut [FieldElement<M>]) {
        const BATCH: usize = 16;
        let mut blocks = [GenericArray::from([0u8; 16]); BATCH];
        for (chunk_idx, chunk) in out.chunks_mut(BATCH).enumerate() {
            let base = start + (chunk_idx * BATCH) as u128;
            for (k, b) in blocks.iter_mut().take(chunk.len()).enumerate() {
                *b = GenericArray::from(xor_counter(label, base + k as u128));
            }
            self.cipher.encrypt_blocks(&mut blocks[..chunk.len()]);
            for (dst, b) in chunk.iter_mut().zip(&blocks) {
                *dst = FieldElement::from_bytes(b.as_ref());
            }
        }
    }

    /// The first `count` stream elements.
    pub fn stream<M: Modulus>(&self, label: &Block, count: usize) -> Vec<FieldElement<M>> {
        let mut out = vec![FieldElement::ZERO; count];
        self.fill(label, 0, &mut out);
        out
    }
}

/// One-shot helper: the first `count` elements of the stream for `(key, label)`.
pub fn prf_stream<M: Modulus>(key: &Block, label: &Block, count: usize) -> Vec<FieldElement<M>> {
    Prf::new(key).stream(label, count)
}
