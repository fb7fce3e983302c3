//! One server's mailbox store.
//!
//! Slots are addressed by a dense physical index and guarded by a random
//! virtual address. Each slot holds this server's additive share of the
//! mailbox contents, encrypted in counter mode over `F_p`:
//! `ct = pt + keystream(key, nonce)`. Because encryption is additive, a write
//! is applied by adding its share directly to the ciphertext, and
//! re-encryption is deferred to [`Vault::read_and_clear`].
//!
//! Slot 0 is the write-only dummy mailbox used for cover traffic.

use std::collections::HashMap;

use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::dpf::{EvalMatrix, VirtualAddress};
use crate::field::{add_assign_slice, sub_assign_slice, FieldElement, Modulus, FIELD_BYTES};
use crate::prf::Prf;

pub type MailboxKey = [u8; 16];

pub const DUMMY_INDEX: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VaultError {
    /// Deliberately uninformative: covers unknown index, wrong address,
    /// the dummy slot and slots without a key.
    #[error("access denied")]
    AccessDenied,
    #[error("virtual address already registered")]
    AddressInUse,
    #[error("expected physical index {expected}, got {actual}")]
    IndexMismatch { expected: u64, actual: u64 },
    #[error("dummy mailbox must be created first")]
    NoDummy,
    #[error("dummy mailbox already exists")]
    DummyExists,
    #[error("mailbox key already installed")]
    KeyAlreadySet,
    #[error("write has {rows} rows of width {width}, vault has {len} slots of {blocks} blocks")]
    Shape {
        rows: usize,
        width: usize,
        len: usize,
        blocks: usize,
    },
    #[error("malformed snapshot: {0}")]
    Snapshot(&'static str),
}

/// Counter-mode keystream: block `j` is the PRF under `key` at `(nonce, j)`.
pub fn keystream<M: Modulus>(key: &MailboxKey, nonce: u64, len: usize) -> Vec<FieldElement<M>> {
    let mut label = [0u8; 16];
    label[8..].copy_from_slice(&nonce.to_le_bytes());
    Prf::new(key).stream(&label, len)
}

pub fn encrypt<M: Modulus>(pt: &[FieldElement<M>], key: &MailboxKey, nonce: u64) -> Vec<FieldElement<M>> {
    let mut ct = keystream(key, nonce, pt.len());
    add_assign_slice(&mut ct, pt);
    ct
}

pub fn decrypt<M: Modulus>(ct: &[FieldElement<M>], key: &MailboxKey, nonce: u64) -> Vec<FieldElement<M>> {
    let mut pt = ct.to_vec();
    sub_assign_slice(&mut pt, &keystream(key, nonce, ct.len()));
    pt
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MailboxRecord<M: Modulus> {
    pub v: VirtualAddress,
    /// `None` until the owner's key for this server arrives; until then `ct`
    /// holds the plaintext share.
    pub key: Option<MailboxKey>,
    pub nonce: u64,
    pub ct: Vec<FieldElement<M>>,
}

#[derive(Debug, Clone)]
pub struct Vault<M: Modulus> {
    blocks: usize,
    records: Vec<MailboxRecord<M>>,
    index: HashMap<VirtualAddress, u64>,
}

impl<M: Modulus> Vault<M> {
    /// An empty vault for messages of `blocks` field elements.
    pub fn new(blocks: usize) -> Self {
        Self {
            blocks,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Number of active mailboxes, dummy included.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, p: u64) -> Option<&MailboxRecord<M>> {
        self.records.get(p as usize)
    }

    pub fn lookup(&self, v: &VirtualAddress) -> Option<u64> {
        self.index.get(v).copied()
    }

    /// Active addresses in physical order, truncated to the first `n`.
    pub fn address_prefix(&self, n: usize) -> Vec<VirtualAddress> {
        self.records.iter().take(n).map(|r| r.v).collect()
    }

    pub fn addresses(&self) -> Vec<VirtualAddress> {
        self.address_prefix(self.records.len())
    }

    fn push(&mut self, v: VirtualAddress, key: Option<MailboxKey>) -> u64 {
        let p = self.records.len() as u64;
        let ct = match &key {
            Some(k) => keystream(k, 0, self.blocks),
            None => vec![FieldElement::ZERO; self.blocks],
        };
        self.records.push(MailboxRecord { v, key, nonce: 0, ct });
        self.index.insert(v, p);
        p
    }

    /// Creates the dummy slot at index 0 with a fresh random address and a
    /// key that never leaves this process.
    pub fn setup_dummy<R: RngCore + CryptoRng + ?Sized>(&mut self, rng: &mut R) -> Result<(u64, VirtualAddress), VaultError> {
        let v = VirtualAddress::random(rng);
        self.setup_dummy_at(v, rng)?;
        Ok((DUMMY_INDEX, v))
    }

    /// Like [`setup_dummy`](Self::setup_dummy) with an address chosen by the
    /// peer.
    pub fn setup_dummy_at<R: RngCore + CryptoRng + ?Sized>(&mut self, v: VirtualAddress, rng: &mut R) -> Result<(), VaultError> {
        if !self.records.is_empty() {
            return Err(VaultError::DummyExists);
        }
        let mut key = [0u8; 16];
        rng.fill_bytes(&mut key);
        self.push(v, Some(key));
        Ok(())
    }

    /// Registers a mailbox under `key`, at `v_opt` if given or at a fresh
    /// random address otherwise.
    pub fn register<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        key: MailboxKey,
        v_opt: Option<VirtualAddress>,
        rng: &mut R,
    ) -> Result<(u64, VirtualAddress), VaultError> {
        let v = match v_opt {
            Some(v) => v,
            None => loop {
                let v = VirtualAddress::random(rng);
                if !self.index.contains_key(&v) {
                    break v;
                }
            },
        };
        let p = self.register_at(Some(key), v)?;
        Ok((p, v))
    }

    /// Appends a slot at the next physical index. A `None` key leaves the
    /// slot unreadable until [`install_key`](Self::install_key).
    pub fn register_at(&mut self, key: Option<MailboxKey>, v: VirtualAddress) -> Result<u64, VaultError> {
        if self.records.is_empty() {
            return Err(VaultError::NoDummy);
        }
        if self.index.contains_key(&v) {
            return Err(VaultError::AddressInUse);
        }
        Ok(self.push(v, key))
    }

    /// Installs the owner's key on a slot registered without one. The
    /// accumulated plaintext share is encrypted at the current nonce.
    pub fn install_key(&mut self, v: VirtualAddress, key: MailboxKey) -> Result<u64, VaultError> {
        let p = self.lookup(&v).ok_or(VaultError::AccessDenied)?;
        if p == DUMMY_INDEX {
            return Err(VaultError::AccessDenied);
        }
        let rec = &mut self.records[p as usize];
        match rec.key {
            Some(existing) if existing == key => Ok(p),
            Some(_) => Err(VaultError::KeyAlreadySet),
            None => {
                add_assign_slice(&mut rec.ct, &keystream(&key, rec.nonce, self.blocks));
                rec.key = Some(key);
                Ok(p)
            }
        }
    }

    /// Adds the message columns of an accepted write to the first
    /// `matrix.rows()` slots. Nonces are left alone.
    pub fn apply_write(&mut self, matrix: &EvalMatrix<M>) -> Result<(), VaultError> {
        if matrix.rows() > self.records.len() || matrix.width() != self.blocks + 1 {
            return Err(VaultError::Shape {
                rows: matrix.rows(),
                width: matrix.width(),
                len: self.records.len(),
                blocks: self.blocks,
            });
        }
        for (rec, row) in self.records.iter_mut().zip(matrix.iter_rows()) {
            add_assign_slice(&mut rec.ct, &row[1..]);
        }
        Ok(())
    }

    /// Returns the current ciphertext and nonce, then replaces the contents
    /// with a fresh encryption of zero under the next nonce.
    pub fn read_and_clear(&mut self, p: u64, v: VirtualAddress) -> Result<(Vec<FieldElement<M>>, u64), VaultError> {
        if p == DUMMY_INDEX || self.lookup(&v) != Some(p) {
            return Err(VaultError::AccessDenied);
        }
        let blocks = self.blocks;
        let rec = &mut self.records[p as usize];
        let key = rec.key.ok_or(VaultError::AccessDenied)?;
        let out = (rec.ct.clone(), rec.nonce);
        rec.nonce += 1;
        rec.ct = keystream(&key, rec.nonce, blocks);
        Ok(out)
    }

    /// Digest of the public state: page table and nonce vector. Equal on both
    /// servers whenever they have applied the same operation sequence.
    pub fn public_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            h.update(r.v.to_bytes());
            h.update(r.nonce.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Digest of everything this server holds, ciphertexts included.
    pub fn state_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            h.update(r.v.to_bytes());
            h.update(r.key.unwrap_or_default());
            h.update(r.nonce.to_le_bytes());
            for x in &r.ct {
                h.update(x.to_bytes());
            }
        }
        h.finalize().into()
    }

    /// Snapshot: `[n: u64][per record: v 16, key 16, nonce 8, ct L*16]`, all
    /// little-endian. A slot without a key is written with an all-zero key.
    pub fn encode_snapshot(&self) -> Vec<u8> {
        let rec_len = 40 + self.blocks * FIELD_BYTES;
        let mut out = Vec::with_capacity(8 + self.records.len() * rec_len);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.v.to_bytes());
            out.extend_from_slice(&r.key.unwrap_or_default());
            out.extend_from_slice(&r.nonce.to_le_bytes());
            for x in &r.ct {
                out.extend_from_slice(&x.to_bytes());
            }
        }
        out
    }

    pub fn decode_snapshot(bytes: &[u8], blocks: usize) -> Result<Self, VaultError> {
        let n_bytes: [u8; 8] = bytes.get(..8).ok_or(VaultError::Snapshot("truncated header"))?.try_into().unwrap();
        let n = u64::from_le_bytes(n_bytes) as usize;
        let rec_len = 40 + blocks * FIELD_BYTES;
        if n.checked_mul(rec_len).and_then(|x| x.checked_add(8)) != Some(bytes.len()) {
            return Err(VaultError::Snapshot("length does not match record count"));
        }
        let mut vault = Self::new(blocks);
        for chunk in bytes[8..].chunks_exact(rec_len) {
            let v = VirtualAddress::from_bytes(chunk[..16].try_into().unwrap());
            let key: MailboxKey = chunk[16..32].try_into().unwrap();
            let nonce = u64::from_le_bytes(chunk[32..40].try_into().unwrap());
            let ct = chunk[40..]
                .chunks_exact(FIELD_BYTES)
                .map(|c| FieldElement::from_canonical_bytes(c.try_into().unwrap()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| VaultError::Snapshot("non-canonical field element"))?;
            if vault.index.contains_key(&v) {
                return Err(VaultError::Snapshot("duplicate virtual address"));
            }
            let p = vault.records.len() as u64;
            vault.index.insert(v, p);
            vault.records.push(MailboxRecord {
                v,
                key: (key != [0u8; 16]).then_some(key),
                nonce,
                ct,
            });
        }
        Ok(vault)
    }
}
