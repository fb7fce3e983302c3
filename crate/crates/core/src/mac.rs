//! Message framing inside the fixed `B`-byte plaintext, with optional
//! MAC-then-encrypt integrity.
//!
//! Layout: `msg || 0x80 || 0x00* [|| tag]`. The 16-byte tag, when present,
//! occupies the last 16 bytes, so framed messages with and without a MAC have
//! the same size. An all-zero plaintext is an empty mailbox.

use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

pub const TAG_BYTES: usize = 16;
pub const MASTER_SECRET_BYTES: usize = 32;

const END_MARKER: u8 = 0x80;

pub type MacKey = [u8; 16];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FramingError {
    #[error("message of {actual} bytes exceeds capacity {capacity}")]
    TooLong { capacity: usize, actual: usize },
    #[error("message size {0} leaves no room for framing")]
    SizeTooSmall(usize),
    #[error("integrity check failed")]
    Integrity,
}

/// `SHA-256(master_secret || "mac")`, truncated to 16 bytes.
pub fn derive_mac_key(master_secret: &[u8; MASTER_SECRET_BYTES]) -> MacKey {
    let mut h = Sha256::new();
    h.update(master_secret);
    h.update(b"mac");
    h.finalize()[..16].try_into().unwrap()
}

/// HMAC-SHA-256 truncated to 16 bytes.
pub fn tag(key: &MacKey, data: &[u8]) -> [u8; TAG_BYTES] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key size");
    mac.update(data);
    mac.finalize().into_bytes()[..TAG_BYTES].try_into().unwrap()
}

fn verify_tag(key: &MacKey, data: &[u8], expected: &[u8]) -> bool {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key size");
    mac.update(data);
    mac.verify_truncated_left(expected).is_ok()
}

/// Largest message that fits in a `msg_bytes` plaintext.
pub fn capacity(msg_bytes: usize, with_mac: bool) -> usize {
    msg_bytes.saturating_sub(1 + if with_mac { TAG_BYTES } else { 0 })
}

/// Frames `msg` into exactly `msg_bytes` bytes.
pub fn frame(msg: &[u8], msg_bytes: usize, mac_key: Option<&MacKey>) -> Result<Vec<u8>, FramingError> {
    let overhead = 1 + if mac_key.is_some() { TAG_BYTES } else { 0 };
    if msg_bytes < overhead {
        return Err(FramingError::SizeTooSmall(msg_bytes));
    }
    let cap = msg_bytes - overhead;
    if msg.len() > cap {
        return Err(FramingError::TooLong {
            capacity: cap,
            actual: msg.len(),
        });
    }
    let body_len = msg_bytes - (overhead - 1);
    let mut out = Vec::with_capacity(msg_bytes);
    out.extend_from_slice(msg);
    out.push(END_MARKER);
    out.resize(body_len, 0);
    if let Some(key) = mac_key {
        let t = tag(key, &out);
        out.extend_from_slice(&t);
    }
    Ok(out)
}

/// Recovers the message. `Ok(None)` for an empty (all-zero) mailbox.
pub fn unframe(plaintext: &[u8], mac_key: Option<&MacKey>) -> Result<Option<Vec<u8>>, FramingError> {
    if plaintext.iter().all(|&b| b == 0) {
        return Ok(None);
    }
    let body = match mac_key {
        Some(key) => {
            if plaintext.len() < TAG_BYTES + 1 {
                return Err(FramingError::Integrity);
            }
            let (body, t) = plaintext.split_at(plaintext.len() - TAG_BYTES);
            if !verify_tag(key, body, t) {
                return Err(FramingError::Integrity);
            }
            body
        }
        None => plaintext,
    };
    let end = body.iter().rposition(|&b| b != 0).ok_or(FramingError::Integrity)?;
    if body[end] != END_MARKER {
        return Err(FramingError::Integrity);
    }
    Ok(Some(body[..end].to_vec()))
}
