//! Mailbox credentials and sender address files.
//!
//! Credential file: `[p 8][v 16][k_A 16][k_B 16][flag 1][master_secret 32 if flag]`.
//! Address file: `[p 8][v 16][flag 1][master_secret 32 if flag]`.
//! Integers are little-endian, as on the wire.

use std::path::Path;

use mailmill_core::dpf::VirtualAddress;
use mailmill_core::mac::{derive_mac_key, MacKey};
use mailmill_core::vault::MailboxKey;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed {0} file")]
pub struct FormatError(pub &'static str);

/// Everything the owner of a mailbox keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MailboxCredential {
    pub p: u64,
    pub v: VirtualAddress,
    pub k_a: MailboxKey,
    pub k_b: MailboxKey,
    /// Shared with writers; the MAC key is derived from it.
    pub master_secret: Option<[u8; 32]>,
}

/// What the owner hands to a writer out of band.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressFile {
    pub p: u64,
    pub v: VirtualAddress,
    pub master_secret: Option<[u8; 32]>,
}

/// A writer's view of a mailbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendTarget {
    pub p: u64,
    pub v: VirtualAddress,
    pub mac_key: Option<MacKey>,
}

fn put_secret(out: &mut Vec<u8>, secret: &Option<[u8; 32]>) {
    match secret {
        Some(s) => {
            out.push(1);
            out.extend_from_slice(s);
        }
        None => out.push(0),
    }
}

fn get_secret(rest: &[u8], what: &'static str) -> Result<Option<[u8; 32]>, FormatError> {
    match rest {
        [0] => Ok(None),
        [1, s @ ..] if s.len() == 32 => Ok(Some(s.try_into().unwrap())),
        _ => Err(FormatError(what)),
    }
}

fn get_head(bytes: &[u8], what: &'static str) -> Result<(u64, VirtualAddress), FormatError> {
    if bytes.len() < 24 {
        return Err(FormatError(what));
    }
    let p = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let v = VirtualAddress::from_bytes(bytes[8..24].try_into().unwrap());
    Ok((p, v))
}

impl MailboxCredential {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(89);
        out.extend_from_slice(&self.p.to_le_bytes());
        out.extend_from_slice(&self.v.to_bytes());
        out.extend_from_slice(&self.k_a);
        out.extend_from_slice(&self.k_b);
        put_secret(&mut out, &self.master_secret);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        const WHAT: &str = "credential";
        let (p, v) = get_head(bytes, WHAT)?;
        if bytes.len() < 56 {
            return Err(FormatError(WHAT));
        }
        Ok(Self {
            p,
            v,
            k_a: bytes[24..40].try_into().unwrap(),
            k_b: bytes[40..56].try_into().unwrap(),
            master_secret: get_secret(&bytes[56..], WHAT)?,
        })
    }

    pub fn address(&self) -> AddressFile {
        AddressFile {
            p: self.p,
            v: self.v,
            master_secret: self.master_secret,
        }
    }

    pub fn target(&self) -> SendTarget {
        self.address().target()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_private(path, &self.encode())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

impl AddressFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(57);
        out.extend_from_slice(&self.p.to_le_bytes());
        out.extend_from_slice(&self.v.to_bytes());
        put_secret(&mut out, &self.master_secret);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        const WHAT: &str = "address";
        let (p, v) = get_head(bytes, WHAT)?;
        Ok(Self {
            p,
            v,
            master_secret: get_secret(&bytes[24..], WHAT)?,
        })
    }

    pub fn target(&self) -> SendTarget {
        SendTarget {
            p: self.p,
            v: self.v,
            mac_key: self.master_secret.as_ref().map(derive_mac_key),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_private(path, &self.encode())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Writes `bytes` to a file readable only by its owner.
fn write_private(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    f.write_all(bytes)
}
