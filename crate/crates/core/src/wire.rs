//! Binary framing shared by clients and servers.
//!
//! Every frame is `[len: u32 big-endian][type: u8][payload]`, where `len`
//! counts the type byte plus the payload. Integers inside payloads are
//! little-endian; field elements use their 16-byte canonical encoding.

use crate::audit::{RequestId, EXCHANGE_BYTES, PROOF_BYTES};
use crate::dpf::VirtualAddress;

/// Upper bound on `len`, to refuse absurd allocations from a bad peer.
pub const MAX_FRAME: usize = 1 << 24;
/// Bytes of framing around each payload.
pub const FRAME_OVERHEAD: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed {0} payload")]
    Malformed(&'static str),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("empty frame")]
    Empty,
}

pub mod msg_type {
    pub const REGISTER: u8 = 0x01;
    pub const REGISTER_RESP: u8 = 0x02;
    pub const DUMMY_QUERY: u8 = 0x03;
    pub const DUMMY_RESP: u8 = 0x04;
    pub const WRITE_KEY: u8 = 0x10;
    pub const AUDIT_SEED: u8 = 0x11;
    pub const PROOF: u8 = 0x12;
    pub const WRITE_RESULT: u8 = 0x13;
    pub const READ: u8 = 0x20;
    pub const READ_RESP: u8 = 0x21;
    pub const ERROR: u8 = 0x2f;
    pub const SEQ_PROPOSE: u8 = 0x30;
    pub const SEQ_ACK: u8 = 0x31;
    pub const AUDIT_XCHG: u8 = 0x32;
    pub const REG_SYNC: u8 = 0x33;
    pub const PEER_HELLO: u8 = 0x34;
}

/// Failure codes carried by [`Message::Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    AccessDenied = 1,
    Rejected = 2,
    Malformed = 3,
    PeerUnavailable = 4,
    AddressInUse = 5,
    Timeout = 6,
    Internal = 7,
}

impl ErrorCode {
    pub fn from_byte(b: u8) -> Option<Self> {
        use ErrorCode::*;
        Some(match b {
            1 => AccessDenied,
            2 => Rejected,
            3 => Malformed,
            4 => PeerUnavailable,
            5 => AddressInUse,
            6 => Timeout,
            7 => Internal,
            _ => return None,
        })
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorCode::AccessDenied => "access denied",
            ErrorCode::Rejected => "rejected",
            ErrorCode::Malformed => "malformed request",
            ErrorCode::PeerUnavailable => "peer server unavailable",
            ErrorCode::AddressInUse => "address in use",
            ErrorCode::Timeout => "timed out",
            ErrorCode::Internal => "internal error",
        };
        f.write_str(s)
    }
}

/// Operation body inside a `SEQ_PROPOSE`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposedOp {
    /// Fixes the active-set snapshot (first `n` slots) a write is evaluated over.
    WriteOpen { n: u64 },
    /// Applies the write's evaluated shares.
    WriteCommit,
    /// Read-and-clear of one mailbox.
    Read { p: u64, v: VirtualAddress },
}

impl ProposedOp {
    fn kind(&self) -> u8 {
        match self {
            ProposedOp::WriteOpen { .. } => 1,
            ProposedOp::WriteCommit => 2,
            ProposedOp::Read { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Register {
        key: [u8; 16],
        v_opt: Option<VirtualAddress>,
    },
    RegisterResp {
        p: u64,
        v: VirtualAddress,
    },
    DummyQuery,
    DummyResp {
        p: u64,
        v: VirtualAddress,
    },
    WriteKey {
        request_id: RequestId,
        key: Vec<u8>,
    },
    AuditSeed {
        request_id: RequestId,
        seed: [u8; 16],
    },
    Proof {
        request_id: RequestId,
        proof: Vec<u8>,
    },
    WriteResult {
        request_id: RequestId,
        accept: bool,
    },
    Read {
        p: u64,
        v: VirtualAddress,
    },
    /// `ct` holds `L` encoded field elements.
    ReadResp {
        nonce: u64,
        ct: Vec<u8>,
    },
    Error {
        code: ErrorCode,
    },
    SeqPropose {
        seq: u64,
        request_id: RequestId,
        op: ProposedOp,
    },
    SeqAck {
        seq: u64,
        ok: bool,
    },
    AuditXchg {
        body: Vec<u8>,
    },
    RegSync {
        seq: u64,
        v: VirtualAddress,
        p: u64,
    },
    PeerHello {
        tag: [u8; 32],
    },
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Malformed(self.what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn addr(&mut self) -> Result<VirtualAddress, WireError> {
        Ok(VirtualAddress::from_bytes(&self.arr()?))
    }

    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::Malformed(self.what)),
        }
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed(self.what))
        }
    }
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Register { .. } => REGISTER,
            Message::RegisterResp { .. } => REGISTER_RESP,
            Message::DummyQuery => DUMMY_QUERY,
            Message::DummyResp { .. } => DUMMY_RESP,
            Message::WriteKey { .. } => WRITE_KEY,
            Message::AuditSeed { .. } => AUDIT_SEED,
            Message::Proof { .. } => PROOF,
            Message::WriteResult { .. } => WRITE_RESULT,
            Message::Read { .. } => READ,
            Message::ReadResp { .. } => READ_RESP,
            Message::Error { .. } => ERROR,
            Message::SeqPropose { .. } => SEQ_PROPOSE,
            Message::SeqAck { .. } => SEQ_ACK,
            Message::AuditXchg { .. } => AUDIT_XCHG,
            Message::RegSync { .. } => REG_SYNC,
            Message::PeerHello { .. } => PEER_HELLO,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::Register { key, v_opt } => {
                out.extend_from_slice(key);
                out.push(v_opt.is_some() as u8);
                out.extend_from_slice(&v_opt.unwrap_or_default().to_bytes());
            }
            Message::RegisterResp { p, v } | Message::DummyResp { p, v } | Message::Read { p, v } => {
                out.extend_from_slice(&p.to_le_bytes());
                out.extend_from_slice(&v.to_bytes());
            }
            Message::DummyQuery => {}
            Message::WriteKey { request_id, key } => {
                out.extend_from_slice(request_id);
                out.extend_from_slice(key);
            }
            Message::AuditSeed { request_id, seed } => {
                out.extend_from_slice(request_id);
                out.extend_from_slice(seed);
            }
            Message::Proof { request_id, proof } => {
                out.extend_from_slice(request_id);
                out.extend_from_slice(proof);
            }
            Message::WriteResult { request_id, accept } => {
                out.extend_from_slice(request_id);
                out.push(*accept as u8);
            }
            Message::ReadResp { nonce, ct } => {
                out.extend_from_slice(&nonce.to_le_bytes());
                out.extend_from_slice(ct);
            }
            Message::Error { code } => out.push(*code as u8),
            Message::SeqPropose { seq, request_id, op } => {
                out.extend_from_slice(&seq.to_le_bytes());
                out.push(op.kind());
                out.extend_from_slice(request_id);
                match op {
                    ProposedOp::WriteOpen { n } => out.extend_from_slice(&n.to_le_bytes()),
                    ProposedOp::WriteCommit => {}
                    ProposedOp::Read { p, v } => {
                        out.extend_from_slice(&p.to_le_bytes());
                        out.extend_from_slice(&v.to_bytes());
                    }
                }
            }
            Message::SeqAck { seq, ok } => {
                out.extend_from_slice(&seq.to_le_bytes());
                out.push(*ok as u8);
            }
            Message::AuditXchg { body } => out.extend_from_slice(body),
            Message::RegSync { seq, v, p } => {
                out.extend_from_slice(&seq.to_le_bytes());
                out.extend_from_slice(&v.to_bytes());
                out.extend_from_slice(&p.to_le_bytes());
            }
            Message::PeerHello { tag } => out.extend_from_slice(tag),
        }
        out
    }

    /// Complete frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(FRAME_OVERHEAD + payload.len());
        out.extend_from_slice(&((payload.len() + 1) as u32).to_be_bytes());
        out.push(self.msg_type());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(ty: u8, payload: &[u8]) -> Result<Self, WireError> {
        use msg_type::*;
        let what = match ty {
            REGISTER => "REGISTER",
            REGISTER_RESP => "REGISTER_RESP",
            DUMMY_QUERY => "DUMMY_QUERY",
            DUMMY_RESP => "DUMMY_RESP",
            WRITE_KEY => "WRITE_KEY",
            AUDIT_SEED => "AUDIT_SEED",
            PROOF => "PROOF",
            WRITE_RESULT => "WRITE_RESULT",
            READ => "READ",
            READ_RESP => "READ_RESP",
            ERROR => "ERROR",
            SEQ_PROPOSE => "SEQ_PROPOSE",
            SEQ_ACK => "SEQ_ACK",
            AUDIT_XCHG => "AUDIT_XCHG",
            REG_SYNC => "REG_SYNC",
            PEER_HELLO => "PEER_HELLO",
            other => return Err(WireError::UnknownType(other)),
        };
        let mut r = Reader { buf: payload, what };
        let msg = match ty {
            REGISTER => {
                let key = r.arr()?;
                let flag = r.bool()?;
                let v = r.addr()?;
                Message::Register {
                    key,
                    v_opt: flag.then_some(v),
                }
            }
            REGISTER_RESP => Message::RegisterResp { p: r.u64()?, v: r.addr()? },
            DUMMY_QUERY => Message::DummyQuery,
            DUMMY_RESP => Message::DummyResp { p: r.u64()?, v: r.addr()? },
            WRITE_KEY => Message::WriteKey {
                request_id: r.arr()?,
                key: r.rest().to_vec(),
            },
            AUDIT_SEED => Message::AuditSeed {
                request_id: r.arr()?,
                seed: r.arr()?,
            },
            PROOF => {
                let request_id = r.arr()?;
                let proof = r.take(PROOF_BYTES)?.to_vec();
                Message::Proof { request_id, proof }
            }
            WRITE_RESULT => Message::WriteResult {
                request_id: r.arr()?,
                accept: r.bool()?,
            },
            READ => Message::Read { p: r.u64()?, v: r.addr()? },
            READ_RESP => {
                let nonce = r.u64()?;
                let ct = r.rest();
                if !ct.len().is_multiple_of(16) {
                    return Err(WireError::Malformed(what));
                }
                Message::ReadResp { nonce, ct: ct.to_vec() }
            }
            ERROR => Message::Error {
                code: ErrorCode::from_byte(r.u8()?).ok_or(WireError::Malformed(what))?,
            },
            SEQ_PROPOSE => {
                let seq = r.u64()?;
                let kind = r.u8()?;
                let request_id = r.arr()?;
                let op = match kind {
                    1 => ProposedOp::WriteOpen { n: r.u64()? },
                    2 => ProposedOp::WriteCommit,
                    3 => ProposedOp::Read { p: r.u64()?, v: r.addr()? },
                    _ => return Err(WireError::Malformed(what)),
                };
                Message::SeqPropose { seq, request_id, op }
            }
            SEQ_ACK => Message::SeqAck {
                seq: r.u64()?,
                ok: r.bool()?,
            },
            AUDIT_XCHG => Message::AuditXchg {
                body: r.take(EXCHANGE_BYTES)?.to_vec(),
            },
            REG_SYNC => Message::RegSync {
                seq: r.u64()?,
                v: r.addr()?,
                p: r.u64()?,
            },
            PEER_HELLO => Message::PeerHello { tag: r.arr()? },
            _ => unreachable!(),
        };
        r.finish()?;
        Ok(msg)
    }

    /// Decodes one complete frame from the front of `buf`, returning the
    /// message and the number of bytes consumed, or `None` if more input is
    /// needed.
    pub fn decode_frame(buf: &[u8]) -> Result<Option<(Self, usize)>, WireError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        if len == 0 {
            return Err(WireError::Empty);
        }
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        if buf.len() < 4 + len {
            return Ok(None);
        }
        let msg = Self::decode(buf[4], &buf[5..4 + len])?;
        Ok(Some((msg, 4 + len)))
    }
}

/// Async frame I/O over tokio streams. Each call reports the exact number of
/// bytes moved so callers can account traffic at the wire layer.
#[cfg(feature = "net")]
pub mod io {
    use super::*;
    use std::io;
    use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

    fn invalid(e: WireError) -> io::Error {
        io::Error::new(io::ErrorKind::InvalidData, e)
    }

    /// Reads one frame. `Ok(None)` on a clean end of stream.
    pub async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<(Message, usize)>> {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf).await {
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let len = u32::from_be_bytes(len_buf) as usize;
        if len == 0 {
            return Err(invalid(WireError::Empty));
        }
        if len > MAX_FRAME {
            return Err(invalid(WireError::TooLarge(len)));
        }
        let mut body = vec![0u8; len];
        r.read_exact(&mut body).await?;
        let msg = Message::decode(body[0], &body[1..]).map_err(invalid)?;
        Ok(Some((msg, 4 + len)))
    }

    pub async fn write_message<W: AsyncWrite + Unpin>(w: &mut W, msg: &Message) -> io::Result<usize> {
        let frame = msg.encode();
        w.write_all(&frame).await?;
        Ok(frame.len())
    }
}
