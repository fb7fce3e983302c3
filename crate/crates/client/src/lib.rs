//! Client side of the mailbox protocol: registration, private writes with
//! their audit proof, reads with two-share decryption, and cover traffic.
//!
//! A [`Client`] holds one connection to each server and always talks to
//! server A before server B, so real and cover writes produce the same
//! traffic pattern.

pub mod credential;

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use mailmill_core::audit::{self, AuditSeed, RequestId, SnipProofShare};
use mailmill_core::dpf::{self, DpfKey, DpfParams, VirtualAddress};
use mailmill_core::field::{add_assign_slice, FieldElement, Modulus, FIELD_BYTES};
use mailmill_core::mac::{self, FramingError, MacKey};
use mailmill_core::payload::{MessageLayout, PayloadError};
use mailmill_core::vault::{decrypt, MailboxKey};
use mailmill_core::wire::io::{read_message, write_message};
use mailmill_core::wire::{ErrorCode, Message};
use rand::{CryptoRng, RngCore};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

pub use credential::{AddressFile, MailboxCredential, SendTarget};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("server {server}: {code}")]
    Server { server: char, code: ErrorCode },
    #[error("server {server} sent an unexpected {what}")]
    Protocol { server: char, what: &'static str },
    #[error("servers returned different audit seeds; one of them may be malicious")]
    SeedMismatch,
    #[error("servers returned different mailbox addresses")]
    RegistrationMismatch,
    #[error("servers returned different nonces or ciphertext lengths")]
    ReadMismatch,
    #[error(transparent)]
    Framing(#[from] FramingError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error("connection closed by server {0}")]
    Closed(char),
}

impl ClientError {
    /// The server-reported error code, if that is what this is.
    pub fn server_code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Server { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// Result of reading a mailbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    Empty,
    Message(Vec<u8>),
    /// The plaintext is neither empty nor a validly framed (and, with a
    /// master secret, authenticated) message.
    IntegrityFailure,
}

/// Per-write measurements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SendReport {
    pub accepted: bool,
    /// Bytes sent to server A and B, frames included.
    pub upload: [u64; 2],
    /// Bytes received from server A and B.
    pub download: [u64; 2],
    /// Local computation: framing, key generation and proof generation.
    pub client_compute: Duration,
    /// Local audit work: two evaluations at the target plus the proof.
    pub audit_client: Duration,
}

impl SendReport {
    pub fn client_bytes(&self) -> u64 {
        self.upload.iter().chain(&self.download).sum()
    }
}

struct Connection {
    name: char,
    rd: OwnedReadHalf,
    wr: OwnedWriteHalf,
    sent: u64,
    received: u64,
}

impl Connection {
    async fn open(name: char, addr: SocketAddr) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (rd, wr) = stream.into_split();
        Ok(Self {
            name,
            rd,
            wr,
            sent: 0,
            received: 0,
        })
    }

    async fn send(&mut self, msg: &Message) -> Result<(), ClientError> {
        self.sent += write_message(&mut self.wr, msg).await? as u64;
        Ok(())
    }

    async fn recv(&mut self) -> Result<Message, ClientError> {
        match read_message(&mut self.rd).await? {
            Some((Message::Error { code }, n)) => {
                self.received += n as u64;
                Err(ClientError::Server { server: self.name, code })
            }
            Some((msg, n)) => {
                self.received += n as u64;
                Ok(msg)
            }
            None => Err(ClientError::Closed(self.name)),
        }
    }

    fn unexpected<T>(&self, what: &'static str) -> Result<T, ClientError> {
        Err(ClientError::Protocol { server: self.name, what })
    }
}

pub struct Client<M: Modulus> {
    conns: [Connection; 2],
    layout: MessageLayout,
    params: DpfParams,
    _modulus: std::marker::PhantomData<M>,
}

impl<M: Modulus> Client<M> {
    pub async fn connect(server_a: SocketAddr, server_b: SocketAddr, msg_bytes: usize) -> Result<Self, ClientError> {
        let a = Connection::open('A', server_a).await?;
        let b = Connection::open('B', server_b).await?;
        let layout = MessageLayout::new::<M>(msg_bytes);
        Ok(Self {
            conns: [a, b],
            layout,
            params: DpfParams::production(layout.width()),
            _modulus: std::marker::PhantomData,
        })
    }

    pub fn layout(&self) -> MessageLayout {
        self.layout
    }

    /// Total bytes sent to and received from each server so far.
    pub fn traffic(&self) -> ([u64; 2], [u64; 2]) {
        (
            [self.conns[0].sent, self.conns[1].sent],
            [self.conns[0].received, self.conns[1].received],
        )
    }

    /// Registers a fresh mailbox with random keys at a server-chosen address,
    /// or at `v_opt` if given.
    pub async fn register<R: RngCore + CryptoRng>(
        &mut self,
        v_opt: Option<VirtualAddress>,
        master_secret: Option<[u8; 32]>,
        rng: &mut R,
    ) -> Result<MailboxCredential, ClientError> {
        let mut k_a = [0u8; 16];
        let mut k_b = [0u8; 16];
        rng.fill_bytes(&mut k_a);
        rng.fill_bytes(&mut k_b);
        self.register_with_keys(k_a, k_b, v_opt, master_secret).await
    }

    pub async fn register_with_keys(
        &mut self,
        k_a: MailboxKey,
        k_b: MailboxKey,
        v_opt: Option<VirtualAddress>,
        master_secret: Option<[u8; 32]>,
    ) -> Result<MailboxCredential, ClientError> {
        let [a, b] = &mut self.conns;
        a.send(&Message::Register { key: k_a, v_opt }).await?;
        let (p, v) = match a.recv().await? {
            Message::RegisterResp { p, v } => (p, v),
            _ => return a.unexpected("reply to REGISTER"),
        };
        b.send(&Message::Register { key: k_b, v_opt: Some(v) }).await?;
        match b.recv().await? {
            Message::RegisterResp { p: pb, v: vb } if (pb, vb) == (p, v) => {}
            Message::RegisterResp { .. } => return Err(ClientError::RegistrationMismatch),
            _ => return b.unexpected("reply to REGISTER"),
        }
        Ok(MailboxCredential {
            p,
            v,
            k_a,
            k_b,
            master_secret,
        })
    }

    /// The published write-only dummy mailbox, checked against both servers.
    pub async fn dummy(&mut self) -> Result<SendTarget, ClientError> {
        let mut out = [VirtualAddress(0); 2];
        for (i, c) in self.conns.iter_mut().enumerate() {
            c.send(&Message::DummyQuery).await?;
            match c.recv().await? {
                Message::DummyResp { p: 0, v } => out[i] = v,
                _ => return c.unexpected("reply to DUMMY_QUERY"),
            }
        }
        if out[0] != out[1] {
            return Err(ClientError::RegistrationMismatch);
        }
        Ok(SendTarget {
            p: 0,
            v: out[0],
            mac_key: None,
        })
    }

    /// Frames `msg` (with a MAC tag when the target has a MAC key) and writes
    /// it privately to the target mailbox.
    pub async fn send<R: RngCore + CryptoRng>(&mut self, target: &SendTarget, msg: &[u8], rng: &mut R) -> Result<SendReport, ClientError> {
        let start = Instant::now();
        let framed = mac::frame(msg, self.layout.msg_bytes, target.mac_key.as_ref())?;
        let framing = start.elapsed();
        let mut report = self.send_plaintext(target, &framed, rng).await?;
        report.client_compute += framing;
        Ok(report)
    }

    /// A write of `B` uniformly random bytes to the dummy mailbox.
    pub async fn cover_send<R: RngCore + CryptoRng>(&mut self, dummy: &SendTarget, rng: &mut R) -> Result<SendReport, ClientError> {
        let mut bytes = vec![0u8; self.layout.msg_bytes];
        rng.fill_bytes(&mut bytes);
        self.send_plaintext(dummy, &bytes, rng).await
    }

    /// Writes exactly `B` plaintext bytes to the target.
    pub async fn send_plaintext<R: RngCore + CryptoRng>(
        &mut self,
        target: &SendTarget,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Result<SendReport, ClientError> {
        let start = Instant::now();
        let payload = self.layout.payload::<M>(plaintext)?;
        let (ka, kb) = dpf::gen(self.params, target.v, &payload, rng).expect("payload width matches params");
        let mut request_id = [0u8; 16];
        rng.fill_bytes(&mut request_id);
        let keygen = start.elapsed();
        let mut audit_time = Duration::ZERO;
        let (p, v) = (target.p, target.v);
        let before = self.traffic();
        let accepted = self
            .raw_write(request_id, (&ka, &kb), |seed| {
                let t = Instant::now();
                let checks = audit::target_checks(seed, p, v, &ka.eval(v), &kb.eval(v));
                let proofs = audit::snip_gen(&checks, rng);
                audit_time = t.elapsed();
                proofs
            })
            .await?;
        let after = self.traffic();
        Ok(SendReport {
            accepted: accepted.0 && accepted.1,
            upload: [after.0[0] - before.0[0], after.0[1] - before.0[1]],
            download: [after.1[0] - before.1[0], after.1[1] - before.1[1]],
            client_compute: keygen + audit_time,
            audit_client: audit_time,
        })
    }

    /// Runs the write protocol with caller-supplied key shares and proof.
    /// `prove` receives the audit seed once both servers have returned the
    /// same one. Returns each server's verdict.
    pub async fn raw_write(
        &mut self,
        request_id: RequestId,
        keys: (&DpfKey<M>, &DpfKey<M>),
        prove: impl FnOnce(&AuditSeed) -> (SnipProofShare<M>, SnipProofShare<M>),
    ) -> Result<(bool, bool), ClientError> {
        let encoded = [keys.0.encode(), keys.1.encode()];
        self.raw_write_bytes(request_id, encoded, prove).await
    }

    /// Like [`raw_write`](Self::raw_write) with pre-encoded key shares, which
    /// may be malformed.
    pub async fn raw_write_bytes(
        &mut self,
        request_id: RequestId,
        keys: [Vec<u8>; 2],
        prove: impl FnOnce(&AuditSeed) -> (SnipProofShare<M>, SnipProofShare<M>),
    ) -> Result<(bool, bool), ClientError> {
        for (c, key) in self.conns.iter_mut().zip(keys) {
            c.send(&Message::WriteKey { request_id, key }).await?;
        }
        let mut seeds = [[0u8; 16]; 2];
        let mut failure = None;
        for (c, seed) in self.conns.iter_mut().zip(&mut seeds) {
            let reply = match c.recv().await {
                Ok(Message::AuditSeed { request_id: rid, seed: s }) if rid == request_id => {
                    *seed = s;
                    continue;
                }
                Ok(_) => c.unexpected::<()>("reply to WRITE_KEY"),
                Err(e) => Err(e),
            };
            failure = failure.or(reply.err());
        }
        if let Some(e) = failure {
            return Err(e);
        }
        if seeds[0] != seeds[1] {
            return Err(ClientError::SeedMismatch);
        }
        let (pa, pb) = prove(&AuditSeed(seeds[0]));
        for (c, proof) in self.conns.iter_mut().zip([pa, pb]) {
            c.send(&Message::Proof {
                request_id,
                proof: proof.encode(),
            })
            .await?;
        }
        let mut verdicts = [false; 2];
        for (c, verdict) in self.conns.iter_mut().zip(&mut verdicts) {
            let reply = match c.recv().await {
                Ok(Message::WriteResult { request_id: rid, accept }) if rid == request_id => {
                    *verdict = accept;
                    continue;
                }
                Ok(_) => c.unexpected::<()>("reply to PROOF"),
                Err(e) => Err(e),
            };
            failure = failure.or(reply.err());
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok((verdicts[0], verdicts[1]))
    }

    /// Reads and clears both shares of the mailbox and returns the summed
    /// plaintext.
    pub async fn read_plaintext(&mut self, cred: &MailboxCredential) -> Result<Vec<FieldElement<M>>, ClientError> {
        let mut shares = Vec::with_capacity(2);
        for (c, key) in self.conns.iter_mut().zip([cred.k_a, cred.k_b]) {
            c.send(&Message::Read { p: cred.p, v: cred.v }).await?;
            match c.recv().await? {
                Message::ReadResp { nonce, ct } => {
                    let ct: Vec<FieldElement<M>> = ct
                        .chunks_exact(FIELD_BYTES)
                        .map(|b| FieldElement::from_bytes(b.try_into().unwrap()))
                        .collect();
                    shares.push((nonce, decrypt(&ct, &key, nonce)));
                }
                _ => return c.unexpected("reply to READ"),
            }
        }
        let (nb, mut pt_b) = shares.pop().unwrap();
        let (na, pt_a) = shares.pop().unwrap();
        if na != nb || pt_a.len() != pt_b.len() || pt_a.len() != self.layout.blocks() {
            return Err(ClientError::ReadMismatch);
        }
        add_assign_slice(&mut pt_b, &pt_a);
        Ok(pt_b)
    }

    /// Reads the mailbox and recovers the message, verifying the MAC when
    /// the credential carries a master secret.
    pub async fn check(&mut self, cred: &MailboxCredential) -> Result<CheckOutcome, ClientError> {
        let pt = self.read_plaintext(cred).await?;
        let mac_key: Option<MacKey> = cred.master_secret.as_ref().map(mac::derive_mac_key);
        let bytes = match self.layout.unpack(&pt) {
            Ok(b) => b,
            Err(_) => return Ok(CheckOutcome::IntegrityFailure),
        };
        Ok(match mac::unframe(&bytes, mac_key.as_ref()) {
            Ok(None) => CheckOutcome::Empty,
            Ok(Some(msg)) => CheckOutcome::Message(msg),
            Err(_) => CheckOutcome::IntegrityFailure,
        })
    }
}
