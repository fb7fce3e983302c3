//! Synchronous per-server state: the vault, the sequenced operation log,
//! in-flight write sessions and follower bookkeeping.
//!
//! Server A assigns sequence numbers and applies each operation as it
//! assigns it; server B applies the leader's proposals strictly in sequence
//! order. Every mutation that must be mirrored on the peer is queued in the
//! outbox, which the caller flushes to the peer link before releasing the
//! lock, so proposals leave in sequence order.

use std::collections::{HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use mailmill_core::audit::{AuditDecision, AuditExchange, AuditVerifier, RequestId, SnipProofShare};
use mailmill_core::dpf::{EvalMatrix, Party, VirtualAddress};
use mailmill_core::field::{FieldElement, Modulus};
use mailmill_core::vault::{MailboxKey, Vault, VaultError, DUMMY_INDEX};
use mailmill_core::wire::{ErrorCode, Message, ProposedOp};
use rand::{CryptoRng, RngCore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Register,
    WriteOpen,
    WriteCommit,
    Read,
}

/// One entry of the applied operation log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SequencedOp {
    pub seq: u64,
    pub kind: OpKind,
    pub request_id: RequestId,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplicaError {
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error("peer server unavailable")]
    PeerUnavailable,
    #[error("duplicate request id")]
    Duplicate,
    #[error("operation requires the leader")]
    NotLeader,
    #[error("malformed request")]
    Malformed,
}

impl ReplicaError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ReplicaError::Vault(VaultError::AccessDenied) => ErrorCode::AccessDenied,
            ReplicaError::Vault(VaultError::AddressInUse) => ErrorCode::AddressInUse,
            ReplicaError::Vault(_) => ErrorCode::Internal,
            ReplicaError::PeerUnavailable => ErrorCode::PeerUnavailable,
            ReplicaError::Duplicate => ErrorCode::Rejected,
            ReplicaError::NotLeader | ReplicaError::Malformed => ErrorCode::Malformed,
        }
    }
}

pub type ReadOutcome<M> = Result<(Vec<FieldElement<M>>, u64), VaultError>;

#[derive(Debug)]
struct Session<M: Modulus> {
    created: Instant,
    /// Client connection that submitted the key share, once it has.
    conn: Option<u64>,
    /// Size of the active-set prefix the write is evaluated over.
    n: Option<u64>,
    proof: Option<SnipProofShare<M>>,
    matrix: Option<EvalMatrix<M>>,
    verifier: Option<AuditVerifier<M>>,
    peer: Option<AuditExchange<M>>,
    decision: Option<AuditDecision>,
    /// `Some(applied)` once the write is finished on this server.
    outcome: Option<bool>,
}

impl<M: Modulus> Session<M> {
    fn new(created: Instant) -> Self {
        Self {
            created,
            conn: None,
            n: None,
            proof: None,
            matrix: None,
            verifier: None,
            peer: None,
            decision: None,
            outcome: None,
        }
    }
}

/// Counters kept alongside the log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteCounts {
    pub accepted: u64,
    pub rejected: u64,
}

/// A served read waiting for its client, stamped with its creation time.
type PendingRead<M> = (Instant, ReadOutcome<M>);

#[derive(Debug)]
pub struct Replica<M: Modulus> {
    role: Party,
    vault: Vault<M>,
    dummy: Option<VirtualAddress>,
    /// Leader: next number to assign. Follower: next number expected.
    next_seq: u64,
    /// Highest sequence number the follower has acknowledged (leader only).
    acked: Option<u64>,
    log: Vec<SequencedOp>,
    sessions: HashMap<RequestId, Session<M>>,
    retired: HashSet<RequestId>,
    reads: HashMap<(u64, VirtualAddress), VecDeque<PendingRead<M>>>,
    outbox: Vec<Message>,
    linked: bool,
    failed: bool,
    ack_failures: u64,
    counts: WriteCounts,
}

impl<M: Modulus> Replica<M> {
    /// The leader creates its dummy mailbox immediately; the follower waits
    /// for the leader's address.
    pub fn new<R: RngCore + CryptoRng + ?Sized>(role: Party, blocks: usize, rng: &mut R) -> Self {
        let mut vault = Vault::new(blocks);
        let dummy = match role {
            Party::A => Some(vault.setup_dummy(rng).expect("fresh vault").1),
            Party::B => None,
        };
        Self {
            role,
            vault,
            dummy,
            next_seq: match role {
                Party::A => 1,
                Party::B => 0,
            },
            acked: None,
            log: Vec::new(),
            sessions: HashMap::new(),
            retired: HashSet::new(),
            reads: HashMap::new(),
            outbox: Vec::new(),
            linked: false,
            failed: false,
            ack_failures: 0,
            counts: WriteCounts::default(),
        }
    }

    pub fn role(&self) -> Party {
        self.role
    }

    pub fn vault(&self) -> &Vault<M> {
        &self.vault
    }

    pub fn dummy(&self) -> Option<VirtualAddress> {
        self.dummy
    }

    pub fn log(&self) -> &[SequencedOp] {
        &self.log
    }

    pub fn counts(&self) -> WriteCounts {
        self.counts
    }

    pub fn is_failed(&self) -> bool {
        self.failed
    }

    pub fn is_ready(&self) -> bool {
        self.linked && !self.failed && self.dummy.is_some()
    }

    /// Highest sequence number assigned (leader) or applied (follower).
    pub fn last_seq(&self) -> Option<u64> {
        self.next_seq.checked_sub(1)
    }

    pub fn acked(&self) -> Option<u64> {
        self.acked
    }

    pub fn ack_failures(&self) -> u64 {
        self.ack_failures
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Messages queued for the peer since the last call.
    pub fn drain_outbox(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.outbox)
    }

    /// Marks the peer link as up. The leader announces its dummy mailbox as
    /// sequence number 0.
    pub fn peer_linked(&mut self) {
        self.linked = true;
        if self.role == Party::A {
            let v = self.dummy.expect("leader has a dummy");
            self.outbox.push(Message::RegSync { seq: 0, v, p: DUMMY_INDEX });
            self.log.push(SequencedOp {
                seq: 0,
                kind: OpKind::Register,
                request_id: v.to_bytes(),
            });
        }
    }

    /// Peer link lost: every in-flight session fails and no further
    /// operation is accepted.
    pub fn fail(&mut self) {
        self.failed = true;
        self.outbox.clear();
    }

    fn check_leader(&self) -> Result<(), ReplicaError> {
        if self.role != Party::A {
            return Err(ReplicaError::NotLeader);
        }
        self.check_live()
    }

    fn check_live(&self) -> Result<(), ReplicaError> {
        if self.failed || !self.linked {
            return Err(ReplicaError::PeerUnavailable);
        }
        Ok(())
    }

    fn assign(&mut self, kind: OpKind, request_id: RequestId) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.log.push(SequencedOp { seq, kind, request_id });
        seq
    }

    // Leader operations.

    pub fn lead_register<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        key: MailboxKey,
        v_opt: Option<VirtualAddress>,
        rng: &mut R,
    ) -> Result<(u64, VirtualAddress), ReplicaError> {
        self.check_leader()?;
        let (p, v) = self.vault.register(key, v_opt, rng)?;
        let seq = self.assign(OpKind::Register, v.to_bytes());
        self.outbox.push(Message::RegSync { seq, v, p });
        Ok((p, v))
    }

    /// Registers `count` mailboxes with random addresses and keys that are
    /// immediately discarded. Used to build large active sets for
    /// measurements.
    pub fn lead_preload<R: RngCore + CryptoRng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Result<(), ReplicaError> {
        for _ in 0..count {
            let mut key = [0u8; 16];
            rng.fill_bytes(&mut key);
            self.lead_register(key, None, rng)?;
        }
        Ok(())
    }

    pub fn lead_read<R: RngCore + ?Sized>(&mut self, p: u64, v: VirtualAddress, rng: &mut R) -> Result<ReadOutcome<M>, ReplicaError> {
        self.check_leader()?;
        let mut request_id = [0u8; 16];
        rng.fill_bytes(&mut request_id);
        let seq = self.assign(OpKind::Read, request_id);
        self.outbox.push(Message::SeqPropose {
            seq,
            request_id,
            op: ProposedOp::Read { p, v },
        });
        Ok(self.vault.read_and_clear(p, v))
    }

    // Write sessions.

    /// Registers the client's key share for `request_id`. Returns the active
    /// prefix size when it is already fixed: immediately on the leader, or on
    /// the follower if the leader's proposal arrived first.
    pub fn open_write(&mut self, request_id: RequestId, conn: u64, now: Instant) -> Result<Option<u64>, ReplicaError> {
        self.check_live()?;
        if self.retired.contains(&request_id) {
            return Err(ReplicaError::Duplicate);
        }
        match self.role {
            Party::A => {
                if self.sessions.contains_key(&request_id) {
                    return Err(ReplicaError::Duplicate);
                }
                let n = self.vault.len() as u64;
                let seq = self.assign(OpKind::WriteOpen, request_id);
                self.outbox.push(Message::SeqPropose {
                    seq,
                    request_id,
                    op: ProposedOp::WriteOpen { n },
                });
                let mut s = Session::new(now);
                s.conn = Some(conn);
                s.n = Some(n);
                self.sessions.insert(request_id, s);
                Ok(Some(n))
            }
            Party::B => {
                let s = self.sessions.entry(request_id).or_insert_with(|| Session::new(now));
                if s.conn.is_some() {
                    return Err(ReplicaError::Duplicate);
                }
                s.conn = Some(conn);
                Ok(s.n)
            }
        }
    }

    pub fn session_n(&self, request_id: &RequestId) -> Option<u64> {
        self.sessions.get(request_id).and_then(|s| s.n)
    }

    /// Accepts a proof share from the connection that opened the session.
    pub fn submit_proof(&mut self, request_id: &RequestId, conn: u64, proof: SnipProofShare<M>) -> Result<(), ReplicaError> {
        match self.sessions.get_mut(request_id) {
            Some(s) if s.conn == Some(conn) && s.proof.is_none() => {
                s.proof = Some(proof);
                Ok(())
            }
            _ => Err(ReplicaError::Malformed),
        }
    }

    pub fn take_proof(&mut self, request_id: &RequestId) -> Option<SnipProofShare<M>> {
        self.sessions.get_mut(request_id).and_then(|s| s.proof.take())
    }

    /// Stores this server's evaluation and verifier, queues its audit
    /// message for the peer, and decides if the peer's message is in.
    pub fn audit_ready(&mut self, request_id: &RequestId, matrix: EvalMatrix<M>, verifier: AuditVerifier<M>) {
        let Some(s) = self.sessions.get_mut(request_id) else {
            return;
        };
        self.outbox.push(Message::AuditXchg {
            body: verifier.message().encode(),
        });
        s.matrix = Some(matrix);
        s.verifier = Some(verifier);
        self.try_decide(request_id);
    }

    /// The peer's audit message.
    pub fn peer_exchange(&mut self, xchg: AuditExchange<M>) {
        let rid = xchg.request_id;
        let Some(s) = self.sessions.get_mut(&rid) else {
            return;
        };
        if s.peer.is_none() {
            s.peer = Some(xchg);
            self.try_decide(&rid);
        }
    }

    fn try_decide(&mut self, request_id: &RequestId) {
        let Some(s) = self.sessions.get_mut(request_id) else {
            return;
        };
        if s.decision.is_some() {
            return;
        }
        let (Some(verifier), Some(peer)) = (&s.verifier, &s.peer) else {
            return;
        };
        let decision = verifier.decide(peer);
        s.decision = Some(decision);
        if !decision.accept {
            s.outcome = Some(false);
            s.matrix = None;
            self.counts.rejected += 1;
            return;
        }
        if self.role == Party::A {
            let matrix = s.matrix.take().expect("verifier is stored with its matrix");
            s.outcome = Some(true);
            let seq = self.assign(OpKind::WriteCommit, *request_id);
            self.vault
                .apply_write(&matrix)
                .expect("matrix was evaluated over a prefix of this vault");
            self.counts.accepted += 1;
            self.outbox.push(Message::SeqPropose {
                seq,
                request_id: *request_id,
                op: ProposedOp::WriteCommit,
            });
        }
    }

    /// `Some(applied)` once the write has finished on this server.
    pub fn outcome(&self, request_id: &RequestId) -> Option<bool> {
        self.sessions.get(request_id).and_then(|s| s.outcome)
    }

    /// Drops a session and refuses its request id from now on.
    pub fn retire(&mut self, request_id: &RequestId) {
        self.sessions.remove(request_id);
        self.retired.insert(*request_id);
    }

    /// Removes sessions and unclaimed read results older than `timeout`.
    pub fn expire(&mut self, now: Instant, timeout: Duration) {
        let stale: Vec<RequestId> = self
            .sessions
            .iter()
            .filter(|(_, s)| now.duration_since(s.created) > timeout)
            .map(|(rid, _)| *rid)
            .collect();
        for rid in stale {
            self.retire(&rid);
        }
        self.reads.retain(|_, q| {
            while q.front().is_some_and(|(t, _)| now.duration_since(*t) > timeout) {
                q.pop_front();
            }
            !q.is_empty()
        });
    }

    // Follower operations.

    /// Installs this server's key for a mailbox the leader registered.
    /// `None` until the leader's registration has been applied here.
    pub fn follower_register(&mut self, key: MailboxKey, v: VirtualAddress) -> Option<Result<u64, ReplicaError>> {
        if let Err(e) = self.check_live() {
            return Some(Err(e));
        }
        self.vault.lookup(&v)?;
        Some(self.vault.install_key(v, key).map_err(Into::into))
    }

    /// Claims the result of a sequenced read of `(p, v)`.
    pub fn take_read(&mut self, p: u64, v: VirtualAddress) -> Option<ReadOutcome<M>> {
        let q = self.reads.get_mut(&(p, v))?;
        let out = q.pop_front().map(|(_, r)| r);
        if q.is_empty() {
            self.reads.remove(&(p, v));
        }
        out
    }

    /// Applies one message from the leader and returns the acknowledgement.
    pub fn follow<R: RngCore + CryptoRng + ?Sized>(&mut self, msg: Message, now: Instant, rng: &mut R) -> Option<Message> {
        let (seq, ok) = match msg {
            Message::RegSync { seq, v, p } => {
                let ok = self.check_seq(seq) && self.apply_reg_sync(seq, v, p, rng);
                (seq, ok)
            }
            Message::SeqPropose { seq, request_id, op } => {
                let ok = self.check_seq(seq) && self.apply_proposal(seq, request_id, op, now);
                (seq, ok)
            }
            _ => return None,
        };
        Some(Message::SeqAck { seq, ok })
    }

    fn check_seq(&mut self, seq: u64) -> bool {
        if self.role != Party::B || seq != self.next_seq {
            tracing::error!(seq, expected = self.next_seq, "sequence gap from leader");
            self.fail();
            return false;
        }
        self.next_seq += 1;
        true
    }

    fn apply_reg_sync<R: RngCore + CryptoRng + ?Sized>(&mut self, seq: u64, v: VirtualAddress, p: u64, rng: &mut R) -> bool {
        self.log.push(SequencedOp {
            seq,
            kind: OpKind::Register,
            request_id: v.to_bytes(),
        });
        if seq == 0 {
            if p != DUMMY_INDEX || self.vault.setup_dummy_at(v, rng).is_err() {
                return false;
            }
            self.dummy = Some(v);
            return true;
        }
        match self.vault.register_at(None, v) {
            Ok(actual) if actual == p => true,
            Ok(actual) => {
                tracing::error!(expected = p, actual, "page tables diverged");
                self.fail();
                false
            }
            Err(_) => false,
        }
    }

    fn apply_proposal(&mut self, seq: u64, request_id: RequestId, op: ProposedOp, now: Instant) -> bool {
        match op {
            ProposedOp::WriteOpen { n } => {
                self.log.push(SequencedOp {
                    seq,
                    kind: OpKind::WriteOpen,
                    request_id,
                });
                if self.retired.contains(&request_id) || n > self.vault.len() as u64 {
                    return false;
                }
                let s = self.sessions.entry(request_id).or_insert_with(|| Session::new(now));
                if s.n.is_some() {
                    return false;
                }
                s.n = Some(n);
                true
            }
            ProposedOp::WriteCommit => {
                self.log.push(SequencedOp {
                    seq,
                    kind: OpKind::WriteCommit,
                    request_id,
                });
                let Some(s) = self.sessions.get_mut(&request_id) else {
                    return false;
                };
                let accepted = s.decision.is_some_and(|d| d.accept);
                let Some(matrix) = s.matrix.take().filter(|_| accepted) else {
                    return false;
                };
                s.outcome = Some(true);
                self.counts.accepted += 1;
                self.vault.apply_write(&matrix).is_ok()
            }
            ProposedOp::Read { p, v } => {
                self.log.push(SequencedOp {
                    seq,
                    kind: OpKind::Read,
                    request_id,
                });
                let out = self.vault.read_and_clear(p, v);
                let ok = out.is_ok();
                self.reads.entry((p, v)).or_default().push_back((now, out));
                ok
            }
        }
    }

    /// Leader side of an acknowledgement.
    pub fn on_ack(&mut self, seq: u64, ok: bool) {
        self.acked = Some(self.acked.map_or(seq, |a| a.max(seq)));
        if !ok {
            self.ack_failures += 1;
            if let Some(op) = self.log.iter().find(|o| o.seq == seq) {
                if op.kind != OpKind::Read {
                    tracing::warn!(seq, kind = ?op.kind, "follower refused a sequenced operation");
                }
            }
        }
    }
}
