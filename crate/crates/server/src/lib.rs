//! Mailbox server daemon.
//!
//! Each server runs one [`Replica`] behind a mutex, a TCP listener for
//! clients, and one persistent link to its peer. Server A (the leader) dials
//! server B and assigns every sequence number. Write sessions evaluate their
//! DPF share outside the lock and only touch the replica to record progress.
//!
//! [`spawn_pair`] starts both servers on loopback for tests and benchmarks.

pub mod replica;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use hmac::{Hmac, Mac};
use mailmill_core::audit::{self, AuditExchange, AuditVerifier, RequestId, SnipProofShare};
use mailmill_core::dpf::{DpfKey, DpfParams, Party, VirtualAddress};
use mailmill_core::field::Modulus;
use mailmill_core::payload::MessageLayout;
use mailmill_core::vault::Vault;
use mailmill_core::wire::io::{read_message, write_message};
use mailmill_core::wire::{ErrorCode, Message};
use sha2::Sha256;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, Notify};
use tokio::task::{JoinHandle, JoinSet};

pub use replica::{OpKind, Replica, ReplicaError, SequencedOp, WriteCounts};

pub const SHARED_SECRET_BYTES: usize = 32;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub role: Party,
    pub listen: SocketAddr,
    /// Where server A dials server B. Unused by B.
    pub peer: Option<SocketAddr>,
    pub shared_secret: [u8; SHARED_SECRET_BYTES],
    /// Message size `B` in bytes.
    pub msg_bytes: usize,
    /// Lifetime of a write session and of an unclaimed read result.
    pub session_timeout: Duration,
}

impl ServerConfig {
    pub fn new(role: Party, listen: SocketAddr, peer: Option<SocketAddr>, shared_secret: [u8; 32], msg_bytes: usize) -> Self {
        Self {
            role,
            listen,
            peer,
            shared_secret,
            msg_bytes,
            session_timeout: Duration::from_secs(60),
        }
    }
}

/// Wire-level byte counters, frames included.
#[derive(Debug, Default)]
struct Counters {
    client_in: AtomicU64,
    client_out: AtomicU64,
    peer_in: AtomicU64,
    peer_out: AtomicU64,
    audit_out: AtomicU64,
    eval_ns: AtomicU64,
    audit_ns: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Timings {
    pub eval: Duration,
    /// Sketch, proof share checks and the exchange message.
    pub audit: Duration,
}

impl std::ops::Sub for Timings {
    type Output = Timings;
    fn sub(self, rhs: Timings) -> Timings {
        Timings {
            eval: self.eval - rhs.eval,
            audit: self.audit - rhs.audit,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Traffic {
    pub client_in: u64,
    pub client_out: u64,
    pub peer_in: u64,
    pub peer_out: u64,
    /// Bytes of `AUDIT_XCHG` frames sent to the peer.
    pub audit_out: u64,
}

impl std::ops::Sub for Traffic {
    type Output = Traffic;

    fn sub(self, rhs: Traffic) -> Traffic {
        Traffic {
            client_in: self.client_in - rhs.client_in,
            client_out: self.client_out - rhs.client_out,
            peer_in: self.peer_in - rhs.peer_in,
            peer_out: self.peer_out - rhs.peer_out,
            audit_out: self.audit_out - rhs.audit_out,
        }
    }
}

struct Guarded<M: Modulus> {
    replica: Replica<M>,
    peer_tx: Option<mpsc::UnboundedSender<Message>>,
}

struct Shared<M: Modulus> {
    cfg: ServerConfig,
    params: DpfParams,
    state: Mutex<Guarded<M>>,
    changed: Notify,
    counters: Counters,
    next_conn: AtomicU64,
}

impl<M: Modulus> Shared<M> {
    fn lock(&self) -> MutexGuard<'_, Guarded<M>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` on the replica, forwards anything it queued for the peer
    /// while still holding the lock, and wakes waiters.
    fn with_state<R>(&self, f: impl FnOnce(&mut Replica<M>) -> R) -> R {
        let out = {
            let mut g = self.lock();
            let out = f(&mut g.replica);
            let msgs = g.replica.drain_outbox();
            if !msgs.is_empty() {
                let sent = match &g.peer_tx {
                    Some(tx) => msgs.into_iter().all(|m| tx.send(m).is_ok()),
                    None => false,
                };
                if !sent {
                    g.replica.fail();
                }
            }
            out
        };
        self.changed.notify_waiters();
        out
    }

    /// Polls `f` under the lock until it yields a value, the deadline passes
    /// or the peer link fails. `f` must not queue peer messages.
    async fn wait_for<T>(&self, deadline: Instant, mut f: impl FnMut(&mut Replica<M>) -> Option<T>) -> Result<T, ErrorCode> {
        loop {
            let notified = self.changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let ready = {
                let mut g = self.lock();
                if g.replica.is_failed() {
                    Some(Err(ErrorCode::PeerUnavailable))
                } else {
                    f(&mut g.replica).map(Ok)
                }
            };
            if let Some(out) = ready {
                return out;
            }
            if tokio::time::timeout_at(deadline.into(), notified).await.is_err() {
                return Err(ErrorCode::Timeout);
            }
        }
    }

    fn deadline(&self) -> Instant {
        Instant::now() + self.cfg.session_timeout
    }
}

fn hello_tag(secret: &[u8; 32], role: Party) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(secret).expect("hmac accepts any key size");
    mac.update(b"peer-hello");
    mac.update(&[role as u8]);
    mac.finalize().into_bytes().into()
}

/// A running server.
pub struct ServerHandle<M: Modulus> {
    shared: Arc<Shared<M>>,
    local_addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl<M: Modulus> ServerHandle<M> {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn role(&self) -> Party {
        self.shared.cfg.role
    }

    pub fn traffic(&self) -> Traffic {
        let c = &self.shared.counters;
        Traffic {
            client_in: c.client_in.load(Ordering::Relaxed),
            client_out: c.client_out.load(Ordering::Relaxed),
            peer_in: c.peer_in.load(Ordering::Relaxed),
            peer_out: c.peer_out.load(Ordering::Relaxed),
            audit_out: c.audit_out.load(Ordering::Relaxed),
        }
    }

    /// Cumulative DPF evaluation and server-side audit time.
    pub fn timings(&self) -> Timings {
        let c = &self.shared.counters;
        Timings {
            eval: Duration::from_nanos(c.eval_ns.load(Ordering::Relaxed)),
            audit: Duration::from_nanos(c.audit_ns.load(Ordering::Relaxed)),
        }
    }

    /// Runs `f` against the replica under the server lock.
    pub fn inspect<R>(&self, f: impl FnOnce(&Replica<M>) -> R) -> R {
        f(&self.shared.lock().replica)
    }

    pub fn public_digest(&self) -> [u8; 32] {
        self.inspect(|r| r.vault().public_digest())
    }

    pub fn vault_snapshot(&self) -> Vault<M> {
        self.inspect(|r| r.vault().clone())
    }

    pub fn log(&self) -> Vec<SequencedOp> {
        self.inspect(|r| r.log().to_vec())
    }

    pub fn counts(&self) -> WriteCounts {
        self.inspect(|r| r.counts())
    }

    pub fn dummy(&self) -> Option<VirtualAddress> {
        self.inspect(|r| r.dummy())
    }

    /// Waits until the peer link is up and the dummy mailbox is known.
    pub async fn ready(&self, timeout: Duration) -> Result<(), ErrorCode> {
        self.shared.wait_for(Instant::now() + timeout, |r| r.is_ready().then_some(())).await
    }

    /// Leader only: registers `count` throwaway mailboxes and waits until the
    /// follower has acknowledged them.
    pub async fn preload(&self, count: usize) -> Result<(), ErrorCode> {
        let last = self.shared.with_state(|r| {
            r.lead_preload(count, &mut rand::thread_rng())
                .map(|_| r.last_seq())
                .map_err(|e| e.code())
        })?;
        self.synced(last).await
    }

    /// Leader only: waits until the follower has acknowledged everything
    /// assigned so far.
    pub async fn sync(&self) -> Result<(), ErrorCode> {
        let last = self.inspect(|r| r.last_seq());
        self.synced(last).await
    }

    async fn synced(&self, last: Option<u64>) -> Result<(), ErrorCode> {
        self.shared
            .wait_for(Instant::now() + Duration::from_secs(120), |r| (r.acked() >= last).then_some(()))
            .await
    }

    pub fn shutdown(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
        let mut g = self.shared.lock();
        g.peer_tx = None;
        g.replica.fail();
        drop(g);
        self.shared.changed.notify_waiters();
    }
}

impl<M: Modulus> Drop for ServerHandle<M> {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds the listener and starts serving. Server A keeps retrying the peer
/// until B answers.
pub async fn spawn<M: Modulus>(cfg: ServerConfig) -> std::io::Result<ServerHandle<M>> {
    let listener = TcpListener::bind(cfg.listen).await?;
    let local_addr = listener.local_addr()?;
    let layout = MessageLayout::new::<M>(cfg.msg_bytes);
    let params = DpfParams::production(layout.width());
    let replica = Replica::new(cfg.role, layout.blocks(), &mut rand::thread_rng());
    let shared = Arc::new(Shared {
        cfg,
        params,
        state: Mutex::new(Guarded { replica, peer_tx: None }),
        changed: Notify::new(),
        counters: Counters::default(),
        next_conn: AtomicU64::new(1),
    });
    let mut tasks = vec![tokio::spawn(accept_loop(shared.clone(), listener))];
    tasks.push(tokio::spawn(janitor(shared.clone())));
    if shared.cfg.role == Party::A {
        let peer = shared
            .cfg
            .peer
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "server A needs a peer address"))?;
        tasks.push(tokio::spawn(dial_peer(shared.clone(), peer)));
    }
    tracing::info!(role = ?shared.cfg.role, addr = %local_addr, modulus = M::NAME, "listening");
    Ok(ServerHandle { shared, local_addr, tasks })
}

/// Starts servers A and B on loopback ports and waits for their link.
pub async fn spawn_pair<M: Modulus>(msg_bytes: usize) -> std::io::Result<(ServerHandle<M>, ServerHandle<M>)> {
    let mut secret = [0u8; 32];
    rand::RngCore::fill_bytes(&mut rand::thread_rng(), &mut secret);
    let local: SocketAddr = ([127, 0, 0, 1], 0).into();
    let b = spawn::<M>(ServerConfig::new(Party::B, local, None, secret, msg_bytes)).await?;
    let a = spawn::<M>(ServerConfig::new(Party::A, local, Some(b.local_addr()), secret, msg_bytes)).await?;
    for h in [&a, &b] {
        h.ready(Duration::from_secs(10))
            .await
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::TimedOut, e.to_string()))?;
    }
    Ok((a, b))
}

async fn janitor<M: Modulus>(shared: Arc<Shared<M>>) {
    let mut tick = tokio::time::interval(Duration::from_secs(1));
    loop {
        tick.tick().await;
        let timeout = shared.cfg.session_timeout;
        shared.with_state(|r| r.expire(Instant::now(), timeout));
    }
}

/// Connection tasks live in a `JoinSet`, so aborting this loop closes them.
async fn accept_loop<M: Modulus>(shared: Arc<Shared<M>>, listener: TcpListener) {
    let mut conns = JoinSet::new();
    loop {
        while conns.try_join_next().is_some() {}
        let (stream, addr) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let shared = shared.clone();
        conns.spawn(async move {
            let (mut rd, wr) = stream.into_split();
            let first = match read_message(&mut rd).await {
                Ok(Some(m)) => m,
                _ => return,
            };
            if let (Message::PeerHello { tag }, Party::B) = (&first.0, shared.cfg.role) {
                shared.counters.peer_in.fetch_add(first.1 as u64, Ordering::Relaxed);
                if *tag != hello_tag(&shared.cfg.shared_secret, Party::A) || shared.lock().peer_tx.is_some() {
                    tracing::warn!(%addr, "rejected peer handshake");
                    return;
                }
                run_peer(shared, rd, wr).await;
            } else {
                serve_client(shared, rd, wr, first).await;
            }
        });
    }
}

async fn dial_peer<M: Modulus>(shared: Arc<Shared<M>>, peer: SocketAddr) {
    let mut delay = Duration::from_millis(20);
    let stream = loop {
        match TcpStream::connect(peer).await {
            Ok(s) => break s,
            Err(e) => {
                tracing::debug!(error = %e, "peer not reachable yet");
                tokio::time::sleep(delay).await;
                delay = (delay * 2).min(Duration::from_secs(1));
            }
        }
    };
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let hello = Message::PeerHello {
        tag: hello_tag(&shared.cfg.shared_secret, Party::A),
    };
    match write_message(&mut wr, &hello).await {
        Ok(n) => shared.counters.peer_out.fetch_add(n as u64, Ordering::Relaxed),
        Err(_) => return shared.with_state(|r| r.fail()),
    };
    match read_message(&mut rd).await {
        Ok(Some((Message::PeerHello { tag }, n))) if tag == hello_tag(&shared.cfg.shared_secret, Party::B) => {
            shared.counters.peer_in.fetch_add(n as u64, Ordering::Relaxed);
        }
        _ => {
            tracing::error!("peer handshake failed");
            return shared.with_state(|r| r.fail());
        }
    }
    run_peer(shared, rd, wr).await;
}

/// Drives an authenticated peer link until it drops, then fails closed.
async fn run_peer<M: Modulus, R, W>(shared: Arc<Shared<M>>, mut rd: R, mut wr: W)
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    if shared.cfg.role == Party::B {
        let reply = Message::PeerHello {
            tag: hello_tag(&shared.cfg.shared_secret, Party::B),
        };
        let _ = tx.send(reply);
    }
    let writer_shared = shared.clone();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            let audit = matches!(msg, Message::AuditXchg { .. });
            match write_message(&mut wr, &msg).await {
                Ok(n) => {
                    let c = &writer_shared.counters;
                    c.peer_out.fetch_add(n as u64, Ordering::Relaxed);
                    if audit {
                        c.audit_out.fetch_add(n as u64, Ordering::Relaxed);
                    }
                }
                Err(_) => break,
            }
        }
    });
    shared.lock().peer_tx = Some(tx);
    shared.with_state(|r| r.peer_linked());
    tracing::info!(role = ?shared.cfg.role, "peer link up");

    loop {
        let (msg, n) = match read_message(&mut rd).await {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e) => {
                tracing::warn!(error = %e, "peer link error");
                break;
            }
        };
        shared.counters.peer_in.fetch_add(n as u64, Ordering::Relaxed);
        match msg {
            Message::AuditXchg { body } => match AuditExchange::<M>::decode(&body) {
                Ok(x) => shared.with_state(|r| r.peer_exchange(x)),
                Err(e) => tracing::warn!(error = %e, "bad audit exchange from peer"),
            },
            Message::SeqAck { seq, ok } if shared.cfg.role == Party::A => shared.with_state(|r| r.on_ack(seq, ok)),
            m @ (Message::SeqPropose { .. } | Message::RegSync { .. }) if shared.cfg.role == Party::B => {
                let ack = shared.with_state(|r| r.follow(m, Instant::now(), &mut rand::thread_rng()));
                if let Some(ack) = ack {
                    let mut g = shared.lock();
                    if let Some(tx) = &g.peer_tx {
                        if tx.send(ack).is_err() {
                            g.replica.fail();
                        }
                    }
                }
            }
            other => tracing::warn!(ty = other.msg_type(), "unexpected message on peer link"),
        }
    }
    tracing::error!(role = ?shared.cfg.role, "peer link lost; failing closed");
    {
        let mut g = shared.lock();
        g.peer_tx = None;
        g.replica.fail();
    }
    shared.changed.notify_waiters();
    writer.abort();
}

async fn serve_client<M: Modulus, R, W>(shared: Arc<Shared<M>>, mut rd: R, mut wr: W, first: (Message, usize))
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let writer_shared = shared.clone();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            match write_message(&mut wr, &msg).await {
                Ok(n) => {
                    writer_shared.counters.client_out.fetch_add(n as u64, Ordering::Relaxed);
                }
                Err(_) => break,
            }
        }
    });
    let mut next = Some(first);
    loop {
        let (msg, n) = match next.take() {
            Some(m) => m,
            None => match read_message(&mut rd).await {
                Ok(Some(m)) => m,
                _ => break,
            },
        };
        shared.counters.client_in.fetch_add(n as u64, Ordering::Relaxed);
        dispatch(&shared, conn, &tx, msg);
    }
    drop(tx);
    let _ = writer.await;
}

fn dispatch<M: Modulus>(shared: &Arc<Shared<M>>, conn: u64, tx: &mpsc::UnboundedSender<Message>, msg: Message) {
    let shared = shared.clone();
    let tx = tx.clone();
    match msg {
        Message::Register { key, v_opt } => {
            tokio::spawn(async move {
                let reply = match handle_register(&shared, key, v_opt).await {
                    Ok((p, v)) => Message::RegisterResp { p, v },
                    Err(code) => Message::Error { code },
                };
                let _ = tx.send(reply);
            });
        }
        Message::DummyQuery => {
            tokio::spawn(async move {
                let reply = match shared.wait_for(shared.deadline(), |r| r.dummy()).await {
                    Ok(v) => Message::DummyResp { p: 0, v },
                    Err(code) => Message::Error { code },
                };
                let _ = tx.send(reply);
            });
        }
        Message::Read { p, v } => {
            tokio::spawn(async move {
                let reply = match handle_read(&shared, p, v).await {
                    Ok((ct, nonce)) => Message::ReadResp {
                        nonce,
                        ct: ct.iter().flat_map(|x| x.to_bytes()).collect(),
                    },
                    Err(code) => Message::Error { code },
                };
                let _ = tx.send(reply);
            });
        }
        Message::WriteKey { request_id, key } => {
            tokio::spawn(async move {
                let reply = match handle_write(&shared, conn, &tx, request_id, &key).await {
                    Ok(accept) => Message::WriteResult { request_id, accept },
                    Err(code) => Message::Error { code },
                };
                let _ = tx.send(reply);
            });
        }
        Message::Proof { request_id, proof } => {
            let res = SnipProofShare::<M>::decode(&proof)
                .map_err(|_| ReplicaError::Malformed)
                .and_then(|p| shared.with_state(|r| r.submit_proof(&request_id, conn, p)));
            if let Err(e) = res {
                let _ = tx.send(Message::Error { code: e.code() });
            }
        }
        other => {
            tracing::debug!(ty = other.msg_type(), "unexpected client message");
            let _ = tx.send(Message::Error {
                code: ErrorCode::Malformed,
            });
        }
    }
}

async fn handle_register<M: Modulus>(
    shared: &Shared<M>,
    key: [u8; 16],
    v_opt: Option<VirtualAddress>,
) -> Result<(u64, VirtualAddress), ErrorCode> {
    match shared.cfg.role {
        Party::A => shared
            .with_state(|r| r.lead_register(key, v_opt, &mut rand::thread_rng()))
            .map_err(|e| e.code()),
        Party::B => {
            let v = v_opt.ok_or(ErrorCode::Malformed)?;
            let p = shared
                .wait_for(shared.deadline(), |r| r.follower_register(key, v))
                .await?
                .map_err(|e| e.code())?;
            Ok((p, v))
        }
    }
}

type Ciphertext<M> = Vec<mailmill_core::field::FieldElement<M>>;

async fn handle_read<M: Modulus>(shared: &Shared<M>, p: u64, v: VirtualAddress) -> Result<(Ciphertext<M>, u64), ErrorCode> {
    let out = match shared.cfg.role {
        Party::A => shared
            .with_state(|r| r.lead_read(p, v, &mut rand::thread_rng()))
            .map_err(|e| e.code())?,
        Party::B => shared.wait_for(shared.deadline(), |r| r.take_read(p, v)).await?,
    };
    out.map_err(|_| ErrorCode::AccessDenied)
}

/// Retires the session when the write task ends, however it ends.
struct SessionGuard<'a, M: Modulus> {
    shared: &'a Shared<M>,
    request_id: RequestId,
}

impl<M: Modulus> Drop for SessionGuard<'_, M> {
    fn drop(&mut self) {
        let rid = self.request_id;
        self.shared.with_state(|r| r.retire(&rid));
    }
}

async fn handle_write<M: Modulus>(
    shared: &Shared<M>,
    conn: u64,
    tx: &mpsc::UnboundedSender<Message>,
    request_id: RequestId,
    key_bytes: &[u8],
) -> Result<bool, ErrorCode> {
    let key = DpfKey::<M>::decode(key_bytes, shared.params).map_err(|_| ErrorCode::Malformed)?;
    if key.party != shared.cfg.role {
        return Err(ErrorCode::Malformed);
    }
    let deadline = shared.deadline();
    let opened = shared
        .with_state(|r| r.open_write(request_id, conn, Instant::now()))
        .map_err(|e| e.code())?;
    let _guard = SessionGuard { shared, request_id };
    let n = match opened {
        Some(n) => n,
        None => shared.wait_for(deadline, |r| r.session_n(&request_id)).await?,
    };
    let addrs = shared.with_state(|r| r.vault().address_prefix(n as usize));
    let (seed, seed2) = audit::request_seeds(&shared.cfg.shared_secret, &request_id);
    let (matrix, sketch, eval_time, sketch_time) = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let matrix = key.eval_many(&addrs);
        let eval_time = start.elapsed();
        let sketch = audit::server_sketch(&audit::audit_vector(&matrix, &addrs, &seed), &seed);
        (matrix, sketch, eval_time, start.elapsed() - eval_time)
    })
    .await
    .map_err(|_| ErrorCode::Internal)?;
    shared.counters.eval_ns.fetch_add(eval_time.as_nanos() as u64, Ordering::Relaxed);
    let _ = tx.send(Message::AuditSeed { request_id, seed: seed.0 });
    let proof = shared.wait_for(deadline, |r| r.take_proof(&request_id)).await?;
    let start = Instant::now();
    let verifier = AuditVerifier::new(request_id, &sketch, &proof, audit::challenge_point(&seed2));
    let audit_time = sketch_time + start.elapsed();
    shared.counters.audit_ns.fetch_add(audit_time.as_nanos() as u64, Ordering::Relaxed);
    shared.with_state(|r| r.audit_ready(&request_id, matrix, verifier));
    shared.wait_for(deadline, |r| r.outcome(&request_id)).await
}
