//! Two-server audit that a secret-shared write vector has Hamming weight at
//! most one.
//!
//! Each active mailbox's evaluation row `y` is first compressed to one element
//! `sum_j s_v^j y_j`, where `s_v = PRF(r, "bind", v)` depends on the mailbox's
//! virtual address. The seed `r` reaches the client only after it has sent its
//! key shares, so every block of the row is covered, and an accepted proof
//! requires knowing the target's virtual address.
//!
//! The servers hold additive shares `w_A + w_B = w` of the compressed rows. Using
//! a seed `r` they share with the client, they compute shares of
//! `m = sum(w)`, `c = <w, r>` and `C = <w, r^2>`; `w` has weight at most one
//! (with high probability over `r`) iff `c^2 - m*C = 0`. The client proves
//! that identity with two SNIPs, one per multiplication:
//!
//! * SNIP 1: `f1, g1` linear through `(0, rf1), (1, c)` and `(0, rg1), (1, c)`,
//!   `h1 = f1 * g1`;
//! * SNIP 2: `f2, g2` linear through `(0, rf2), (1, m)` and `(0, rg2), (1, C)`,
//!   `h2 = f2 * g2`.
//!
//! The servers substitute their own sketch shares for the values at point 1,
//! test `f_k(t) * g_k(t) = h_k(t)` at a challenge `t` the client cannot
//! predict, and check `h1(1) - h2(1) = 0`.

use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;

use crate::dpf::{EvalMatrix, VirtualAddress};
use crate::field::{FieldElement, Modulus, FIELD_BYTES};
use crate::prf::{label, Block, Prf};

pub const SKETCH_LABEL: Block = label(b"sketch");
pub const CHALLENGE_LABEL: Block = label(b"chal");
pub const BIND_LABEL: Block = label(b"bind");

/// Request identifier shared by the client and both servers.
pub type RequestId = [u8; 16];

/// Elements in one server's proof share.
pub const PROOF_ELEMENTS: usize = 10;
pub const PROOF_BYTES: usize = PROOF_ELEMENTS * FIELD_BYTES;
/// Field elements published by each server during verification.
pub const EXCHANGE_ELEMENTS: usize = 7;
pub const EXCHANGE_BYTES: usize = 16 + EXCHANGE_ELEMENTS * FIELD_BYTES;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuditError {
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("non-canonical field element")]
    NonCanonical,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("audit channel failed: {0}")]
pub struct ChannelError(pub String);

/// Per-request seed for the sketch randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AuditSeed(pub [u8; 16]);

/// Per-request seeds both servers derive from their shared secret:
/// `(r, seed2)` with `r = PRF(secret, "r" || request_id)` sent to the client
/// and `seed2 = PRF(secret, "t" || request_id)` kept private. The PRF is
/// HMAC-SHA-256 truncated to 16 bytes.
pub fn request_seeds(shared_secret: &[u8; 32], request_id: &RequestId) -> (AuditSeed, AuditSeed) {
    let derive = |tag: &[u8]| {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(shared_secret).expect("hmac accepts any key size");
        mac.update(tag);
        mac.update(request_id);
        AuditSeed(mac.finalize().into_bytes()[..16].try_into().unwrap())
    };
    (derive(b"r"), derive(b"t"))
}

/// `s_v` for one virtual address.
pub fn binding_point<M: Modulus>(seed: &AuditSeed, v: VirtualAddress) -> FieldElement<M> {
    Prf::new(&seed.0).element(&BIND_LABEL, v.0)
}

/// `sum_j s^j row_j`.
pub fn compress_row<M: Modulus>(s: FieldElement<M>, row: &[FieldElement<M>]) -> FieldElement<M> {
    row.iter().rev().fold(FieldElement::ZERO, |acc, &y| acc * s + y)
}

/// One server's audit input: each row compressed at its own address.
pub fn audit_vector<M: Modulus>(matrix: &EvalMatrix<M>, addrs: &[VirtualAddress], seed: &AuditSeed) -> Vec<FieldElement<M>> {
    assert_eq!(matrix.rows(), addrs.len(), "one address per row");
    let prf = Prf::new(&seed.0);
    matrix
        .iter_rows()
        .zip(addrs)
        .map(|(row, v)| compress_row(prf.element(&BIND_LABEL, v.0), row))
        .collect()
}

/// The client's counterpart of [`audit_vector`] for one key evaluated at `v`.
pub fn target_input<M: Modulus>(seed: &AuditSeed, v: VirtualAddress, row: &[FieldElement<M>]) -> FieldElement<M> {
    compress_row(binding_point(seed, v), row)
}

/// `r_i`, computable for a single index in O(1).
pub fn derive_sketch_rand<M: Modulus>(seed: &AuditSeed, i: u64) -> FieldElement<M> {
    Prf::new(&seed.0).element(&SKETCH_LABEL, i as u128)
}

/// `r_0, ..., r_{n-1}`.
pub fn sketch_randomness<M: Modulus>(seed: &AuditSeed, n: usize) -> Vec<FieldElement<M>> {
    Prf::new(&seed.0).stream(&SKETCH_LABEL, n)
}

/// One server's shares of `(m, c, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServerSketch<M: Modulus> {
    pub m: FieldElement<M>,
    pub c: FieldElement<M>,
    pub big_c: FieldElement<M>,
}

impl<M: Modulus> std::ops::Add for ServerSketch<M> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            m: self.m + rhs.m,
            c: self.c + rhs.c,
            big_c: self.big_c + rhs.big_c,
        }
    }
}

/// `(sum w_i, <w, r>, <w, r^2>)` over one server's share of the audit vector.
pub fn server_sketch<M: Modulus>(w: &[FieldElement<M>], seed: &AuditSeed) -> ServerSketch<M> {
    const CHUNK: usize = 1024;
    let prf = Prf::new(&seed.0);
    let mut r = vec![FieldElement::ZERO; CHUNK.min(w.len())];
    let mut out = ServerSketch::default();
    for (idx, chunk) in w.chunks(CHUNK).enumerate() {
        let r = &mut r[..chunk.len()];
        prf.fill(&SKETCH_LABEL, (idx * CHUNK) as u128, r);
        for (&wi, &ri) in chunk.iter().zip(r.iter()) {
            let wr = wi * ri;
            out.m += wi;
            out.c += wr;
            out.big_c += wr * ri;
        }
    }
    out
}

/// The client's view of `(m, c, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientChecks<M: Modulus> {
    pub m: FieldElement<M>,
    pub c: FieldElement<M>,
    pub big_c: FieldElement<M>,
}

/// Computes `(m, c, C)` from the two keys' compressed outputs at the target.
pub fn client_checks<M: Modulus>(seed: &AuditSeed, i_star: u64, wa_t: FieldElement<M>, wb_t: FieldElement<M>) -> ClientChecks<M> {
    let r = derive_sketch_rand::<M>(seed, i_star);
    let m = wa_t + wb_t;
    let c = r * m;
    ClientChecks { m, c, big_c: r * c }
}

/// [`client_checks`] from both keys' full evaluation rows at target `(i_star, v)`.
pub fn target_checks<M: Modulus>(
    seed: &AuditSeed,
    i_star: u64,
    v: VirtualAddress,
    row_a: &[FieldElement<M>],
    row_b: &[FieldElement<M>],
) -> ClientChecks<M> {
    let s = binding_point(seed, v);
    client_checks(seed, i_star, compress_row(s, row_a), compress_row(s, row_b))
}

/// Share of one SNIP: masks at point 0 and the coefficients of `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SnipShare<M: Modulus> {
    pub rf: FieldElement<M>,
    pub rg: FieldElement<M>,
    /// `h(x) = h[0] + h[1] x + h[2] x^2`.
    pub h: [FieldElement<M>; 3],
}

impl<M: Modulus> SnipShare<M> {
    fn h_at(&self, x: FieldElement<M>) -> FieldElement<M> {
        self.h[0] + x * (self.h[1] + x * self.h[2])
    }

    fn h_at_one(&self) -> FieldElement<M> {
        self.h[0] + self.h[1] + self.h[2]
    }
}

/// One server's share of the proof: SNIP 1 (`c * c`) and SNIP 2 (`m * C`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SnipProofShare<M: Modulus> {
    pub snips: [SnipShare<M>; 2],
}

impl<M: Modulus> SnipProofShare<M> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PROOF_BYTES);
        for s in &self.snips {
            for x in [s.rf, s.rg, s.h[0], s.h[1], s.h[2]] {
                out.extend_from_slice(&x.to_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AuditError> {
        let xs = decode_elements::<M>(bytes, PROOF_ELEMENTS)?;
        let snip = |o: usize| SnipShare {
            rf: xs[o],
            rg: xs[o + 1],
            h: [xs[o + 2], xs[o + 3], xs[o + 4]],
        };
        Ok(Self { snips: [snip(0), snip(5)] })
    }
}

fn decode_elements<M: Modulus>(bytes: &[u8], count: usize) -> Result<Vec<FieldElement<M>>, AuditError> {
    if bytes.len() != count * FIELD_BYTES {
        return Err(AuditError::Length {
            expected: count * FIELD_BYTES,
            actual: bytes.len(),
        });
    }
    bytes
        .chunks_exact(FIELD_BYTES)
        .map(|c| FieldElement::from_canonical_bytes(c.try_into().unwrap()))
        .collect::<Result<_, _>>()
        .map_err(|_| AuditError::NonCanonical)
}

/// Coefficients of `(a0 + a1 x)(b0 + b1 x)`.
fn mul_linear<M: Modulus>(a: [FieldElement<M>; 2], b: [FieldElement<M>; 2]) -> [FieldElement<M>; 3] {
    [a[0] * b[0], a[0] * b[1] + a[1] * b[0], a[1] * b[1]]
}

fn split<M: Modulus, R: RngCore + CryptoRng + ?Sized>(x: FieldElement<M>, rng: &mut R) -> (FieldElement<M>, FieldElement<M>) {
    let a = FieldElement::random(rng);
    (a, x - a)
}

/// Full (unshared) SNIP for one multiplication: `f` through `(0, rf), (1, left)`,
/// `g` through `(0, rg), (1, right)`, and `h = f * g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Snip<M: Modulus> {
    pub rf: FieldElement<M>,
    pub rg: FieldElement<M>,
    pub h: [FieldElement<M>; 3],
}

impl<M: Modulus> Snip<M> {
    pub fn new(rf: FieldElement<M>, rg: FieldElement<M>, left: FieldElement<M>, right: FieldElement<M>) -> Self {
        let f = [rf, left - rf];
        let g = [rg, right - rg];
        Self {
            rf,
            rg,
            h: mul_linear(f, g),
        }
    }

    fn share<R: RngCore + CryptoRng + ?Sized>(&self, rng: &mut R) -> (SnipShare<M>, SnipShare<M>) {
        let (rf_a, rf_b) = split(self.rf, rng);
        let (rg_a, rg_b) = split(self.rg, rng);
        let (h0a, h0b) = split(self.h[0], rng);
        let (h1a, h1b) = split(self.h[1], rng);
        let (h2a, h2b) = split(self.h[2], rng);
        (
            SnipShare {
                rf: rf_a,
                rg: rg_a,
                h: [h0a, h1a, h2a],
            },
            SnipShare {
                rf: rf_b,
                rg: rg_b,
                h: [h0b, h1b, h2b],
            },
        )
    }
}

/// Splits two full SNIPs into the two servers' proof shares.
pub fn share_proof<M: Modulus, R: RngCore + CryptoRng + ?Sized>(
    snips: [Snip<M>; 2],
    rng: &mut R,
) -> (SnipProofShare<M>, SnipProofShare<M>) {
    let (a1, b1) = snips[0].share(rng);
    let (a2, b2) = snips[1].share(rng);
    (SnipProofShare { snips: [a1, a2] }, SnipProofShare { snips: [b1, b2] })
}

/// Builds the client's proof that `c^2 - m*C = 0`.
pub fn snip_gen<M: Modulus, R: RngCore + CryptoRng + ?Sized>(
    checks: &ClientChecks<M>,
    rng: &mut R,
) -> (SnipProofShare<M>, SnipProofShare<M>) {
    let snip1 = Snip::new(FieldElement::random(rng), FieldElement::random(rng), checks.c, checks.c);
    let snip2 = Snip::new(FieldElement::random(rng), FieldElement::random(rng), checks.m, checks.big_c);
    share_proof([snip1, snip2], rng)
}

/// Challenge point derived from the servers' private seed; never 0 or 1.
pub fn challenge_point<M: Modulus>(seed2: &AuditSeed) -> FieldElement<M> {
    let prf = Prf::new(&seed2.0);
    (0u128..)
        .map(|j| prf.element::<M>(&CHALLENGE_LABEL, j))
        .find(|t| t.value() > 1)
        .expect("PRF stream is unbounded")
}

/// Values one server publishes to the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditExchange<M: Modulus> {
    pub request_id: RequestId,
    /// `f1(t), g1(t), h1(t), f2(t), g2(t), h2(t), h1(1) - h2(1)` shares.
    pub values: [FieldElement<M>; EXCHANGE_ELEMENTS],
}

impl<M: Modulus> AuditExchange<M> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EXCHANGE_BYTES);
        out.extend_from_slice(&self.request_id);
        for x in &self.values {
            out.extend_from_slice(&x.to_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, AuditError> {
        if bytes.len() != EXCHANGE_BYTES {
            return Err(AuditError::Length {
                expected: EXCHANGE_BYTES,
                actual: bytes.len(),
            });
        }
        let request_id = bytes[..16].try_into().unwrap();
        let xs = decode_elements::<M>(&bytes[16..], EXCHANGE_ELEMENTS)?;
        Ok(Self {
            request_id,
            values: xs.try_into().unwrap(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditReason {
    Ok,
    SketchMismatch,
    SeedMismatch,
    DecodeError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditDecision {
    pub accept: bool,
    pub reason: AuditReason,
}

impl AuditDecision {
    pub const ACCEPT: Self = Self {
        accept: true,
        reason: AuditReason::Ok,
    };

    pub fn reject(reason: AuditReason) -> Self {
        Self { accept: false, reason }
    }
}

/// One server's side of the verification.
#[derive(Debug, Clone)]
pub struct AuditVerifier<M: Modulus> {
    message: AuditExchange<M>,
}

/// Evaluates the line through `(0, at0), (1, at1)` at `t`.
fn line<M: Modulus>(at0: FieldElement<M>, at1: FieldElement<M>, t: FieldElement<M>) -> FieldElement<M> {
    at0 + t * (at1 - at0)
}

impl<M: Modulus> AuditVerifier<M> {
    pub fn new(request_id: RequestId, sketch: &ServerSketch<M>, proof: &SnipProofShare<M>, t: FieldElement<M>) -> Self {
        let [s1, s2] = &proof.snips;
        let values = [
            line(s1.rf, sketch.c, t),
            line(s1.rg, sketch.c, t),
            s1.h_at(t),
            line(s2.rf, sketch.m, t),
            line(s2.rg, sketch.big_c, t),
            s2.h_at(t),
            s1.h_at_one() - s2.h_at_one(),
        ];
        Self {
            message: AuditExchange { request_id, values },
        }
    }

    /// What this server sends to its peer.
    pub fn message(&self) -> &AuditExchange<M> {
        &self.message
    }

    /// Reconstructs the published values and checks both product relations
    /// and the cross-constraint.
    pub fn decide(&self, peer: &AuditExchange<M>) -> AuditDecision {
        if peer.request_id != self.message.request_id {
            return AuditDecision::reject(AuditReason::SeedMismatch);
        }
        let v: Vec<FieldElement<M>> = self.message.values.iter().zip(&peer.values).map(|(&a, &b)| a + b).collect();
        let snip1_ok = v[0] * v[1] == v[2];
        let snip2_ok = v[3] * v[4] == v[5];
        let tied = v[6].is_zero();
        if snip1_ok && snip2_ok && tied {
            AuditDecision::ACCEPT
        } else {
            AuditDecision::reject(AuditReason::SketchMismatch)
        }
    }
}

/// Transport for the single round of the verification.
pub trait AuditChannel<M: Modulus> {
    fn exchange(&mut self, ours: &AuditExchange<M>) -> Result<AuditExchange<M>, ChannelError>;
}

/// Runs one server's side of the audit over `channel`.
pub fn audit_verify<M: Modulus, C: AuditChannel<M> + ?Sized>(
    request_id: RequestId,
    sketch: &ServerSketch<M>,
    proof: &SnipProofShare<M>,
    seed2: &AuditSeed,
    channel: &mut C,
) -> AuditDecision {
    let verifier = AuditVerifier::new(request_id, sketch, proof, challenge_point(seed2));
    match channel.exchange(verifier.message()) {
        Ok(peer) => verifier.decide(&peer),
        Err(_) => AuditDecision::reject(AuditReason::DecodeError),
    }
}

/// Runs both servers' sides in-process. Returns `(decision_A, decision_B)`.
pub fn verify_pair<M: Modulus>(
    request_id: RequestId,
    sketches: [&ServerSketch<M>; 2],
    proofs: [&SnipProofShare<M>; 2],
    seed2: &AuditSeed,
) -> (AuditDecision, AuditDecision) {
    let t = challenge_point(seed2);
    let va = AuditVerifier::new(request_id, sketches[0], proofs[0], t);
    let vb = AuditVerifier::new(request_id, sketches[1], proofs[1], t);
    (va.decide(vb.message()), vb.decide(va.message()))
}
