//! Tree-based distributed point function over `[2^domain_bits]` with
//! vector-of-field-element outputs.
//!
//! Each level of the tree carries one seed correction word and two control-bit
//! corrections. The leaf seed is expanded into `width` field elements with the
//! PRF and corrected by a final payload correction word. Party B negates its
//! output so that the two parties' evaluations combine by plain addition:
//! `eval(A, x) + eval(B, x) = payload * [x == alpha]`.

use std::sync::OnceLock;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::{CryptoRng, RngCore};

use crate::field::{FieldElement, Modulus, FIELD_BYTES};
use crate::prf::{label, Block, Prf};

/// Domain size of the production virtual address space, in bits.
pub const DOMAIN_BITS: u32 = 128;

const CONVERT_LABEL: Block = label(b"dpf-convert");

/// Tweaks selecting the left and right child in the fixed-key PRG.
const CHILD_TWEAK: [u128; 2] = [0, 0x5a5a_5a5a_5a5a_5a5a_5a5a_5a5a_5a5a_5a5a];

/// Key of the fixed-key AES permutation behind the tree PRG.
const PRG_KEY: Block = *b"mailmill tree pr";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DpfError {
    #[error("key has length {actual}, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("invalid party byte {0}")]
    Party(u8),
    #[error("invalid control bits {0:#04x} at level {1}")]
    ControlBits(u8, usize),
    #[error("payload correction word is not a canonical field element")]
    NonCanonical,
    #[error("payload has {actual} blocks, expected {expected}")]
    PayloadWidth { expected: usize, actual: usize },
    #[error("domain must have between 1 and 128 bits, got {0}")]
    DomainBits(u32),
}

/// One of the two non-colluding servers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    A = 0,
    B = 1,
}

impl Party {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Party::A),
            1 => Some(Party::B),
            _ => None,
        }
    }

    pub fn peer(self) -> Self {
        match self {
            Party::A => Party::B,
            Party::B => Party::A,
        }
    }
}

/// A point of the DPF input domain; in production a 128-bit mailbox address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VirtualAddress(pub u128);

impl VirtualAddress {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; 16];
        rng.fill_bytes(&mut b);
        Self(u128::from_le_bytes(b))
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(b: &[u8; 16]) -> Self {
        Self(u128::from_le_bytes(*b))
    }
}

impl std::fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

/// Shape of a key: how many tree levels and how many output blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DpfParams {
    pub domain_bits: u32,
    /// Output blocks per point, `L + 1` (audit tag plus message blocks).
    pub width: usize,
}

impl DpfParams {
    pub fn new(domain_bits: u32, width: usize) -> Result<Self, DpfError> {
        if domain_bits == 0 || domain_bits > 128 {
            return Err(DpfError::DomainBits(domain_bits));
        }
        Ok(Self { domain_bits, width })
    }

    /// Full 128-bit domain.
    pub fn production(width: usize) -> Self {
        Self {
            domain_bits: DOMAIN_BITS,
            width,
        }
    }

    /// Serialized key size: `1 + 16 + levels * 17 + 16 * width`.
    pub fn key_len(&self) -> usize {
        1 + 16 + self.domain_bits as usize * 17 + FIELD_BYTES * self.width
    }

    /// Bit consumed at tree level `level` (most significant first).
    #[inline]
    fn bit(&self, x: u128, level: usize) -> usize {
        ((x >> (self.domain_bits as usize - 1 - level)) & 1) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrectionWord {
    pub seed: Block,
    /// Control-bit corrections for the left and right child.
    pub control: [bool; 2],
}

/// One party's share of a point function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpfKey<M: Modulus> {
    pub party: Party,
    pub root_seed: Block,
    pub levels: Vec<CorrectionWord>,
    pub payload_cw: Vec<FieldElement<M>>,
}

fn prg() -> &'static Aes128 {
    static PRG: OnceLock<Aes128> = OnceLock::new();
    PRG.get_or_init(|| Aes128::new(GenericArray::from_slice(&PRG_KEY)))
}

#[inline]
fn xor(a: &Block, b: &Block) -> Block {
    (u128::from_le_bytes(*a) ^ u128::from_le_bytes(*b)).to_le_bytes()
}

#[inline]
fn prg_input(seed: &Block, child: usize) -> Block {
    (u128::from_le_bytes(*seed) ^ CHILD_TWEAK[child]).to_le_bytes()
}

/// Turns `AES(x) XOR x` into a child seed and its control bit.
#[inline]
fn prg_output(input: &Block, encrypted: &Block) -> (Block, bool) {
    let mut out = xor(input, encrypted);
    let t = out[0] & 1 == 1;
    out[0] &= !1;
    (out, t)
}

/// Child `child` of `seed`: one fixed-key AES call.
#[inline]
fn expand(seed: &Block, child: usize) -> (Block, bool) {
    let input = prg_input(seed, child);
    let mut b = GenericArray::from(input);
    prg().encrypt_block(&mut b);
    prg_output(&input, &b.into())
}

/// Expands a leaf seed into `width` field elements.
fn convert<M: Modulus>(seed: &Block, width: usize) -> Vec<FieldElement<M>> {
    Prf::new(seed).stream(&CONVERT_LABEL, width)
}

/// Generates keys for the point function `x -> payload * [x == alpha]`.
pub fn gen<M: Modulus, R: RngCore + CryptoRng + ?Sized>(
    params: DpfParams,
    alpha: VirtualAddress,
    payload: &[FieldElement<M>],
    rng: &mut R,
) -> Result<(DpfKey<M>, DpfKey<M>), DpfError> {
    gen_inner(params, alpha, payload, None, rng)
}

fn gen_inner<M: Modulus, R: RngCore + CryptoRng + ?Sized>(
    params: DpfParams,
    alpha: VirtualAddress,
    payload: &[FieldElement<M>],
    diverge_at: Option<usize>,
    rng: &mut R,
) -> Result<(DpfKey<M>, DpfKey<M>), DpfError> {
    DpfParams::new(params.domain_bits, params.width)?;
    if payload.len() != params.width {
        return Err(DpfError::PayloadWidth {
            expected: params.width,
            actual: payload.len(),
        });
    }
    let mut root = [[0u8; 16]; 2];
    rng.fill_bytes(&mut root[0]);
    rng.fill_bytes(&mut root[1]);

    let mut seeds = root;
    let mut ts = [false, true];
    let mut levels = Vec::with_capacity(params.domain_bits as usize);
    for level in 0..params.domain_bits as usize {
        let keep = params.bit(alpha.0, level);
        let lose = 1 - keep;
        // children[party][child]
        let children = [
            [expand(&seeds[0], 0), expand(&seeds[0], 1)],
            [expand(&seeds[1], 0), expand(&seeds[1], 1)],
        ];
        let mut seed_cw = xor(&children[0][lose].0, &children[1][lose].0);
        if diverge_at == Some(level) {
            rng.fill_bytes(&mut seed_cw);
        }
        let control = [
            children[0][0].1 ^ children[1][0].1 ^ (keep == 0),
            children[0][1].1 ^ children[1][1].1 ^ (keep == 1),
        ];
        for party in 0..2 {
            let (mut s, mut t) = children[party][keep];
            if ts[party] {
                s = xor(&s, &seed_cw);
                t ^= control[keep];
            }
            seeds[party] = s;
            ts[party] = t;
        }
        levels.push(CorrectionWord { seed: seed_cw, control });
    }

    let conv_a = convert::<M>(&seeds[0], params.width);
    let conv_b = convert::<M>(&seeds[1], params.width);
    let mut payload_cw: Vec<FieldElement<M>> = payload
        .iter()
        .zip(conv_a.iter().zip(&conv_b))
        .map(|(&beta, (&a, &b))| beta - a + b)
        .collect();
    if ts[1] {
        for x in &mut payload_cw {
            *x = -*x;
        }
    }

    let key_a = DpfKey {
        party: Party::A,
        root_seed: root[0],
        levels: levels.clone(),
        payload_cw: payload_cw.clone(),
    };
    let key_b = DpfKey {
        party: Party::B,
        root_seed: root[1],
        levels,
        payload_cw,
    };
    Ok((key_a, key_b))
}

impl<M: Modulus> DpfKey<M> {
    pub fn params(&self) -> DpfParams {
        DpfParams {
            domain_bits: self.levels.len() as u32,
            width: self.payload_cw.len(),
        }
    }

    fn leaf(&self, seed: &Block, t: bool) -> Vec<FieldElement<M>> {
        let mut out = convert::<M>(seed, self.payload_cw.len());
        if t {
            for (y, cw) in out.iter_mut().zip(&self.payload_cw) {
                *y += *cw;
            }
        }
        if self.party == Party::B {
            for y in &mut out {
                *y = -*y;
            }
        }
        out
    }

    /// Evaluates this share at `x`. Only the low `domain_bits` bits of `x`
    /// are consulted.
    pub fn eval(&self, x: VirtualAddress) -> Vec<FieldElement<M>> {
        let params = self.params();
        let mut seed = self.root_seed;
        let mut t = self.party == Party::B;
        for (level, cw) in self.levels.iter().enumerate() {
            let bit = params.bit(x.0, level);
            let (mut s, mut t_next) = expand(&seed, bit);
            if t {
                s = xor(&s, &cw.seed);
                t_next ^= cw.control[bit];
            }
            seed = s;
            t = t_next;
        }
        self.leaf(&seed, t)
    }

    /// Evaluates at every address, in order. Addresses are walked down the
    /// tree in lockstep batches so AES calls pipeline.
    pub fn eval_many(&self, addrs: &[VirtualAddress]) -> EvalMatrix<M> {
        const LANES: usize = 8;
        let params = self.params();
        let width = params.width;
        let mut data = Vec::with_capacity(addrs.len() * width);
        let cipher = prg();
        for chunk in addrs.chunks(LANES) {
            let lanes = chunk.len();
            let mut seeds = [self.root_seed; LANES];
            let mut ts = [self.party == Party::B; LANES];
            let mut inputs = [[0u8; 16]; LANES];
            let mut blocks = [GenericArray::from([0u8; 16]); LANES];
            for (level, cw) in self.levels.iter().enumerate() {
                for k in 0..lanes {
                    inputs[k] = prg_input(&seeds[k], params.bit(chunk[k].0, level));
                    blocks[k] = GenericArray::from(inputs[k]);
                }
                cipher.encrypt_blocks(&mut blocks[..lanes]);
                for k in 0..lanes {
                    let bit = params.bit(chunk[k].0, level);
                    let (mut s, mut t) = prg_output(&inputs[k], &blocks[k].into());
                    if ts[k] {
                        s = xor(&s, &cw.seed);
                        t ^= cw.control[bit];
                    }
                    seeds[k] = s;
                    ts[k] = t;
                }
            }
            for k in 0..lanes {
                data.extend(self.leaf(&seeds[k], ts[k]));
            }
        }
        EvalMatrix { width, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params().key_len());
        out.push(self.party as u8);
        out.extend_from_slice(&self.root_seed);
        for cw in &self.levels {
            out.extend_from_slice(&cw.seed);
            out.push(cw.control[0] as u8 | (cw.control[1] as u8) << 1);
        }
        for x in &self.payload_cw {
            out.extend_from_slice(&x.to_bytes());
        }
        out
    }

    /// Strict decoding: exact length, valid party and control bytes, and
    /// canonical field elements.
    pub fn decode(bytes: &[u8], params: DpfParams) -> Result<Self, DpfError> {
        let expected = params.key_len();
        if bytes.len() != expected {
            return Err(DpfError::Length {
                expected,
                actual: bytes.len(),
            });
        }
        let party = Party::from_byte(bytes[0]).ok_or(DpfError::Party(bytes[0]))?;
        let root_seed: Block = bytes[1..17].try_into().unwrap();
        let mut pos = 17;
        let mut levels = Vec::with_capacity(params.domain_bits as usize);
        for level in 0..params.domain_bits as usize {
            let seed: Block = bytes[pos..pos + 16].try_into().unwrap();
            let bits = bytes[pos + 16];
            if bits > 3 {
                return Err(DpfError::ControlBits(bits, level));
            }
            levels.push(CorrectionWord {
                seed,
                control: [bits & 1 == 1, bits & 2 == 2],
            });
            pos += 17;
        }
        let payload_cw = bytes[pos..]
            .chunks_exact(FIELD_BYTES)
            .map(|c| FieldElement::from_canonical_bytes(c.try_into().unwrap()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| DpfError::NonCanonical)?;
        Ok(Self {
            party,
            root_seed,
            levels,
            payload_cw,
        })
    }
}

/// Row-major `n x width` matrix of evaluations, one row per address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalMatrix<M: Modulus> {
    width: usize,
    data: Vec<FieldElement<M>>,
}

impl<M: Modulus> EvalMatrix<M> {
    pub fn from_rows(width: usize, rows: Vec<Vec<FieldElement<M>>>) -> Self {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            assert_eq!(r.len(), width, "ragged evaluation matrix");
            data.extend(r);
        }
        Self { width, data }
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[FieldElement<M>] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[FieldElement<M>]> {
        self.data.chunks_exact(self.width.max(1))
    }

    /// Block 0 of every row.
    pub fn column0(&self) -> Vec<FieldElement<M>> {
        self.iter_rows().map(|r| r[0]).collect()
    }

    /// Elementwise sum of two matrices of the same shape.
    pub fn combine(&self, other: &Self) -> Self {
        assert_eq!(self.width, other.width);
        assert_eq!(self.data.len(), other.data.len());
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Self { width: self.width, data }
    }
}

/// Constructions of malformed key pairs, for adversarial tests only.
#[cfg(any(test, feature = "testing"))]
pub mod testing {
    use super::*;

    /// Like [`gen`], but at `level` the off-path child is left uncorrected, so
    /// every leaf under the sibling subtree of `alpha` at that level receives
    /// pseudorandom nonzero output. At the last level the summed output has
    /// Hamming weight exactly two: `alpha` and `alpha ^ 1`.
    pub fn gen_divergent<M: Modulus, R: RngCore + CryptoRng + ?Sized>(
        params: DpfParams,
        alpha: VirtualAddress,
        payload: &[FieldElement<M>],
        level: usize,
        rng: &mut R,
    ) -> Result<(DpfKey<M>, DpfKey<M>), DpfError> {
        assert!(level < params.domain_bits as usize);
        gen_inner(params, alpha, payload, Some(level), rng)
    }

    /// Keys whose summed output is `value` or `-value` at every address
    /// sharing the top `prefix_bits` bits with `prefix`, and zero elsewhere.
    /// Both parties share one root seed and seed corrections are zero, so the
    /// two walks stay on identical seeds and differ only in their control
    /// bits; the sign at a leaf follows the PRG's control bit there.
    pub fn gen_flat_subtree<M: Modulus, R: RngCore + CryptoRng + ?Sized>(
        params: DpfParams,
        prefix: VirtualAddress,
        prefix_bits: usize,
        value: &[FieldElement<M>],
        rng: &mut R,
    ) -> (DpfKey<M>, DpfKey<M>) {
        assert!(prefix_bits <= params.domain_bits as usize);
        assert_eq!(value.len(), params.width);
        let mut root = [0u8; 16];
        rng.fill_bytes(&mut root);
        let levels = (0..params.domain_bits as usize)
            .map(|level| {
                let control = if level < prefix_bits {
                    let keep = params.bit(prefix.0, level);
                    [keep == 0, keep == 1]
                } else {
                    [true, true]
                };
                CorrectionWord { seed: [0; 16], control }
            })
            .collect::<Vec<_>>();
        let payload_cw: Vec<FieldElement<M>> = value.iter().map(|&x| -x).collect();
        let key = |party| DpfKey {
            party,
            root_seed: root,
            levels: levels.clone(),
            payload_cw: payload_cw.clone(),
        };
        (key(Party::A), key(Party::B))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Prime128, TestPrime10007};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    type Fe = FieldElement<Prime128>;

    fn random_payload<M: Modulus>(rng: &mut ChaCha20Rng, width: usize) -> Vec<FieldElement<M>> {
        let mut p: Vec<FieldElement<M>> = (0..width).map(|_| FieldElement::random(rng)).collect();
        p[0] = FieldElement::ONE;
        p
    }

    fn summed(a: &DpfKey<Prime128>, b: &DpfKey<Prime128>, x: VirtualAddress) -> Vec<Fe> {
        a.eval(x).iter().zip(b.eval(x)).map(|(&u, v)| u + v).collect()
    }

    #[test]
    fn point_and_off_point_production_domain() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let params = DpfParams::production(12);
        for _ in 0..20 {
            let alpha = VirtualAddress::random(&mut rng);
            let payload = random_payload::<Prime128>(&mut rng, 12);
            let (a, b) = gen(params, alpha, &payload, &mut rng).unwrap();
            assert_eq!(summed(&a, &b, alpha), payload);
            for _ in 0..5 {
                let x = VirtualAddress::random(&mut rng);
                assert!(summed(&a, &b, x).iter().all(|y| y.is_zero()));
            }
            // Neighbouring addresses share almost the whole path.
            let near = VirtualAddress(alpha.0 ^ 1);
            assert!(summed(&a, &b, near).iter().all(|y| y.is_zero()));
        }
    }

    #[test]
    fn eight_bit_domain_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let params = DpfParams::new(8, 3).unwrap();
        for _ in 0..20 {
            let alpha = VirtualAddress(rng.next_u32() as u128 & 0xff);
            let payload = random_payload::<Prime128>(&mut rng, 3);
            let (a, b) = gen(params, alpha, &payload, &mut rng).unwrap();
            let nonzero: Vec<u128> = (0..256u128)
                .filter(|&x| summed(&a, &b, VirtualAddress(x)).iter().any(|y| !y.is_zero()))
                .collect();
            assert_eq!(nonzero, vec![alpha.0]);
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let params = DpfParams::production(4);
        let payload = random_payload::<Prime128>(&mut rng, 4);
        let (a, _) = gen(params, VirtualAddress(42), &payload, &mut rng).unwrap();
        let x = VirtualAddress::random(&mut rng);
        assert_eq!(a.eval(x), a.eval(x));
    }

    #[test]
    fn eval_many_matches_eval() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let params = DpfParams::production(5);
        let alpha = VirtualAddress::random(&mut rng);
        let payload = random_payload::<Prime128>(&mut rng, 5);
        let (a, b) = gen(params, alpha, &payload, &mut rng).unwrap();
        let mut addrs: Vec<VirtualAddress> = (0..37).map(|_| VirtualAddress::random(&mut rng)).collect();
        addrs.insert(17, alpha);
        for key in [&a, &b] {
            let m = key.eval_many(&addrs);
            assert_eq!(m.rows(), addrs.len());
            for (i, x) in addrs.iter().enumerate() {
                assert_eq!(m.row(i), key.eval(*x).as_slice());
            }
            let col: Vec<Fe> = addrs.iter().map(|x| key.eval(*x)[0]).collect();
            assert_eq!(m.column0(), col);
        }
        let single = a.eval_many(&[alpha]);
        assert_eq!(single.row(0), a.eval(alpha).as_slice());
    }

    #[test]
    fn eval_many_inactive_target_sums_to_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let params = DpfParams::production(3);
        let payload = random_payload::<Prime128>(&mut rng, 3);
        let (a, b) = gen(params, VirtualAddress::random(&mut rng), &payload, &mut rng).unwrap();
        let addrs: Vec<VirtualAddress> = (0..50).map(|_| VirtualAddress::random(&mut rng)).collect();
        let sum = a.eval_many(&addrs).combine(&b.eval_many(&addrs));
        assert!(sum.iter_rows().all(|r| r.iter().all(|y| y.is_zero())));
    }

    #[test]
    fn key_size_formula() {
        // L = ceil(160 / 15) = 11 message blocks plus the audit tag.
        let params = DpfParams::production(12);
        assert_eq!(params.key_len(), 1 + 16 + 128 * 17 + 16 * 12);
        assert_eq!(params.key_len(), 2385);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..5 {
            let payload = random_payload::<Prime128>(&mut rng, 12);
            let (a, b) = gen(params, VirtualAddress::random(&mut rng), &payload, &mut rng).unwrap();
            assert_eq!(a.encode().len(), 2385);
            assert_eq!(b.encode().len(), 2385);
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let params = DpfParams::production(6);
        let payload = random_payload::<Prime128>(&mut rng, 6);
        let (a, b) = gen(params, VirtualAddress(9), &payload, &mut rng).unwrap();
        assert_eq!(DpfKey::decode(&a.encode(), params).unwrap(), a);
        assert_eq!(DpfKey::decode(&b.encode(), params).unwrap(), b);
    }

    #[test]
    fn decode_rejects_malformed() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let params = DpfParams::production(2);
        let payload = random_payload::<Prime128>(&mut rng, 2);
        let (a, _) = gen(params, VirtualAddress(1), &payload, &mut rng).unwrap();
        let good = a.encode();

        let mut short = good.clone();
        short.pop();
        assert!(matches!(DpfKey::<Prime128>::decode(&short, params), Err(DpfError::Length { .. })));

        let mut bad_party = good.clone();
        bad_party[0] = 2;
        assert_eq!(DpfKey::<Prime128>::decode(&bad_party, params), Err(DpfError::Party(2)));

        let mut bad_bits = good.clone();
        bad_bits[17 + 16] = 4;
        assert_eq!(DpfKey::<Prime128>::decode(&bad_bits, params), Err(DpfError::ControlBits(4, 0)));

        let mut bad_fe = good;
        let n = bad_fe.len();
        bad_fe[n - 16..].copy_from_slice(&[0xff; 16]);
        assert_eq!(DpfKey::<Prime128>::decode(&bad_fe, params), Err(DpfError::NonCanonical));
    }

    #[test]
    fn payload_width_checked() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let r = gen::<Prime128, _>(DpfParams::production(3), VirtualAddress(0), &[Fe::ONE], &mut rng);
        assert!(matches!(r, Err(DpfError::PayloadWidth { .. })));
    }

    #[test]
    fn small_field_small_domain() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let params = DpfParams::new(6, 2).unwrap();
        let payload = random_payload::<TestPrime10007>(&mut rng, 2);
        let (a, b) = gen(params, VirtualAddress(33), &payload, &mut rng).unwrap();
        for x in 0..64u128 {
            let s: Vec<_> = a
                .eval(VirtualAddress(x))
                .iter()
                .zip(b.eval(VirtualAddress(x)))
                .map(|(&u, v)| u + v)
                .collect();
            if x == 33 {
                assert_eq!(s, payload);
            } else {
                assert!(s.iter().all(|y| y.is_zero()));
            }
        }
    }

    #[test]
    fn divergent_last_level_has_weight_two() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let params = DpfParams::new(8, 2).unwrap();
        let payload = random_payload::<Prime128>(&mut rng, 2);
        let (a, b) = testing::gen_divergent(params, VirtualAddress(0x5c), &payload, 7, &mut rng).unwrap();
        let nonzero: Vec<u128> = (0..256u128).filter(|&x| summed(&a, &b, VirtualAddress(x))[0] != Fe::ZERO).collect();
        assert_eq!(nonzero, vec![0x5c, 0x5d]);
        assert_eq!(summed(&a, &b, VirtualAddress(0x5c)), payload);
    }

    #[test]
    fn flat_subtree_covers_prefix_only() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let params = DpfParams::new(8, 3).unwrap();
        let value = vec![Fe::ZERO, Fe::new(5), Fe::new(6)];
        for prefix_bits in [0usize, 3, 8] {
            let prefix = VirtualAddress(0xa7);
            let (a, b) = testing::gen_flat_subtree(params, prefix, prefix_bits, &value, &mut rng);
            for x in 0..256u128 {
                let inside = prefix_bits == 0 || (x ^ prefix.0) >> (8 - prefix_bits) == 0;
                let out = summed(&a, &b, VirtualAddress(x));
                if inside {
                    let negated: Vec<Fe> = value.iter().map(|&y| -y).collect();
                    assert!(out == value || out == negated, "x = {x:#x}, bits = {prefix_bits}");
                } else {
                    assert_eq!(out, vec![Fe::ZERO; 3], "x = {x:#x}, bits = {prefix_bits}");
                }
            }
        }
    }
}
