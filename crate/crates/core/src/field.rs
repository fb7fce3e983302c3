//! Prime-field arithmetic.
//!
//! The production field is `F_p` with `p = 2^128 - 159`. The modulus is a type
//! parameter so that the same protocol code can be instantiated over small
//! primes, which makes soundness errors of order `1/p` observable in tests.

use std::fmt;
use std::hash::Hash;
use std::iter::Sum;
use std::marker::PhantomData;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;

/// Size of a serialized field element.
pub const FIELD_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FieldError {
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("encoded value is not reduced modulo p")]
    NonCanonical,
}

/// A prime modulus, fixed at the type level.
pub trait Modulus: Copy + Clone + fmt::Debug + Default + PartialEq + Eq + Hash + Send + Sync + 'static {
    /// The prime. Implementations other than [`Prime128`] must keep it below
    /// `2^64` so that products fit in a `u128`.
    const P: u128;

    /// Human readable name used in logs and CLI output.
    const NAME: &'static str;

    /// Returns `x mod P`.
    #[inline]
    fn reduce(x: u128) -> u128 {
        x % Self::P
    }

    /// Returns `a * b mod P` for reduced inputs.
    #[inline]
    fn mul_reduced(a: u128, b: u128) -> u128 {
        debug_assert!(Self::P < 1 << 64);
        (a * b) % Self::P
    }
}

/// `p = 2^128 - 159`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Prime128;

/// Small test prime 10007.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TestPrime10007;

/// Small test prime 101, small enough for exhaustive enumeration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TestPrime101;

const P128: u128 = u128::MAX - 158;
const LOW64: u128 = u64::MAX as u128;
/// `2^128 mod p`.
const FOLD: u128 = 159;

impl Modulus for Prime128 {
    const P: u128 = P128;
    const NAME: &'static str = "2^128-159";

    #[inline]
    fn reduce(x: u128) -> u128 {
        if x >= P128 {
            x - P128
        } else {
            x
        }
    }

    #[inline]
    fn mul_reduced(a: u128, b: u128) -> u128 {
        let (hi, lo) = mul_wide(a, b);
        reduce_wide(hi, lo)
    }
}

impl Modulus for TestPrime10007 {
    const P: u128 = 10007;
    const NAME: &'static str = "10007";
}

impl Modulus for TestPrime101 {
    const P: u128 = 101;
    const NAME: &'static str = "101";
}

/// Full 256-bit product as `(high, low)` halves.
#[inline]
fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    let (a1, a0) = (a >> 64, a & LOW64);
    let (b1, b0) = (b >> 64, b & LOW64);
    let p00 = a0 * b0;
    let p11 = a1 * b1;
    let (mid, mid_carry) = (a0 * b1).overflowing_add(a1 * b0);
    let (lo, lo_carry) = p00.overflowing_add(mid << 64);
    let hi = p11 + (mid >> 64) + ((mid_carry as u128) << 64) + lo_carry as u128;
    (hi, lo)
}

/// Reduces `hi * 2^128 + lo` modulo `2^128 - 159` using `2^128 = 159 (mod p)`.
#[inline]
fn reduce_wide(hi: u128, lo: u128) -> u128 {
    let low_part = (hi & LOW64) * FOLD;
    let high_part = (hi >> 64) * FOLD;
    let (sum, k1) = lo.overflowing_add(low_part);
    let (sum, k2) = sum.overflowing_add(high_part << 64);
    let top = (high_part >> 64) + k1 as u128 + k2 as u128;
    let (mut sum, k3) = sum.overflowing_add(top * FOLD);
    if k3 {
        sum += FOLD;
    }
    Prime128::reduce(sum)
}

/// An element of `F_p`, always held in canonical form `0 <= value < p`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FieldElement<M: Modulus = Prime128> {
    value: u128,
    _modulus: PhantomData<M>,
}

impl<M: Modulus> FieldElement<M> {
    pub const ZERO: Self = Self::from_reduced(0);
    pub const ONE: Self = Self::from_reduced(1);

    const fn from_reduced(value: u128) -> Self {
        Self {
            value,
            _modulus: PhantomData,
        }
    }

    /// The modulus of this field.
    pub const fn modulus() -> u128 {
        M::P
    }

    /// Reduces an arbitrary integer into the field.
    pub fn new(value: u128) -> Self {
        Self::from_reduced(M::reduce(value))
    }

    pub fn from_u64(value: u64) -> Self {
        Self::new(value as u128)
    }

    /// Canonical integer representative.
    pub fn value(self) -> u128 {
        self.value
    }

    pub fn is_zero(self) -> bool {
        self.value == 0
    }

    /// Interprets 16 little-endian bytes as an integer and reduces it.
    pub fn from_bytes(bytes: &[u8; FIELD_BYTES]) -> Self {
        Self::new(u128::from_le_bytes(*bytes))
    }

    /// Strict decoding used on the wire: rejects values `>= p`.
    pub fn from_canonical_bytes(bytes: &[u8; FIELD_BYTES]) -> Result<Self, FieldError> {
        let value = u128::from_le_bytes(*bytes);
        if value >= M::P {
            return Err(FieldError::NonCanonical);
        }
        Ok(Self::from_reduced(value))
    }

    pub fn to_bytes(self) -> [u8; FIELD_BYTES] {
        self.value.to_le_bytes()
    }

    /// Uniformly random element.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_reduced(rng.gen_range(0..M::P))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn pow(self, mut exp: u128) -> Self {
        let mut base = self;
        let mut acc = Self::ONE;
        while exp != 0 {
            if exp & 1 == 1 {
                acc *= base;
            }
            base = base.square();
            exp >>= 1;
        }
        acc
    }

    /// Multiplicative inverse via Fermat's little theorem.
    pub fn inv(self) -> Result<Self, FieldError> {
        if self.is_zero() {
            return Err(FieldError::ZeroInverse);
        }
        Ok(self.pow(M::P - 2))
    }
}

impl<M: Modulus> fmt::Debug for FieldElement<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fe({})", self.value)
    }
}

impl<M: Modulus> fmt::Display for FieldElement<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.value, f)
    }
}

impl<M: Modulus> Add for FieldElement<M> {
    type Output = Self;

    #[inline]
    fn add(self, rhs: Self) -> Self {
        let (sum, overflow) = self.value.overflowing_add(rhs.value);
        if overflow || sum >= M::P {
            Self::from_reduced(sum.wrapping_sub(M::P))
        } else {
            Self::from_reduced(sum)
        }
    }
}

impl<M: Modulus> Sub for FieldElement<M> {
    type Output = Self;

    #[inline]
    fn sub(self, rhs: Self) -> Self {
        if self.value >= rhs.value {
            Self::from_reduced(self.value - rhs.value)
        } else {
            Self::from_reduced(M::P - (rhs.value - self.value))
        }
    }
}

impl<M: Modulus> Neg for FieldElement<M> {
    type Output = Self;

    #[inline]
    fn neg(self) -> Self {
        Self::ZERO - self
    }
}

impl<M: Modulus> Mul for FieldElement<M> {
    type Output = Self;

    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Self::from_reduced(M::mul_reduced(self.value, rhs.value))
    }
}

impl<M: Modulus> AddAssign for FieldElement<M> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<M: Modulus> SubAssign for FieldElement<M> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<M: Modulus> MulAssign for FieldElement<M> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<M: Modulus> Sum for FieldElement<M> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, Add::add)
    }
}

impl<M: Modulus> From<u64> for FieldElement<M> {
    fn from(value: u64) -> Self {
        Self::from_u64(value)
    }
}

/// Elementwise `acc += rhs`.
pub fn add_assign_slice<M: Modulus>(acc: &mut [FieldElement<M>], rhs: &[FieldElement<M>]) {
    debug_assert_eq!(acc.len(), rhs.len());
    for (a, b) in acc.iter_mut().zip(rhs) {
        *a += *b;
    }
}

/// Elementwise `acc -= rhs`.
pub fn sub_assign_slice<M: Modulus>(acc: &mut [FieldElement<M>], rhs: &[FieldElement<M>]) {
    debug_assert_eq!(acc.len(), rhs.len());
    for (a, b) in acc.iter_mut().zip(rhs) {
        *a -= *b;
    }
}
