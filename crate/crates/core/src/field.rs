//! Arithmetic in a prime field `GF(p)` for primes below 2^127.
//!
//! Elements are plain `u128` residues; the [`Field`] value carries the
//! modulus and performs every operation, so one element type serves both the
//! production field and the tiny fields used for exhaustive checks.

use rand::Rng;

use crate::shamir::ShareError;

/// The Mersenne prime 2^127 - 1, the default sharing field.
pub const MERSENNE_127: u128 = (1u128 << 127) - 1;

const LOW64: u128 = u64::MAX as u128;

/// A residue modulo the prime of some [`Field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct FieldElement(u128);

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(0);
    pub const ONE: FieldElement = FieldElement(1);

    pub fn value(self) -> u128 {
        self.0
    }
}

/// A prime field. Cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Field {
    prime: u128,
}

impl Default for Field {
    fn default() -> Self {
        Self::mersenne127()
    }
}

impl Field {
    /// Builds a field over `prime`, rejecting composites and anything at or
    /// above 2^127 (sums of two residues must fit in a `u128`).
    pub fn new(prime: u128) -> Result<Self, ShareError> {
        if prime > MERSENNE_127 || !is_prime(prime) {
            return Err(ShareError::NotPrime(prime));
        }
        Ok(Self { prime })
    }

    pub fn mersenne127() -> Self {
        Self {
            prime: MERSENNE_127,
        }
    }

    pub fn prime(&self) -> u128 {
        self.prime
    }

    /// Number of significant bits in the modulus.
    pub fn bits(&self) -> u32 {
        128 - self.prime.leading_zeros()
    }

    /// Wraps `value` as an element, failing if it is not already reduced.
    pub fn element(&self, value: u128) -> Result<FieldElement, ShareError> {
        if value < self.prime {
            Ok(FieldElement(value))
        } else {
            Err(ShareError::OutOfField {
                value,
                prime: self.prime,
            })
        }
    }

    pub fn reduce(&self, value: u128) -> FieldElement {
        FieldElement(value % self.prime)
    }

    pub fn contains(&self, e: FieldElement) -> bool {
        e.0 < self.prime
    }

    pub fn add(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        // a, b < p <= 2^127 - 1, so the sum cannot overflow.
        let s = a.0 + b.0;
        FieldElement(if s >= self.prime { s - self.prime } else { s })
    }

    pub fn sub(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        FieldElement(if a.0 >= b.0 {
            a.0 - b.0
        } else {
            self.prime - (b.0 - a.0)
        })
    }

    pub fn neg(&self, a: FieldElement) -> FieldElement {
        self.sub(FieldElement::ZERO, a)
    }

    pub fn mul(&self, a: FieldElement, b: FieldElement) -> FieldElement {
        if self.prime <= LOW64 {
            return FieldElement(a.0 * b.0 % self.prime);
        }
        if self.prime == MERSENNE_127 {
            let (hi, lo) = mul_wide(a.0, b.0);
            return FieldElement(reduce_mersenne127(hi, lo));
        }
        // Generic double-and-add; only reached for unusual large primes.
        let mut acc = FieldElement::ZERO;
        for bit in (0..128).rev() {
            acc = self.add(acc, acc);
            if (b.0 >> bit) & 1 == 1 {
                acc = self.add(acc, a);
            }
        }
        acc
    }

    /// Multiplicative inverse by the extended Euclidean algorithm.
    pub fn inverse(&self, a: FieldElement) -> Result<FieldElement, ShareError> {
        if a.0 == 0 {
            return Err(ShareError::ZeroInverse);
        }
        let (mut r0, mut r1) = (self.prime, a.0);
        let (mut t0, mut t1) = (FieldElement::ZERO, FieldElement::ONE);
        while r1 != 0 {
            let q = r0 / r1;
            (r0, r1) = (r1, r0 - q * r1);
            let next = self.sub(t0, self.mul(self.reduce(q), t1));
            (t0, t1) = (t1, next);
        }
        debug_assert_eq!(r0, 1, "modulus is prime");
        Ok(t0)
    }

    pub fn pow(&self, base: FieldElement, mut exp: u128) -> FieldElement {
        let mut acc = FieldElement::ONE;
        let mut b = base;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, b);
            }
            b = self.mul(b, b);
            exp >>= 1;
        }
        acc
    }

    /// Uniformly random element.
    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        FieldElement(rng.gen_range(0..self.prime))
    }
}

/// Full 256-bit product of two `u128`s as `(high, low)`.
fn mul_wide(a: u128, b: u128) -> (u128, u128) {
    let (a1, a0) = (a >> 64, a & LOW64);
    let (b1, b0) = (b >> 64, b & LOW64);
    let p00 = a0 * b0;
    let p01 = a0 * b1;
    let p10 = a1 * b0;
    let p11 = a1 * b1;
    let mid = (p00 >> 64) + (p01 & LOW64) + (p10 & LOW64);
    let lo = (p00 & LOW64) | (mid << 64);
    let hi = p11 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
    (hi, lo)
}

/// Reduces `hi * 2^128 + lo` modulo 2^127 - 1, given both factors were < p.
fn reduce_mersenne127(hi: u128, lo: u128) -> u128 {
    // x = hi*2^128 + lo, and 2^127 ≡ 1, so x ≡ (lo mod 2^127) + (lo >> 127) + 2*hi.
    let mut s = (lo & MERSENNE_127) + (lo >> 127) + (hi << 1);
    s = (s & MERSENNE_127) + (s >> 127);
    if s >= MERSENNE_127 {
        s -= MERSENNE_127;
    }
    s
}

fn is_prime(n: u128) -> bool {
    const SMALL: [u128; 20] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
    ];
    if n < 2 {
        return false;
    }
    for p in SMALL {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    // Miller-Rabin over the small-prime bases; exact well past 2^64 and
    // overwhelmingly reliable up to 2^127.
    let field = Field { prime: n };
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'bases: for a in SMALL {
        let mut x = field.pow(FieldElement(a), d);
        if x.0 == 1 || x.0 == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = field.mul(x, x);
            if x.0 == n - 1 {
                continue 'bases;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f13() -> Field {
        Field::new(13).unwrap()
    }

    fn el(v: u128) -> FieldElement {
        FieldElement(v)
    }

    #[test]
    fn inverse_examples_small_field() {
        let f = f13();
        assert_eq!(f.inverse(el(1)).unwrap(), el(1));
        assert_eq!(f.inverse(el(2)).unwrap(), el(7));
        assert_eq!(f.inverse(el(12)).unwrap(), el(12));
        assert_eq!(f.inverse(el(0)), Err(ShareError::ZeroInverse));
    }

    #[test]
    fn inverse_matches_brute_force_scan() {
        let f = f13();
        for a in 1..13u128 {
            let scanned = (1..13u128).find(|b| a * b % 13 == 1).unwrap();
            assert_eq!(f.inverse(el(a)).unwrap().value(), scanned, "a = {a}");
        }
    }

    #[test]
    fn field_laws_exhaustive_p13() {
        let f = f13();
        for a in 0..13 {
            for b in 0..13 {
                let (a, b) = (el(a), el(b));
                assert_eq!(f.add(a, b), f.add(b, a));
                assert_eq!(f.mul(a, b), f.mul(b, a));
                assert_eq!(f.add(f.sub(a, b), b), a);
                for c in 0..13 {
                    let c = el(c);
                    assert_eq!(f.add(f.add(a, b), c), f.add(a, f.add(b, c)));
                    assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
                    assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
                }
            }
        }
    }

    #[test]
    fn composite_and_oversized_moduli_rejected() {
        assert!(Field::new(12).is_err());
        assert!(Field::new(1).is_err());
        assert!(Field::new(MERSENNE_127 + 2).is_err());
        assert!(Field::new(MERSENNE_127).is_ok());
        // 2^61 - 1 is prime, 2^61 + 1 is divisible by 3.
        assert!(Field::new((1 << 61) - 1).is_ok());
        assert!(Field::new((1 << 61) + 1).is_err());
    }

    #[test]
    fn mersenne_reduction_edges() {
        let f = Field::mersenne127();
        let max = el(MERSENNE_127 - 1);
        // (p-1)^2 = 1 mod p
        assert_eq!(f.mul(max, max), FieldElement::ONE);
        assert_eq!(f.mul(max, FieldElement::ONE), max);
        assert_eq!(f.mul(el(1 << 126), el(2)), FieldElement::ONE);
        assert_eq!(f.add(max, FieldElement::ONE), FieldElement::ZERO);
    }

    #[test]
    fn generic_path_agrees_with_mersenne_path() {
        // Largest prime below 2^127 - 1 is 2^127 - 25... use a known large prime
        // by searching down from 2^126.
        let mut p = (1u128 << 126) + 1;
        while Field::new(p).is_err() {
            p += 2;
        }
        let f = Field::new(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = f.random(&mut rng);
            let b = f.random(&mut rng);
            let prod = f.mul(a, b);
            // check against an independent reduction of the wide product
            let (hi, lo) = mul_wide(a.0, b.0);
            let mut r: u128 = 0;
            for limb in [hi, lo] {
                for bit in (0..128).rev() {
                    r = f.add(el(r), el(r)).0;
                    if (limb >> bit) & 1 == 1 {
                        r = f.add(el(r), FieldElement::ONE).0;
                    }
                }
            }
            assert_eq!(prod.0, r);
        }
    }

    proptest! {
        #[test]
        fn field_laws_random_p127(a in 0..MERSENNE_127, b in 0..MERSENNE_127, c in 0..MERSENNE_127) {
            let f = Field::mersenne127();
            let (a, b, c) = (el(a), el(b), el(c));
            prop_assert_eq!(f.mul(a, b), f.mul(b, a));
            prop_assert_eq!(f.mul(f.mul(a, b), c), f.mul(a, f.mul(b, c)));
            prop_assert_eq!(f.add(f.add(a, b), c), f.add(a, f.add(b, c)));
            prop_assert_eq!(f.mul(a, f.add(b, c)), f.add(f.mul(a, b), f.mul(a, c)));
            if a.0 != 0 {
                prop_assert_eq!(f.mul(a, f.inverse(a).unwrap()), FieldElement::ONE);
            }
        }
    }
}
