//! Shamir `(t, n)` threshold sharing over a prime field, plus the chunking
//! layer that shares byte-string keys longer than one field element.
//!
//! A secret `S` becomes the constant term of a random polynomial of degree
//! `t - 1`; share `j` is the point `(j, f(j))` for `j = 1..=n`. Any `t` points
//! determine the polynomial and so `S = f(0)`; fewer reveal nothing about it.
//!
//! Keys are cut into big-endian chunks of [`chunk_width`] bytes, each shared
//! independently. A node's holding is one [`ShareColumn`]: its share of every
//! chunk, all at the same evaluation point.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::field::{Field, FieldElement};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShareError {
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("{0} is not a prime below 2^127")]
    NotPrime(u128),
    #[error("{value} is not a residue modulo {prime}")]
    OutOfField { value: u128, prime: u128 },
    #[error("invalid sharing parameters: need 0 < t <= n < p (t={t}, n={n})")]
    InvalidParams { t: u32, n: u32 },
    #[error("insufficient shares: need {needed}, got {got}")]
    InsufficientShares { needed: usize, got: usize },
    #[error("duplicate share index {0}")]
    DuplicateIndex(u32),
    #[error("share index {0} out of range")]
    InvalidIndex(u32),
    #[error("key is empty")]
    EmptyKey,
    #[error("key chunk {chunk} does not fit below the field prime")]
    ChunkOutOfRange { chunk: usize },
    #[error("share columns disagree on chunk count or key length")]
    ChunkCountMismatch,
    #[error("shares are inconsistent: reconstructed chunk {chunk} is wider than a key chunk")]
    Inconsistent { chunk: usize },
    #[error("coefficient count {got} does not match threshold - 1 = {expected}")]
    CoefficientCount { expected: usize, got: usize },
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// One point `(index, f(index))` of a sharing polynomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Share {
    pub index: u32,
    pub value: FieldElement,
}

/// Size of one encoded [`Share`]: 4-byte index, 16-byte value.
pub const SHARE_WIRE_LEN: usize = 20;

impl Share {
    pub fn encode(&self, w: &mut Writer) {
        w.u32(self.index).u128(self.value.value());
    }

    /// Decodes and validates a share against `field`.
    pub fn decode(r: &mut Reader<'_>, field: &Field) -> Result<Self, ShareError> {
        let index = r.u32()?;
        let value = field.element(r.u128()?)?;
        let share = Share { index, value };
        share.validate(field)?;
        Ok(share)
    }

    pub fn validate(&self, field: &Field) -> Result<(), ShareError> {
        if self.index == 0 || u128::from(self.index) >= field.prime() {
            return Err(ShareError::InvalidIndex(self.index));
        }
        if !field.contains(self.value) {
            return Err(ShareError::OutOfField {
                value: self.value.value(),
                prime: field.prime(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SharingParams {
    n: u32,
    t: u32,
    field: Field,
}

impl SharingParams {
    pub fn new(n: u32, t: u32, field: Field) -> Result<Self, ShareError> {
        if t == 0 || t > n || u128::from(n) >= field.prime() {
            return Err(ShareError::InvalidParams { t, n });
        }
        Ok(Self { n, t, field })
    }

    /// Parameters for a committee of `n` nodes: majority threshold `⌊(n+1)/2⌋`.
    pub fn committee(n: u32, field: Field) -> Result<Self, ShareError> {
        Self::new(n, committee_threshold(n), field)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn field(&self) -> &Field {
        &self.field
    }
}

/// `⌊(n+1)/2⌋`, the sharing threshold for an `n`-node committee.
pub fn committee_threshold(n: u32) -> u32 {
    n.div_ceil(2)
}

/// Shares `secret` with fresh random coefficients.
pub fn split_secret<R: Rng + ?Sized>(
    secret: FieldElement,
    params: &SharingParams,
    rng: &mut R,
) -> Result<Vec<Share>, ShareError> {
    let f = params.field;
    let coefficients: Vec<FieldElement> = (1..params.t).map(|_| f.random(rng)).collect();
    split_with_coefficients(secret, &coefficients, params)
}

/// Shares `secret` using the given non-constant coefficients `a_1..a_{t-1}`.
pub fn split_with_coefficients(
    secret: FieldElement,
    coefficients: &[FieldElement],
    params: &SharingParams,
) -> Result<Vec<Share>, ShareError> {
    let f = params.field;
    f.element(secret.value())?;
    let expected = params.t as usize - 1;
    if coefficients.len() != expected {
        return Err(ShareError::CoefficientCount {
            expected,
            got: coefficients.len(),
        });
    }
    Ok((1..=params.n)
        .map(|index| {
            let x = f.reduce(u128::from(index));
            // Horner from the highest coefficient down to the secret.
            let value = coefficients
                .iter()
                .rev()
                .fold(FieldElement::ZERO, |acc, &c| f.add(f.mul(acc, x), c));
            let value = f.add(f.mul(value, x), secret);
            Share { index, value }
        })
        .collect())
}

fn check_share_set(shares: &[Share], params: &SharingParams) -> Result<(), ShareError> {
    let mut seen = BTreeSet::new();
    for share in shares {
        share.validate(&params.field)?;
        if !seen.insert(share.index) {
            return Err(ShareError::DuplicateIndex(share.index));
        }
    }
    if shares.len() < params.t as usize {
        return Err(ShareError::InsufficientShares {
            needed: params.t as usize,
            got: shares.len(),
        });
    }
    Ok(())
}

/// Lagrange interpolation at zero over the first `t` of `shares`.
pub fn reconstruct_secret(
    shares: &[Share],
    params: &SharingParams,
) -> Result<FieldElement, ShareError> {
    check_share_set(shares, params)?;
    let f = params.field;
    let points = &shares[..params.t as usize];
    let mut secret = FieldElement::ZERO;
    for (j, pj) in points.iter().enumerate() {
        let xj = f.reduce(u128::from(pj.index));
        let mut num = FieldElement::ONE;
        let mut den = FieldElement::ONE;
        for (m, pm) in points.iter().enumerate() {
            if m == j {
                continue;
            }
            let xm = f.reduce(u128::from(pm.index));
            num = f.mul(num, xm);
            den = f.mul(den, f.sub(xm, xj));
        }
        let weight = f.mul(num, f.inverse(den)?);
        secret = f.add(secret, f.mul(pj.value, weight));
    }
    Ok(secret)
}

/// Bytes per key chunk for `field`: the widest whole-byte chunk that is always
/// below the prime, capped at 8. Tiny fields get 1-byte chunks whose values
/// are checked individually.
pub fn chunk_width(field: &Field) -> usize {
    (((field.bits() - 1) / 8) as usize).clamp(1, 8)
}

/// All `n` shares of every chunk of a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyShareBundle {
    /// `chunk_shares[c][j]` is node `j + 1`'s share of chunk `c`.
    pub chunk_shares: Vec<Vec<Share>>,
    pub params: SharingParams,
    pub key_len_bytes: u32,
}

/// One node's share of every chunk of a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareColumn {
    pub index: u32,
    pub key_len_bytes: u32,
    pub values: Vec<FieldElement>,
}

impl KeyShareBundle {
    pub fn chunk_count(&self) -> usize {
        self.chunk_shares.len()
    }

    /// Column for share index `index` (1-based), if in range.
    pub fn column(&self, index: u32) -> Option<ShareColumn> {
        if index == 0 || index > self.params.n {
            return None;
        }
        let pos = index as usize - 1;
        Some(ShareColumn {
            index,
            key_len_bytes: self.key_len_bytes,
            values: self
                .chunk_shares
                .iter()
                .map(|chunk| chunk[pos].value)
                .collect(),
        })
    }

    pub fn columns(&self) -> Vec<ShareColumn> {
        (1..=self.params.n).filter_map(|i| self.column(i)).collect()
    }

    /// `key_len ∥ chunk_count ∥ chunks`, each chunk `share_count ∥ shares`.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.key_len_bytes)
            .u32(self.chunk_shares.len() as u32);
        for chunk in &self.chunk_shares {
            w.u32(chunk.len() as u32);
            for share in chunk {
                share.encode(&mut w);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8], params: SharingParams) -> Result<Self, ShareError> {
        let mut r = Reader::new(bytes);
        let key_len_bytes = r.u32()?;
        let chunk_count = r.u32()? as usize;
        let mut chunk_shares = Vec::with_capacity(chunk_count.min(1024));
        for _ in 0..chunk_count {
            let count = r.u32()?;
            if count != params.n {
                return Err(ShareError::ChunkCountMismatch);
            }
            let chunk = (0..count)
                .map(|_| Share::decode(&mut r, &params.field))
                .collect::<Result<Vec<_>, _>>()?;
            chunk_shares.push(chunk);
        }
        r.finish()?;
        if chunk_count != expected_chunks(key_len_bytes as usize, &params.field) {
            return Err(ShareError::ChunkCountMismatch);
        }
        Ok(Self {
            chunk_shares,
            params,
            key_len_bytes,
        })
    }
}

impl ShareColumn {
    pub fn chunk_count(&self) -> usize {
        self.values.len()
    }

    /// `index ∥ key_len ∥ chunk_count ∥ values` (16 bytes each).
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(12 + 16 * self.values.len());
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.u32(self.index)
            .u32(self.key_len_bytes)
            .u32(self.values.len() as u32);
        for v in &self.values {
            w.u128(v.value());
        }
    }

    /// Decodes and validates a column received from another party.
    pub fn decode(bytes: &[u8], field: &Field) -> Result<Self, ShareError> {
        let mut r = Reader::new(bytes);
        let column = Self::decode_from(&mut r, field)?;
        r.finish()?;
        Ok(column)
    }

    pub fn decode_from(r: &mut Reader<'_>, field: &Field) -> Result<Self, ShareError> {
        let index = r.u32()?;
        if index == 0 || u128::from(index) >= field.prime() {
            return Err(ShareError::InvalidIndex(index));
        }
        let key_len_bytes = r.u32()?;
        let count = r.u32()? as usize;
        if count != expected_chunks(key_len_bytes as usize, field) {
            return Err(ShareError::ChunkCountMismatch);
        }
        let values = (0..count)
            .map(|_| field.element(r.u128()?))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            index,
            key_len_bytes,
            values,
        })
    }
}

fn expected_chunks(key_len: usize, field: &Field) -> usize {
    key_len.div_ceil(chunk_width(field))
}

/// Splits a byte-string key into per-chunk share sets.
pub fn split_key<R: Rng + ?Sized>(
    key: &[u8],
    params: &SharingParams,
    rng: &mut R,
) -> Result<KeyShareBundle, ShareError> {
    if key.is_empty() {
        return Err(ShareError::EmptyKey);
    }
    let f = params.field;
    let width = chunk_width(&f);
    let mut chunk_shares = Vec::with_capacity(key.len().div_ceil(width));
    for (i, chunk) in key.chunks(width).enumerate() {
        let mut padded = [0u8; 16];
        padded[16 - width..16 - width + chunk.len()].copy_from_slice(chunk);
        let value = u128::from_be_bytes(padded);
        let secret = f
            .element(value)
            .map_err(|_| ShareError::ChunkOutOfRange { chunk: i })?;
        chunk_shares.push(split_secret(secret, params, rng)?);
    }
    Ok(KeyShareBundle {
        chunk_shares,
        params: *params,
        key_len_bytes: u32::try_from(key.len()).expect("key longer than u32::MAX bytes"),
    })
}

/// Rebuilds a key from the columns of at least `t` distinct nodes.
pub fn reconstruct_key(
    columns: &[ShareColumn],
    params: &SharingParams,
) -> Result<Vec<u8>, ShareError> {
    let Some(first) = columns.first() else {
        return Err(ShareError::InsufficientShares {
            needed: params.t as usize,
            got: 0,
        });
    };
    let f = params.field;
    let width = chunk_width(&f);
    let chunk_count = first.values.len();
    let key_len = first.key_len_bytes as usize;
    if columns
        .iter()
        .any(|c| c.values.len() != chunk_count || c.key_len_bytes as usize != key_len)
        || chunk_count != expected_chunks(key_len, &f)
    {
        return Err(ShareError::ChunkCountMismatch);
    }
    let mut key = Vec::with_capacity(chunk_count * width);
    let mut shares = Vec::with_capacity(columns.len());
    for chunk in 0..chunk_count {
        shares.clear();
        shares.extend(columns.iter().map(|c| Share {
            index: c.index,
            value: c.values[chunk],
        }));
        let value = reconstruct_secret(&shares, params)?.value();
        if width < 16 && value >> (8 * width) != 0 {
            return Err(ShareError::Inconsistent { chunk });
        }
        key.extend_from_slice(&value.to_be_bytes()[16 - width..]);
    }
    key.truncate(key_len);
    Ok(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MERSENNE_127;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn f13() -> Field {
        Field::new(13).unwrap()
    }

    fn el(v: u128) -> FieldElement {
        f13().element(v).unwrap()
    }

    fn share(index: u32, value: u128) -> Share {
        Share {
            index,
            value: el(value),
        }
    }

    /// Independent oracle: evaluate sum(a_k x^k) with plain integer powers.
    fn eval_poly_oracle(coeffs: &[u128], x: u128, p: u128) -> u128 {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c * x.pow(k as u32))
            .sum::<u128>()
            % p
    }

    #[test]
    fn split_with_forced_coefficients() {
        let params = SharingParams::new(5, 3, f13()).unwrap();
        let shares = split_with_coefficients(el(6), &[el(2), el(3)], &params).unwrap();
        let got: Vec<(u32, u128)> = shares.iter().map(|s| (s.index, s.value.value())).collect();
        let oracle: Vec<(u32, u128)> = (1..=5)
            .map(|x| (x, eval_poly_oracle(&[6, 2, 3], x as u128, 13)))
            .collect();
        assert_eq!(got, oracle);
        assert_eq!(got, vec![(1, 11), (2, 9), (3, 0), (4, 10), (5, 0)]);
    }

    #[test]
    fn threshold_one_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = SharingParams::new(4, 1, f13()).unwrap();
        let shares = split_secret(el(5), &params, &mut rng).unwrap();
        assert_eq!(shares.len(), 4);
        assert!(shares.iter().all(|s| s.value == el(5)));

        let single = SharingParams::new(1, 1, f13()).unwrap();
        let shares = split_secret(el(9), &single, &mut rng).unwrap();
        assert_eq!(shares, vec![share(1, 9)]);
        assert_eq!(reconstruct_secret(&[share(3, 5)], &params).unwrap(), el(5));
    }

    #[test]
    fn reconstruct_examples() {
        let params = SharingParams::new(5, 3, f13()).unwrap();
        let a = [share(1, 11), share(2, 9), share(3, 0)];
        let b = [share(2, 9), share(4, 10), share(5, 0)];
        assert_eq!(reconstruct_secret(&a, &params).unwrap(), el(6));
        assert_eq!(reconstruct_secret(&b, &params).unwrap(), el(6));
    }

    #[test]
    fn reconstruct_error_paths() {
        let params = SharingParams::new(5, 3, f13()).unwrap();
        assert_eq!(
            reconstruct_secret(&[share(1, 11), share(2, 9)], &params),
            Err(ShareError::InsufficientShares { needed: 3, got: 2 })
        );
        assert_eq!(
            reconstruct_secret(&[share(1, 11), share(2, 9), share(2, 9)], &params),
            Err(ShareError::DuplicateIndex(2))
        );
        assert_eq!(
            reconstruct_secret(&[share(0, 1), share(2, 9), share(3, 0)], &params),
            Err(ShareError::InvalidIndex(0))
        );
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SharingParams::new(3, 4, f13()).is_err());
        assert!(SharingParams::new(3, 0, f13()).is_err());
        assert!(SharingParams::new(13, 2, f13()).is_err());
        assert!(SharingParams::new(12, 12, f13()).is_ok());
    }

    #[test]
    fn committee_threshold_is_floor_half() {
        assert_eq!(committee_threshold(1), 1);
        assert_eq!(committee_threshold(4), 2);
        assert_eq!(committee_threshold(5), 3);
        assert_eq!(committee_threshold(33), 17);
    }

    #[test]
    fn split_key_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SharingParams::committee(5, Field::mersenne127()).unwrap();
        assert_eq!(chunk_width(params.field()), 8);
        let bundle = split_key(&[7u8; 16], &params, &mut rng).unwrap();
        assert_eq!(bundle.chunk_count(), 2);
        assert!(bundle.chunk_shares.iter().all(|c| c.len() == 5));
        assert_eq!(split_key(&[], &params, &mut rng), Err(ShareError::EmptyKey));
    }

    #[test]
    fn reconstruct_key_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SharingParams::committee(5, Field::mersenne127()).unwrap();
        let bundle = split_key(b"0123456789abcdef0123", &params, &mut rng).unwrap();
        let cols = bundle.columns();
        assert!(matches!(
            reconstruct_key(&cols[..2], &params),
            Err(ShareError::InsufficientShares { needed: 3, got: 2 })
        ));
        let dup = vec![cols[0].clone(), cols[1].clone(), cols[1].clone()];
        assert_eq!(
            reconstruct_key(&dup, &params),
            Err(ShareError::DuplicateIndex(2))
        );
        let mut short = cols[2].clone();
        short.values.pop();
        assert_eq!(
            reconstruct_key(&[cols[0].clone(), cols[1].clone(), short], &params),
            Err(ShareError::ChunkCountMismatch)
        );
        assert_eq!(
            reconstruct_key(&cols[1..4], &params).unwrap(),
            b"0123456789abcdef0123"
        );
    }

    #[test]
    fn small_field_key_all_pairs() {
        let params = SharingParams::new(3, 2, f13()).unwrap();
        assert_eq!(chunk_width(params.field()), 1);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let key = [seed as u8 % 13];
            let cols = split_key(&key, &params, &mut rng).unwrap().columns();
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                let got = reconstruct_key(&[cols[a].clone(), cols[b].clone()], &params).unwrap();
                assert_eq!(got, key);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            split_key(&[200], &params, &mut rng),
            Err(ShareError::ChunkOutOfRange { chunk: 0 })
        );
    }

    #[test]
    fn column_codec_validates_on_receipt() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = Field::mersenne127();
        let params = SharingParams::committee(3, field).unwrap();
        let bundle = split_key(&[1u8; 32], &params, &mut rng).unwrap();
        let col = bundle.column(2).unwrap();
        let bytes = col.encode();
        assert_eq!(bytes.len(), 12 + 4 * 16);
        assert_eq!(ShareColumn::decode(&bytes, &field).unwrap(), col);

        let mut bad = bytes.clone();
        bad[12..28].copy_from_slice(&MERSENNE_127.to_be_bytes());
        assert!(matches!(
            ShareColumn::decode(&bad, &field),
            Err(ShareError::OutOfField { .. })
        ));
        let mut zero_index = bytes.clone();
        zero_index[..4].copy_from_slice(&0u32.to_be_bytes());
        assert_eq!(
            ShareColumn::decode(&zero_index, &field),
            Err(ShareError::InvalidIndex(0))
        );

        let encoded = bundle.encode();
        assert_eq!(encoded.len(), 8 + 4 * (4 + 3 * SHARE_WIRE_LEN));
        assert_eq!(KeyShareBundle::decode(&encoded, params).unwrap(), bundle);
    }

    #[test]
    fn share_wire_layout() {
        let mut w = Writer::new();
        share(3, 11).encode(&mut w);
        let bytes = w.finish();
        assert_eq!(bytes.len(), SHARE_WIRE_LEN);
        assert_eq!(&bytes[..4], &[0, 0, 0, 3]);
        assert_eq!(bytes[19], 11);
    }
}
