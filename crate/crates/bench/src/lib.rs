//! Fixtures shared by the benchmarks.

use capsule_core::field::Field;
use capsule_core::scenario::Profile;
use capsule_core::shamir::{split_key, ShareColumn, SharingParams};
use capsule_core::sweep::bench_scenario;
use capsule_core::Scenario;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct KeyFixture {
    pub key: Vec<u8>,
    pub params: SharingParams,
    pub columns: Vec<ShareColumn>,
}

/// A random key of `len` bytes shared across an `n`-node committee.
pub fn key_fixture(n: u32, len: usize, seed: u64) -> KeyFixture {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut key = vec![0; len];
    rng.fill_bytes(&mut key);
    let params = SharingParams::committee(n, Field::mersenne127()).expect("valid committee size");
    let columns = split_key(&key, &params, &mut rng).expect("non-empty key").columns();
    KeyFixture { key, params, columns }
}

/// The sweep workload at a size small enough to time repeatedly.
pub fn committee_workload(n: u32, requests: u32) -> Scenario {
    bench_scenario(n, Profile::Local, requests, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use capsule_core::shamir::reconstruct_key;

    #[test]
    fn fixture_reconstructs() {
        let f = key_fixture(5, 32, 1);
        assert_eq!(reconstruct_key(&f.columns[..3], &f.params).unwrap(), f.key);
    }

    #[test]
    fn workload_has_requested_size() {
        let sc = committee_workload(5, 7);
        assert_eq!((sc.nodes, sc.requests.len()), (5, 7));
    }
}
