use capsule_core::field::Field;
use capsule_core::shamir::{reconstruct_key, split_key, ShareColumn, SharingParams};
use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn params_and_picks() -> impl Strategy<Value = (u32, u32, Vec<usize>)> {
    (1u32..=33).prop_flat_map(|n| (Just(n), 1..=n)).prop_flat_map(|(n, t)| {
        (Just(n), Just(t), subsequence((0..n as usize).collect::<Vec<_>>(), t as usize).prop_shuffle())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn any_threshold_subset_rebuilds_the_key(
        key in prop::collection::vec(any::<u8>(), 1..=64),
        (n, t, picks) in params_and_picks(),
        seed in any::<u64>(),
    ) {
        let params = SharingParams::new(n, t, Field::mersenne127()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cols = split_key(&key, &params, &mut rng).unwrap().columns();
        let chosen: Vec<ShareColumn> = picks.iter().map(|&i| cols[i].clone()).collect();
        prop_assert_eq!(reconstruct_key(&chosen, &params).unwrap(), key.clone());
        if t > 1 {
            prop_assert!(reconstruct_key(&chosen[1..], &params).is_err());
        }
    }

    #[test]
    fn columns_survive_the_wire(key in prop::collection::vec(any::<u8>(), 1..=48), n in 1u32..=9, seed in any::<u64>()) {
        let field = Field::mersenne127();
        let params = SharingParams::committee(n, field).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for col in split_key(&key, &params, &mut rng).unwrap().columns() {
            prop_assert_eq!(ShareColumn::decode(&col.encode(), &field).unwrap(), col);
        }
    }
}
