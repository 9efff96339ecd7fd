use capsule_core::sim::raft_check::{run_consensus, ConsensusRunConfig};
use capsule_core::sim::LatencyMatrix;
use capsule_core::time::SimDuration;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn safe_and_live_under_crashes(n in prop::sample::select(vec![1u32, 3, 5, 7]), seed in any::<u64>(), crashes in 0u32..6) {
        let cfg = ConsensusRunConfig { random_crashes: crashes, ..ConsensusRunConfig::local(n, seed) };
        let r = run_consensus(&cfg);
        prop_assert!(r.is_safe(), "{r:?}");
        prop_assert_eq!(r.liveness_violations, 0);
        prop_assert!(r.max_concurrent_down <= cfg.max_faults());
    }
}

#[test]
fn wide_area_latency_still_commits() {
    let cfg = ConsensusRunConfig {
        latency: LatencyMatrix::gcp(),
        timeout_min: SimDuration::from_millis(150),
        timeout_max: SimDuration::from_millis(250),
        ..ConsensusRunConfig::local(5, 3)
    };
    let r = run_consensus(&cfg);
    assert!(r.is_safe());
    assert_eq!(r.commands_committed, r.commands_proposed);
}
