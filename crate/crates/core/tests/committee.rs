use capsule_core::committee::{DenyReason, Outcome};
use capsule_core::harness::{run, RunOptions};
use capsule_core::scenario::{capsule_id_for, Scenario};
use proptest::prelude::*;

fn workload(n: u32, m: u64, k: u64, spread_ms: u64) -> Scenario {
    let mut text = format!("nodes {n}\ncapsule c policy=max({m}) data=5eed\n");
    for i in 0..k {
        text.push_str(&format!("request {} fn c\n", 400 + i * spread_ms));
    }
    Scenario::parse(&text).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Without faults every request finishes, exactly min(m, k) are served,
    // and the shares are gone precisely when the capsule is used up.
    #[test]
    fn grants_never_exceed_the_budget(n in prop::sample::select(vec![1u32, 3, 5]), m in 1u64..4, k in 1u64..7, spread in 0u64..40, seed in any::<u64>()) {
        let r = run(&workload(n, m, k, spread), RunOptions::new(seed));
        prop_assert!(r.checks.clean(), "{:?}", r.checks);
        prop_assert_eq!(r.metrics.unfinished + r.metrics.failed, 0);
        prop_assert_eq!(r.metrics.granted, m.min(k));
        for rec in &r.metrics.records {
            let expected = matches!(rec.outcome, Outcome::Granted { plaintext_ok: true } | Outcome::Denied(DenyReason::Expired));
            prop_assert!(expected, "unexpected outcome {:?}", rec.outcome);
        }
        let id = capsule_id_for("c");
        if k >= m {
            prop_assert!(r.surviving_columns(&id) < r.params.t() as usize);
            prop_assert!(!r.census_recovers_key(&id));
        } else {
            prop_assert_eq!(r.surviving_columns(&id), n as usize);
            prop_assert!(r.census_recovers_key(&id));
        }
    }
}

#[test]
fn recovered_leader_rejoins_and_service_continues() {
    let sc = Scenario::parse(
        "nodes 5\ncapsule c policy=max(10) data=01\nrequest 400 fn c\ncrash-leader 500 200\nrequest 900 fn c\nrequest 1500 fn c\n",
    )
    .unwrap();
    let r = run(&sc, RunOptions::new(4));
    assert_eq!(r.checks.leader_crashes_injected, 1);
    assert_eq!(r.metrics.granted, 3);
    assert!(r.checks.clean(), "{:?}", r.checks);
}

#[test]
fn deadline_expiry_wipes_shares_without_any_access() {
    let sc = Scenario::parse("nodes 3\ncapsule c policy=deadline(1000) data=01\nrequest 3000 fn c\n").unwrap();
    let r = run(&sc, RunOptions::new(1));
    assert_eq!(r.metrics.records[0].outcome, Outcome::Denied(DenyReason::Expired));
    assert_eq!(r.surviving_columns(&capsule_id_for("c")), 0);
}

#[test]
fn whole_committee_restart_keeps_sealed_shares() {
    let sc = Scenario::parse(
        "nodes 3\ncapsule c policy=max(2) data=abcd\nrequest 400 fn c\n\
         crash 800 0\ncrash 800 1\ncrash 800 2\nrecover 1000 0\nrecover 1000 1\nrecover 1000 2\nrequest 1600 fn c\n",
    )
    .unwrap();
    let r = run(&sc, RunOptions::new(8));
    assert_eq!(r.metrics.granted, 2, "{:?}", r.metrics.records);
    assert_eq!(r.surviving_columns(&capsule_id_for("c")), 0);
}
