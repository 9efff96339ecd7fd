//! Built-in self checks, each summarized as a [`SuiteReport`].

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::field::{Field, FieldElement};
use crate::policy::{would_expire_after_count, AvailabilityStatus, ExpiryCondition, PolicyError};
use crate::shamir::{reconstruct_secret, split_with_coefficients, Share, SharingParams};
use crate::sim::raft_check::{run_consensus, ConsensusRunConfig};
use crate::time::SimTime;

pub const SMALL_PRIME: u128 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelftestOptions {
    /// Corrupts one share before every reconstruction. The Shamir suite
    /// must catch it; used to check that the suite has teeth.
    pub corrupt_shares: bool,
    pub consensus_seeds: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            corrupt_shares: false,
            consensus_seeds: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub checks: u64,
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} checks in {:.2}s{}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checks,
            self.elapsed.as_secs_f64(),
            if self.detail.is_empty() { "" } else { ": " },
            self.detail
        )
    }
}

pub fn run_all(opts: SelftestOptions) -> Vec<SuiteReport> {
    vec![
        shamir_suite(opts.corrupt_shares),
        policy_suite(),
        consensus_suite(opts.consensus_seeds),
    ]
}

fn report(name: &'static str, start: Instant, checks: u64, failure: Option<String>) -> SuiteReport {
    SuiteReport {
        name,
        passed: failure.is_none(),
        checks,
        detail: failure.unwrap_or_default(),
        elapsed: start.elapsed(),
    }
}

/// Every `k`-subset of `0..n`, as index lists.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// All coefficient vectors of length `len` over `0..p`, in lexicographic order.
pub fn all_coefficients(p: u128, len: usize) -> Vec<Vec<u128>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|v| (0..p).map(move |c| [v.clone(), vec![c]].concat()))
            .collect();
    }
    out
}

/// For every `n <= 4`, `t <= n`, secret and coefficient vector over GF(13):
/// each `t`-subset of shares reconstructs the secret, and each `(t-1)`-subset
/// takes every value tuple exactly once as the coefficients range, for
/// every secret alike.
pub fn shamir_suite(corrupt: bool) -> SuiteReport {
    let start = Instant::now();
    let field = Field::new(SMALL_PRIME).expect("13 is prime");
    let p = SMALL_PRIME;
    let mut checks = 0u64;
    for n in 1..=4u32 {
        for t in 1..=n {
            let params = SharingParams::new(n, t, field).expect("valid params");
            let coeff_sets = all_coefficients(p, t as usize - 1);
            let blind = subsets(n as usize, t as usize - 1);
            let full = subsets(n as usize, t as usize);
            for secret in 0..p {
                let mut seen: Vec<BTreeMap<Vec<u128>, u64>> = vec![BTreeMap::new(); blind.len()];
                for coeffs in &coeff_sets {
                    let cs: Vec<FieldElement> = coeffs.iter().map(|&c| field.reduce(c)).collect();
                    let shares =
                        split_with_coefficients(field.reduce(secret), &cs, &params).expect("split");
                    for subset in &full {
                        let mut picked: Vec<Share> = subset.iter().map(|&i| shares[i]).collect();
                        if corrupt {
                            picked[0].value = field.add(picked[0].value, FieldElement::ONE);
                        }
                        checks += 1;
                        match reconstruct_secret(&picked, &params) {
                            Ok(s) if s.value() == secret => {}
                            other => {
                                return report(
                                    "shamir",
                                    start,
                                    checks,
                                    Some(format!("n={n} t={t} secret={secret} coeffs={coeffs:?} subset={subset:?}: got {other:?}")),
                                )
                            }
                        }
                    }
                    for (slot, subset) in seen.iter_mut().zip(&blind) {
                        let tuple: Vec<u128> =
                            subset.iter().map(|&i| shares[i].value.value()).collect();
                        *slot.entry(tuple).or_default() += 1;
                    }
                }
                let cells = p.pow(t - 1) as usize;
                for (counts, subset) in seen.iter().zip(&blind) {
                    checks += 1;
                    if counts.len() != cells || counts.values().any(|&c| c != 1) {
                        return report(
                            "shamir",
                            start,
                            checks,
                            Some(format!(
                                "n={n} t={t} secret={secret}: shares {subset:?} are not uniform"
                            )),
                        );
                    }
                }
            }
        }
    }
    report("shamir", start, checks, None)
}

/// Reference expiry semantics. Counts children instead of short-circuiting
/// so it shares no code path with the production evaluator.
fn reference_expired(c: &ExpiryCondition, accesses: u64, now: SimTime) -> bool {
    match c {
        ExpiryCondition::MaxAccesses(m) => accesses >= *m,
        ExpiryCondition::Deadline(d) => now >= *d,
        ExpiryCondition::All(cs) => {
            cs.iter()
                .filter(|x| !reference_expired(x, accesses, now))
                .count()
                == 0
        }
        ExpiryCondition::Any(cs) => {
            cs.iter()
                .filter(|x| reference_expired(x, accesses, now))
                .count()
                > 0
        }
    }
}

pub fn random_condition<R: Rng>(rng: &mut R, depth: usize) -> ExpiryCondition {
    if depth <= 1 || rng.gen_bool(0.4) {
        if rng.gen_bool(0.5) {
            ExpiryCondition::MaxAccesses(rng.gen_range(1..6))
        } else {
            ExpiryCondition::Deadline(SimTime(rng.gen_range(0..10) * 1000))
        }
    } else {
        let kids = (0..rng.gen_range(1..4))
            .map(|_| random_condition(rng, depth - 1))
            .collect();
        if rng.gen_bool(0.5) {
            ExpiryCondition::All(kids)
        } else {
            ExpiryCondition::Any(kids)
        }
    }
}

/// Random expiry trees checked against the reference evaluator. Also
/// covers the would-expire lookahead and the wire round trip.
pub fn policy_suite() -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0x5e1f);
    let mut checks = 0u64;
    let fail = |checks, msg: String| report("policy", start, checks, Some(msg));
    for _ in 0..2000 {
        let c = random_condition(&mut rng, 4);
        if let Err(e) = c.validate() {
            return fail(checks, format!("{c:?} rejected: {e}"));
        }
        let decoded = ExpiryCondition::decode(&c.encode());
        checks += 1;
        if decoded.as_ref() != Ok(&c) {
            return fail(checks, format!("{c:?} did not round trip: {decoded:?}"));
        }
        for accesses in 0..7 {
            for step in 0..11 {
                let now = SimTime(step * 1000);
                let want = reference_expired(&c, accesses, now);
                let got = c.status_for(accesses, now) == AvailabilityStatus::Expired;
                checks += 1;
                if want != got {
                    return fail(
                        checks,
                        format!("{c:?} at accesses={accesses} now={now:?}: got {got}, want {want}"),
                    );
                }
                let later = reference_expired(&c, accesses + 1, now)
                    && reference_expired(&c, accesses, SimTime(now.0 + 1000));
                if want && !later {
                    return fail(
                        checks,
                        format!("{c:?} revived after expiring at accesses={accesses} now={now:?}"),
                    );
                }
                let look = would_expire_after_count(&c, accesses, now);
                let expect = if want {
                    Err(PolicyError::NotAvailable)
                } else {
                    Ok(reference_expired(&c, accesses + 1, now))
                };
                checks += 1;
                if look != expect {
                    return fail(
                        checks,
                        format!(
                            "{c:?} lookahead at accesses={accesses}: got {look:?}, want {expect:?}"
                        ),
                    );
                }
            }
        }
    }
    for bad in [
        ExpiryCondition::MaxAccesses(0),
        ExpiryCondition::All(vec![]),
        ExpiryCondition::Any(vec![ExpiryCondition::All(vec![])]),
    ] {
        checks += 1;
        if bad.validate().is_ok() {
            return fail(checks, format!("{bad:?} accepted"));
        }
    }
    report("policy", start, checks, None)
}

/// Seeded runs over n = 3, 5, 7 with crashes and leader kills; every run
/// must be safe and commit every command in bounded time.
pub fn consensus_suite(seeds: u64) -> SuiteReport {
    let start = Instant::now();
    let mut checks = 0u64;
    for seed in 0..seeds {
        let n = [3, 5, 7][(seed % 3) as usize];
        let r = run_consensus(&ConsensusRunConfig::local(n, seed));
        checks += 1;
        if !r.is_safe() || r.liveness_violations > 0 || r.commands_committed < r.commands_proposed {
            return report(
                "consensus",
                start,
                checks,
                Some(format!(
                    "seed {seed} n={n}: election={} agreement={} durability={} liveness={} committed {}/{}",
                    r.election_safety_violations,
                    r.agreement_violations,
                    r.durability_violations,
                    r.liveness_violations,
                    r.commands_committed,
                    r.commands_proposed
                )),
            );
        }
    }
    report("consensus", start, checks, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_and_coefficients_enumerate_fully() {
        assert_eq!(subsets(4, 2).len(), 6);
        assert_eq!(subsets(3, 0), vec![Vec::<usize>::new()]);
        assert_eq!(all_coefficients(13, 2).len(), 169);
        assert_eq!(all_coefficients(13, 0), vec![Vec::<u128>::new()]);
    }

    #[test]
    fn shamir_suite_passes_and_catches_corruption() {
        assert!(shamir_suite(false).passed);
        let mutant = shamir_suite(true);
        assert!(!mutant.passed);
        assert!(mutant.detail.contains("got"), "{}", mutant.detail);
    }

    #[test]
    fn policy_suite_passes() {
        let r = policy_suite();
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn short_consensus_suite_passes() {
        assert!(consensus_suite(3).passed);
    }
}
