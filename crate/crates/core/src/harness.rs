//! Runs a scenario on a simulated committee and checks the outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::committee::{
    node_measurement, Agent, CapsuleSpec, Node, NodeEnv, Note, Outcome, Owner, RequestRecord,
    RequestSpec, Requester, RequesterTiming, StorageActor, NODE_CODE,
};
use crate::consensus::RaftConfig;
use crate::enclave::{instantiate, produce_quote, AttestationService, Platform};
use crate::field::Field;
use crate::policy::CapsuleId;
use crate::scenario::{Fault, Scenario};
use crate::shamir::{reconstruct_key, ShareColumn, SharingParams};
use crate::sim::{ActorId, NetStats, Sim, TraceRecord};
use crate::storage::StorageServer;
use crate::time::{SimDuration, SimTime};

/// Host ids of requester platforms start here; nodes use `0..n`.
const REQUESTER_HOST_BASE: u32 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// Keep every message in memory (needed for the hygiene scan).
    pub keep_trace: bool,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            keep_trace: false,
        }
    }

    pub fn traced(seed: u64) -> Self {
        Self {
            seed,
            keep_trace: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    /// One record per request, ordered by request id.
    pub records: Vec<RequestRecord>,
    pub granted: u64,
    pub denied: u64,
    pub failed: u64,
    /// Requests without a terminal outcome when the run stopped.
    pub unfinished: u64,
    pub committed_entries: u64,
    /// Granted requests per simulated second over the span from the first
    /// request leaving to the last grant arriving.
    pub throughput: f64,
    pub mean_latency_ms: f64,
    pub ias_calls: u64,
    pub end_time: SimTime,
}

/// Invariant violations observed in a run; all zero in a correct run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checks {
    pub election_safety_violations: u64,
    pub agreement_violations: u64,
    /// Deliveries without a matching committed, valid grant entry.
    pub unmatched_deliveries: u64,
    /// Granted requests served by more than one distinct log entry.
    pub split_grants: u64,
    /// Deliveries of an entry after its first one (retransmissions).
    pub repeat_deliveries: u64,
    /// Committed valid grants never delivered.
    pub undelivered_grants: u64,
    pub delivery_bound_violations: u64,
    pub lost_messages: u64,
    /// Occurrences of key material in serialized traffic.
    pub hygiene_hits: u64,
    pub encapsulation_failures: u64,
    pub leader_crashes_injected: u64,
    pub leader_crashes_skipped: u64,
}

impl Checks {
    /// True when no safety-relevant counter is non-zero.
    pub fn clean(&self) -> bool {
        self.election_safety_violations == 0
            && self.agreement_violations == 0
            && self.unmatched_deliveries == 0
            && self.split_grants == 0
            && self.delivery_bound_violations == 0
            && self.lost_messages == 0
            && self.hygiene_hits == 0
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub checks: Checks,
    pub trace_digest: [u8; 32],
    pub trace: Vec<TraceRecord>,
    pub notes: Vec<crate::sim::Noted<Note>>,
    pub stats: NetStats,
    /// Distinct share columns per capsule across every node's state.
    pub census: BTreeMap<CapsuleId, Vec<ShareColumn>>,
    pub audit_keys: BTreeMap<CapsuleId, Vec<u8>>,
    pub params: SharingParams,
}

impl RunResult {
    pub fn surviving_columns(&self, capsule: &CapsuleId) -> usize {
        self.census.get(capsule).map_or(0, Vec::len)
    }

    /// Whether the key can be rebuilt from the census, trying the true
    /// threshold and every smaller one.
    pub fn census_recovers_key(&self, capsule: &CapsuleId) -> bool {
        let (Some(cols), Some(key)) = (self.census.get(capsule), self.audit_keys.get(capsule))
        else {
            return false;
        };
        (1..=self.params.t()).any(|t| {
            let Ok(params) = SharingParams::new(self.params.n(), t, *self.params.field()) else {
                return false;
            };
            cols.len() >= t as usize
                && reconstruct_key(&cols[..t as usize], &params).is_ok_and(|k| k == *key)
        })
    }

    pub fn granted_for(&self, capsule: &CapsuleId) -> u64 {
        self.metrics
            .records
            .iter()
            .filter(|r| r.capsule == *capsule && r.outcome.is_granted())
            .count() as u64
    }
}

struct World {
    sim: Sim<Agent>,
    ias: Rc<AttestationService>,
    n: u32,
    params: SharingParams,
    owners: Vec<ActorId>,
    requesters: Vec<ActorId>,
}

pub fn requester_timing(cfg: &RaftConfig) -> RequesterTiming {
    RequesterTiming {
        retry_after: cfg.timeout_max.mul(6),
        backoff: cfg.timeout_max,
        max_attempts: 8,
    }
}

fn build(sc: &Scenario, opts: RunOptions) -> World {
    let n = sc.nodes;
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let ias = Rc::new(AttestationService::new(&mut rng));
    let (tmin, tmax) = sc.timeouts();
    let raft = RaftConfig::with_timeouts(tmin, tmax);
    let params = SharingParams::committee(n, Field::mersenne127()).expect("n >= 1");
    let latency = sc.profile.latency();
    let regions = latency.region_count();
    let mut sim: Sim<Agent> = Sim::new(latency, opts.seed, opts.keep_trace);

    let mut platforms = Vec::new();
    let mut enclaves = Vec::new();
    let mut certs = Vec::new();
    for id in 0..n {
        let platform = Platform::new(id, &mut rng);
        ias.register_platform(&platform);
        let enclave = instantiate(&platform, NODE_CODE, &mut rng).expect("node code");
        let quote = produce_quote(&enclave, &platform).expect("same host");
        certs.push(ias.ias_verify(&quote, SimTime::ZERO));
        platforms.push(platform);
        enclaves.push(enclave);
    }
    let member_pks: Vec<_> = enclaves.iter().map(|e| e.public_key()).collect();
    for (id, (platform, enclave)) in platforms.into_iter().zip(enclaves).enumerate() {
        let env = NodeEnv {
            id: id as u32,
            cert: certs[id].clone(),
            member_pks: member_pks.clone(),
            anchors: ias.anchors(),
            params,
            raft,
            seed: opts.seed,
        };
        let node = Node::new(env, platform, enclave, SimTime::ZERO);
        let first = node.first_wakeup();
        let aid = sim.add_actor(Agent::Node(Box::new(node)), id % regions);
        sim.schedule_timer(aid, first, 0);
    }
    let storage = sim.add_actor(
        Agent::Storage(StorageActor {
            server: StorageServer::in_memory(),
        }),
        0,
    );

    let mut owners = Vec::new();
    for c in &sc.capsules {
        let spec = CapsuleSpec {
            id: c.id,
            policy: c.policy.clone(),
            data: c.data.clone(),
        };
        let owner = Owner::new(
            spec,
            member_pks.clone(),
            params,
            storage,
            tmax.mul(4),
            opts.seed,
        );
        let aid = sim.add_actor(Agent::Owner(Box::new(owner)), 0);
        sim.schedule_timer(aid, SimTime::ZERO, 0);
        owners.push(aid);
    }

    let timing = requester_timing(&raft);
    let mut requesters = Vec::new();
    for (k, r) in sc.requests.iter().enumerate() {
        let capsule = sc.capsule(&r.capsule);
        let platform = Platform::new(REQUESTER_HOST_BASE + k as u32, &mut rng);
        ias.register_platform(&platform);
        let spec = RequestSpec {
            request_id: k as u64,
            capsule: capsule.map_or_else(|| crate::scenario::capsule_id_for(&r.capsule), |c| c.id),
            code: r.code.as_bytes().to_vec(),
            submit_time: r.at,
            tamper_cert: r.tamper,
            expected_digest: capsule.map(|c| Sha256::digest(&c.data).into()),
        };
        let req = Requester::new(
            spec,
            platform,
            ias.clone(),
            node_measurement(),
            n,
            storage,
            timing,
            opts.seed,
        );
        let aid = sim.add_actor(Agent::Requester(Box::new(req)), k % regions);
        sim.schedule_timer(aid, r.at, 0);
        requesters.push(aid);
    }
    World {
        sim,
        ias,
        n,
        params,
        owners,
        requesters,
    }
}

fn current_leader(sim: &Sim<Agent>, n: u32) -> Option<ActorId> {
    (0..n)
        .filter(|&id| sim.is_up(id))
        .filter_map(|id| {
            sim.actor(id)
                .as_node()
                .filter(|node| node.is_leader())
                .map(|node| (node.current_term(), id))
        })
        .max()
        .map(|(_, id)| id)
}

fn all_finished(world: &World) -> bool {
    world.requesters.iter().all(|&id| {
        world
            .sim
            .actor(id)
            .as_requester()
            .is_some_and(|r| r.record().is_some())
    })
}

/// Runs a scenario to completion and evaluates every run-level invariant.
pub fn run(sc: &Scenario, opts: RunOptions) -> RunResult {
    let mut world = build(sc, opts);
    let (_, tmax) = sc.timeouts();
    let timing = requester_timing(&RaftConfig::with_timeouts(sc.timeouts().0, tmax));
    let mut checks = Checks::default();

    let mut faults = sc.faults.clone();
    faults.sort_by_key(Fault::at);
    let mut last_event = sc
        .requests
        .iter()
        .map(|r| r.at)
        .max()
        .unwrap_or(SimTime::ZERO);
    for f in &faults {
        match *f {
            Fault::Crash { at, node } => world.sim.schedule_crash(node, at),
            Fault::Recover { at, node } => world.sim.schedule_recover(node, at),
            Fault::CrashLeader { .. } => {}
        }
        let end = match *f {
            Fault::CrashLeader { at, down_for } => at + down_for,
            other => other.at(),
        };
        last_event = last_event.max(end);
    }
    for f in &faults {
        if let Fault::CrashLeader { at, down_for } = *f {
            world.sim.run_until(at);
            match current_leader(&world.sim, world.n) {
                Some(leader) => {
                    world.sim.schedule_crash(leader, at);
                    world.sim.schedule_recover(leader, at + down_for);
                    checks.leader_crashes_injected += 1;
                }
                None => checks.leader_crashes_skipped += 1,
            }
        }
    }

    // Every requester gives up after its last retry, so this bound is hit
    // only if something is stuck.
    let patience =
        timing.retry_after.mul(u64::from(timing.max_attempts) + 1) + SimDuration::from_millis(300);
    let hard_end = last_event + patience + tmax.mul(10);
    let slice = tmax;
    loop {
        let now = world.sim.now();
        if all_finished(&world) && now >= last_event {
            break;
        }
        if now >= hard_end {
            break;
        }
        world.sim.run_until((now + slice).min(hard_end));
    }
    // Let commit notices reach followers so they finish applying.
    let settle_to = world.sim.now() + tmax.mul(4);
    world.sim.run_until(settle_to);

    finish(world, checks)
}

fn finish(world: World, mut checks: Checks) -> RunResult {
    let sim = &world.sim;
    let notes = sim.notes().to_vec();

    let mut leaders: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    // index -> (term, digest, grant)
    #[allow(clippy::type_complexity)]
    let mut committed: BTreeMap<u64, (u64, [u8; 32], Option<(u64, bool)>)> = BTreeMap::new();
    let mut deliveries: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    let mut delivery_count: BTreeMap<u64, u64> = BTreeMap::new();
    let mut records: BTreeMap<u64, RequestRecord> = BTreeMap::new();
    for n in &notes {
        match &n.note {
            Note::Leader { node, term } => {
                leaders.entry(*term).or_default().insert(*node);
            }
            Note::Committed {
                index,
                term,
                digest,
                grant,
                ..
            } => match committed.get(index) {
                Some((t, d, _)) if (t, d) != (term, digest) => checks.agreement_violations += 1,
                Some(_) => {}
                None => {
                    committed.insert(*index, (*term, *digest, *grant));
                }
            },
            Note::Delivered {
                request_id, entry, ..
            } => {
                deliveries.entry(*request_id).or_default().insert(*entry);
                *delivery_count.entry(*entry).or_default() += 1;
            }
            Note::Encapsulated { ok, .. } => {
                if !ok {
                    checks.encapsulation_failures += 1;
                }
            }
            Note::Outcome(r) => {
                records.entry(r.request_id).or_insert_with(|| r.clone());
            }
            Note::ShareDiscarded { .. } => {}
        }
    }
    checks.election_safety_violations = leaders.values().filter(|s| s.len() > 1).count() as u64;
    for (request_id, entries) in &deliveries {
        for entry in entries {
            match committed.get(entry) {
                Some((_, _, Some((rid, true)))) if rid == request_id => {}
                _ => checks.unmatched_deliveries += 1,
            }
        }
    }
    for (request_id, entries) in &deliveries {
        let granted = records
            .get(request_id)
            .is_some_and(|r| r.outcome.is_granted());
        if granted && entries.len() > 1 {
            checks.split_grants += 1;
        }
    }
    checks.repeat_deliveries = delivery_count.values().map(|c| c - 1).sum();
    checks.undelivered_grants = committed
        .values()
        .filter(|(_, _, g)| matches!(g, Some((rid, true)) if !deliveries.contains_key(rid)))
        .count() as u64;

    let stats = sim.stats();
    checks.delivery_bound_violations = stats.bound_violations;
    checks.lost_messages = stats.sent.saturating_sub(
        stats.delivered + stats.dropped_dest_down + stats.dropped_sender_crashed + stats.in_flight,
    );

    let mut audit_keys = BTreeMap::new();
    for &o in &world.owners {
        if let Some(owner) = sim.actor(o).as_owner() {
            if let Some(k) = owner.audit_key() {
                audit_keys.insert(owner.capsule_id(), k.to_vec());
            }
        }
    }
    checks.hygiene_hits = audit_keys
        .values()
        .map(|k| scan_for_key(sim.trace(), k))
        .sum();

    let mut census: BTreeMap<CapsuleId, BTreeMap<u32, ShareColumn>> = BTreeMap::new();
    for id in 0..world.n {
        if let Some(node) = sim.actor(id).as_node() {
            for (capsule, col) in node.share_census() {
                census.entry(capsule).or_default().insert(col.index, col);
            }
        }
    }

    let records: Vec<RequestRecord> = records.into_values().collect();
    let mut metrics = RunMetrics {
        granted: records.iter().filter(|r| r.outcome.is_granted()).count() as u64,
        denied: records.iter().filter(|r| r.outcome.is_denied()).count() as u64,
        failed: records
            .iter()
            .filter(|r| matches!(r.outcome, Outcome::Failed(_)))
            .count() as u64,
        unfinished: world.requesters.len() as u64 - records.len() as u64,
        committed_entries: committed.len() as u64,
        ias_calls: world.ias.call_count(),
        end_time: sim.now(),
        ..Default::default()
    };
    let granted: Vec<&RequestRecord> = records.iter().filter(|r| r.outcome.is_granted()).collect();
    if !records.is_empty() {
        metrics.mean_latency_ms = records
            .iter()
            .map(|r| r.latency().as_millis_f64())
            .sum::<f64>()
            / records.len() as f64;
    }
    if let (Some(first), Some(last)) = (
        granted.iter().map(|r| r.sent_at).min(),
        granted.iter().map(|r| r.finished_at).max(),
    ) {
        let span = last.saturating_since(first).as_millis_f64() / 1000.0;
        if span > 0.0 {
            metrics.throughput = granted.len() as f64 / span;
        }
    }
    metrics.records = records;

    RunResult {
        metrics,
        checks,
        trace_digest: sim.trace_digest(),
        trace: sim.trace().to_vec(),
        notes,
        stats,
        census: census
            .into_iter()
            .map(|(c, cols)| (c, cols.into_values().collect()))
            .collect(),
        audit_keys,
        params: world.params,
    }
}

/// Counts occurrences of `key`, or of any of its 8-byte chunks, in message
/// bytes. Sealed channel payloads never contain them in the clear.
pub fn scan_for_key(trace: &[TraceRecord], key: &[u8]) -> u64 {
    let mut needles: Vec<&[u8]> = vec![key];
    needles.extend(key.chunks(8).filter(|c| c.len() == 8));
    trace
        .iter()
        .filter_map(|t| match t {
            TraceRecord::Message { bytes, .. } => Some(bytes),
            _ => None,
        })
        .map(|bytes| {
            needles
                .iter()
                .filter(|n| bytes.windows(n.len()).any(|w| w == **n))
                .count() as u64
        })
        .sum()
}

/// Whether the scenario's `assert` line holds for this run.
pub fn expectations_hold(sc: &Scenario, metrics: &RunMetrics) -> Result<(), String> {
    let mut problems = Vec::new();
    if let Some(g) = sc.expect.granted {
        if metrics.granted != g {
            problems.push(format!("expected granted={g}, got {}", metrics.granted));
        }
    }
    if let Some(d) = sc.expect.denied {
        if metrics.denied != d {
            problems.push(format!("expected denied={d}, got {}", metrics.denied));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// `request_id,submit_time_ms,outcome,latency_ms` rows plus a header.
pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("request_id,submit_time_ms,outcome,latency_ms\n");
    for r in &metrics.records {
        out.push_str(&format!(
            "{},{:.3},{},{:.3}\n",
            r.request_id,
            r.submit_time.as_millis_f64(),
            r.outcome.label(),
            r.latency().as_millis_f64()
        ));
    }
    out
}

/// One `key=value` line summarizing a run.
pub fn summary_line(metrics: &RunMetrics) -> String {
    format!(
        "summary granted={} denied={} failed={} unfinished={} committed_entries={} throughput_rps={:.3} mean_latency_ms={:.3} ias_calls={}",
        metrics.granted,
        metrics.denied,
        metrics.failed,
        metrics.unfinished,
        metrics.committed_entries,
        metrics.throughput,
        metrics.mean_latency_ms,
        metrics.ias_calls
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::committee::DenyReason;
    use crate::scenario::capsule_id_for;

    fn scenario(text: &str) -> Scenario {
        Scenario::parse(text).unwrap()
    }

    #[test]
    fn demo_grants_once_then_denies() {
        let sc = scenario(
            "nodes 5\ncapsule photos policy=max(1) data=68656c6c6f\nrequest 400 fn photos\nrequest 1200 fn photos\n",
        );
        let r = run(&sc, RunOptions::traced(7));
        assert!(r.checks.clean(), "{:?}", r.checks);
        let outcomes: Vec<Outcome> = r.metrics.records.iter().map(|x| x.outcome).collect();
        assert_eq!(
            outcomes,
            vec![
                Outcome::Granted { plaintext_ok: true },
                Outcome::Denied(DenyReason::Expired)
            ]
        );
        let id = capsule_id_for("photos");
        assert!(r.surviving_columns(&id) < 3, "{}", r.surviving_columns(&id));
        assert!(!r.census_recovers_key(&id));
        assert_eq!(r.checks.undelivered_grants, 0);
    }

    #[test]
    fn fresh_capsule_census_recovers_key() {
        // The census oracle must be able to succeed, or its failures mean nothing.
        let sc = scenario("nodes 5\ncapsule c policy=max(3) data=00ff\nrequest 400 fn c\n");
        let r = run(&sc, RunOptions::new(3));
        let id = capsule_id_for("c");
        assert_eq!(r.surviving_columns(&id), 5);
        assert!(r.census_recovers_key(&id));
        assert_eq!(r.metrics.granted, 1);
    }

    #[test]
    fn ineligible_unknown_and_tampered_requests_are_denied() {
        let sc = scenario(
            "nodes 3\ncapsule c policy=max(5) data=01\nrequest 400 other c\nrequest 400 fn nothere\nrequest 400 fn c tamper\nrequest 450 fn c\n",
        );
        let r = run(&sc, RunOptions::new(1));
        let outcomes: Vec<Outcome> = r.metrics.records.iter().map(|x| x.outcome).collect();
        assert_eq!(
            outcomes,
            vec![
                Outcome::Denied(DenyReason::Ineligible),
                Outcome::Denied(DenyReason::Unknown),
                Outcome::Denied(DenyReason::Ineligible),
                Outcome::Granted { plaintext_ok: true },
            ]
        );
    }

    #[test]
    fn single_node_committee_serves_requests() {
        let sc = scenario(
            "nodes 1\ncapsule c policy=max(1) data=abcd\nrequest 400 fn c\nrequest 900 fn c\n",
        );
        let r = run(&sc, RunOptions::new(5));
        assert_eq!(r.metrics.granted, 1);
        assert_eq!(r.metrics.denied, 1);
        assert!(r.checks.clean());
    }

    #[test]
    fn same_seed_same_digest() {
        let sc = scenario("nodes 5\ncapsule c policy=max(2) data=abcd\nrequest 400 fn c\nrequest 400 fn c\ncrash-leader 420 300\n");
        let a = run(&sc, RunOptions::new(11));
        let b = run(&sc, RunOptions::new(11));
        assert_eq!(a.trace_digest, b.trace_digest);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn minority_crash_keeps_serving_majority_crash_stalls() {
        let ok = scenario("nodes 5\ncapsule c policy=max(9) data=ab\ncrash 300 3\ncrash 300 4\nrequest 600 fn c\n");
        assert_eq!(run(&ok, RunOptions::new(2)).metrics.granted, 1);
        let stuck = scenario(
            "nodes 5\ncapsule c policy=max(9) data=ab\ncrash 300 2\ncrash 300 3\ncrash 300 4\nrequest 600 fn c\n",
        );
        let r = run(&stuck, RunOptions::new(2));
        assert_eq!(r.metrics.granted, 0);
        assert!(matches!(r.metrics.records[0].outcome, Outcome::Failed(_)));
    }
}
