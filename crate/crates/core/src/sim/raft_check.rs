//! Consensus-only runs with random crashes, for safety and liveness sweeps.
//!
//! Actors `0..n` are replicas; actor `n` is a client that keeps
//! rebroadcasting each command until some replica reports it committed.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::consensus::{
    ConsensusMsg, LogEntry, NoHook, NodeId, PersistentState, RaftConfig, RaftNode,
};
use crate::time::{SimDuration, SimTime};
use crate::wire::{Reader, Writer};

use super::engine::{Actor, ActorId, Ctx, Noted, Sim};
use super::latency::LatencyMatrix;
use super::WakeupSet;

const TAG_PROPOSE: u8 = 0x30;
const TAG_DONE: u8 = 0x31;
const TICK: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaftNote {
    Leader {
        term: u64,
    },
    Commit {
        index: u64,
        term: u64,
        command: Vec<u8>,
    },
    Proposed {
        cmd: u64,
    },
    Done {
        cmd: u64,
    },
}

pub enum RaftActor {
    Replica(Box<Replica>),
    Client(Client),
}

pub struct Replica {
    id: NodeId,
    peers: Vec<NodeId>,
    config: RaftConfig,
    seed: u64,
    node: Option<RaftNode>,
    disk: PersistentState,
    applied: Vec<LogEntry>,
    wakeups: WakeupSet,
}

pub struct Client {
    replicas: u32,
    resend: SimDuration,
    pending: BTreeMap<u64, SimTime>,
    done: BTreeSet<u64>,
}

fn cmd_bytes(cmd: u64) -> Vec<u8> {
    cmd.to_be_bytes().to_vec()
}

impl Replica {
    fn node(&mut self) -> &mut RaftNode {
        self.node.as_mut().expect("replica is up")
    }

    fn after(
        &mut self,
        ctx: &mut Ctx<'_, RaftNote>,
        out: crate::consensus::Output,
        client: ActorId,
    ) {
        if out.became_leader {
            ctx.note(RaftNote::Leader {
                term: self.node().current_term(),
            });
        }
        for (to, m) in out.messages {
            ctx.send(to, m.encode());
        }
        let leader = self.node().is_leader();
        for e in out.committed {
            ctx.note(RaftNote::Commit {
                index: e.index,
                term: e.term,
                command: e.command.clone(),
            });
            if leader && e.command.len() == 8 {
                let mut w = Writer::new();
                w.u8(TAG_DONE).raw(&e.command);
                ctx.send(client, w.finish());
            }
            self.applied.push(e);
        }
        self.disk = self.node().persistent_state();
        let at = self.node().next_wakeup();
        self.wakeups.arm(ctx, at, TICK);
    }
}

impl Actor for RaftActor {
    type Note = RaftNote;

    fn on_message(&mut self, ctx: &mut Ctx<'_, RaftNote>, from: ActorId, msg: &[u8]) {
        match self {
            RaftActor::Replica(r) => {
                let client = r.peers.len() as ActorId + 1;
                if msg.first() == Some(&TAG_PROPOSE) {
                    let node = r.node();
                    let cmd = &msg[1..];
                    if node.is_leader() && !node.log().iter().any(|e| e.command == cmd) {
                        let (_, out) = node
                            .propose(cmd.to_vec(), false, ctx.now())
                            .expect("leader");
                        r.after(ctx, out, client);
                    }
                    return;
                }
                let Ok(m) = ConsensusMsg::decode(msg) else {
                    return;
                };
                let out = r.node().handle(from, m, ctx.now(), &mut NoHook);
                r.after(ctx, out, client);
            }
            RaftActor::Client(c) => {
                let mut r = Reader::new(msg);
                if r.u8() == Ok(TAG_DONE) {
                    if let Ok(cmd) = r.u64() {
                        if c.pending.remove(&cmd).is_some() {
                            c.done.insert(cmd);
                            ctx.note(RaftNote::Done { cmd });
                        }
                    }
                }
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, RaftNote>, token: u64) {
        match self {
            RaftActor::Replica(r) => {
                r.wakeups.fired(ctx.now());
                let client = r.peers.len() as ActorId + 1;
                let out = r.node().tick(ctx.now());
                r.after(ctx, out, client);
            }
            RaftActor::Client(c) => {
                // token = command id; first firing submits, later ones resend.
                if c.done.contains(&token) {
                    return;
                }
                if c.pending.insert(token, ctx.now()).is_none() {
                    ctx.note(RaftNote::Proposed { cmd: token });
                }
                let mut w = Writer::new();
                w.u8(TAG_PROPOSE).raw(&cmd_bytes(token));
                let msg = w.finish();
                for id in 0..c.replicas {
                    ctx.send(id, msg.clone());
                }
                ctx.set_timer(ctx.now() + c.resend, token);
            }
        }
    }

    fn on_crash(&mut self, _now: SimTime) {
        if let RaftActor::Replica(r) = self {
            r.node = None;
            r.wakeups.clear();
        }
    }

    fn on_recover(&mut self, ctx: &mut Ctx<'_, RaftNote>) {
        if let RaftActor::Replica(r) = self {
            let applied = r.applied.len() as u64;
            r.node = Some(RaftNode::restore(
                r.id,
                r.peers.clone(),
                r.config,
                r.seed.wrapping_add(ctx.now().0),
                ctx.now(),
                r.disk.clone(),
                applied,
            ));
            let at = r.node().next_wakeup();
            r.wakeups.arm(ctx, at, TICK);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConsensusRunConfig {
    pub n: u32,
    pub seed: u64,
    pub latency: LatencyMatrix,
    pub timeout_min: SimDuration,
    pub timeout_max: SimDuration,
    pub commands: u64,
    /// Commands are submitted uniformly over `[0, horizon)`; crashes too.
    pub horizon: SimDuration,
    pub random_crashes: u32,
    pub leader_kills: u32,
}

impl ConsensusRunConfig {
    pub fn local(n: u32, seed: u64) -> Self {
        Self {
            n,
            seed,
            latency: LatencyMatrix::local(),
            timeout_min: SimDuration::from_millis(50),
            timeout_max: SimDuration::from_millis(150),
            commands: 20,
            horizon: SimDuration::from_millis(3000),
            random_crashes: 3,
            leader_kills: 2,
        }
    }

    pub fn max_faults(&self) -> u32 {
        (self.n - 1) / 2
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConsensusRunReport {
    pub leaders_by_term: BTreeMap<u64, BTreeSet<ActorId>>,
    pub election_safety_violations: u64,
    pub agreement_violations: u64,
    pub commands_proposed: u64,
    pub commands_committed: u64,
    /// Worst submission-to-commit delay among committed commands.
    pub max_commit_delay: SimDuration,
    /// Commands that did not commit within `10 × timeout_max`.
    pub liveness_violations: u64,
    /// Live replicas whose applied sequence differs from the longest one at the end.
    pub durability_violations: u64,
    pub crashes: u32,
    pub max_concurrent_down: u32,
    pub trace_digest: [u8; 32],
    /// Raw observations, for checkers that want to recount on their own.
    pub notes: Vec<Noted<RaftNote>>,
}

impl ConsensusRunReport {
    pub fn is_safe(&self) -> bool {
        self.election_safety_violations == 0
            && self.agreement_violations == 0
            && self.durability_violations == 0
    }
}

/// One seeded run with crashes of at most ⌊(n−1)/2⌋ replicas at a time.
pub fn run_consensus(cfg: &ConsensusRunConfig) -> ConsensusRunReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raft_cfg = RaftConfig::with_timeouts(cfg.timeout_min, cfg.timeout_max);
    let mut sim: Sim<RaftActor> = Sim::new(cfg.latency.clone(), cfg.seed, false);
    let regions = cfg.latency.region_count();
    for id in 0..cfg.n {
        let peers: Vec<NodeId> = (0..cfg.n).filter(|&p| p != id).collect();
        let node = RaftNode::new(id, peers.clone(), raft_cfg, cfg.seed, SimTime::ZERO);
        let first = node.next_wakeup();
        sim.add_actor(
            RaftActor::Replica(Box::new(Replica {
                id,
                peers,
                config: raft_cfg,
                seed: cfg.seed,
                node: Some(node),
                disk: PersistentState::default(),
                applied: Vec::new(),
                wakeups: WakeupSet::default(),
            })),
            id as usize % regions,
        );
        sim.schedule_timer(id, first, TICK);
    }
    let client = sim.add_actor(
        RaftActor::Client(Client {
            replicas: cfg.n,
            resend: cfg.timeout_max,
            pending: BTreeMap::new(),
            done: BTreeSet::new(),
        }),
        0,
    );
    for cmd in 0..cfg.commands {
        let at = SimTime(rng.gen_range(0..cfg.horizon.0));
        sim.schedule_timer(client, at, cmd);
    }

    // Fault plan: random crash windows and leader kills, never more than f down.
    let f = cfg.max_faults();
    let mut plan: Vec<(SimTime, Option<ActorId>, SimDuration)> = Vec::new();
    for _ in 0..cfg.random_crashes {
        let at = SimTime(rng.gen_range(0..cfg.horizon.0));
        let down_for = SimDuration(rng.gen_range(cfg.timeout_min.0..=cfg.timeout_max.0 * 4));
        plan.push((at, Some(rng.gen_range(0..cfg.n)), down_for));
    }
    for _ in 0..cfg.leader_kills {
        let at = SimTime(rng.gen_range(0..cfg.horizon.0));
        let down_for = SimDuration(rng.gen_range(cfg.timeout_min.0..=cfg.timeout_max.0 * 4));
        plan.push((at, None, down_for));
    }
    plan.sort_by_key(|p| p.0);

    let mut report = ConsensusRunReport::default();
    let mut recoveries: BTreeMap<ActorId, SimTime> = BTreeMap::new();
    for (at, target, down_for) in plan {
        sim.run_until(at);
        recoveries.retain(|_, t| *t > at);
        let victim = target.or_else(|| {
            (0..cfg.n).find(|&id| sim.is_up(id) && matches!(sim.actor(id), RaftActor::Replica(r) if r.node.as_ref().is_some_and(|n| n.is_leader())))
        });
        let Some(victim) = victim else { continue };
        if !sim.is_up(victim) || recoveries.len() as u32 >= f {
            continue;
        }
        sim.schedule_crash(victim, at);
        sim.schedule_recover(victim, at + down_for);
        recoveries.insert(victim, at + down_for);
        report.crashes += 1;
        report.max_concurrent_down = report.max_concurrent_down.max(recoveries.len() as u32);
    }
    let end = SimTime(cfg.horizon.0) + cfg.timeout_max.mul(10) + cfg.timeout_max.mul(4);
    sim.run_until(end);

    let mut committed_at: BTreeMap<u64, SimTime> = BTreeMap::new();
    let mut proposed_at: BTreeMap<u64, SimTime> = BTreeMap::new();
    let mut by_index: BTreeMap<u64, (u64, Vec<u8>)> = BTreeMap::new();
    for n in sim.notes() {
        match &n.note {
            RaftNote::Leader { term } => {
                report
                    .leaders_by_term
                    .entry(*term)
                    .or_default()
                    .insert(n.actor);
            }
            RaftNote::Commit {
                index,
                term,
                command,
            } => {
                match by_index.get(index) {
                    Some(prev) if prev != &(*term, command.clone()) => {
                        report.agreement_violations += 1
                    }
                    Some(_) => {}
                    None => {
                        by_index.insert(*index, (*term, command.clone()));
                    }
                }
                if command.len() == 8 {
                    let cmd = u64::from_be_bytes(command.as_slice().try_into().unwrap());
                    committed_at.entry(cmd).or_insert(n.time);
                }
            }
            RaftNote::Proposed { cmd } => {
                proposed_at.insert(*cmd, n.time);
            }
            RaftNote::Done { .. } => {}
        }
    }
    report.election_safety_violations = report
        .leaders_by_term
        .values()
        .filter(|s| s.len() > 1)
        .count() as u64;
    report.commands_proposed = proposed_at.len() as u64;
    let bound = cfg.timeout_max.mul(10);
    for (cmd, t0) in &proposed_at {
        match committed_at.get(cmd) {
            Some(t1) => {
                let d = t1.saturating_since(*t0);
                report.max_commit_delay = report.max_commit_delay.max(d);
                report.commands_committed += 1;
                if d > bound {
                    report.liveness_violations += 1;
                }
            }
            None => report.liveness_violations += 1,
        }
    }
    let sequences: Vec<&Vec<LogEntry>> = (0..cfg.n)
        .filter_map(|id| match sim.actor(id) {
            RaftActor::Replica(r) if sim.is_up(id) => Some(&r.applied),
            _ => None,
        })
        .collect();
    let longest = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    let reference = sequences.iter().find(|s| s.len() == longest);
    if let Some(reference) = reference {
        report.durability_violations = sequences.iter().filter(|s| s != &reference).count() as u64;
    }
    report.trace_digest = sim.trace_digest();
    report.notes = sim.notes().to_vec();
    report
}

/// Digest over the committed sequence, for quick cross-run comparison.
pub fn sequence_digest(entries: &[LogEntry]) -> [u8; 32] {
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.term.to_be_bytes());
        h.update(e.index.to_be_bytes());
        h.update((e.command.len() as u32).to_be_bytes());
        h.update(&e.command);
    }
    h.finalize().into()
}
