//! Raft-lite as a deterministic message-driven state machine: leader
//! election plus single-entry log replication with majority commit.
//!
//! Callers drive a node through [`RaftNode::tick`], [`RaftNode::handle`] or
//! [`RaftNode::propose`]; every effect comes back in an [`Output`]. Followers
//! may attach an opaque payload to the first acknowledgement of a newly
//! appended entry (via [`ReplicaHook`]); the leader buffers those payloads for
//! entries proposed with `payload_expected`.
//!
//! Wire format: a 1-byte tag followed by big-endian fields.
//!
//! ```text
//! 0x01 AppendEntries term(8) prev_index(8) prev_term(8) leader_commit(8) count(4)
//!                    count × [term(8) index(8) len(4) command]
//! 0x02 AppendAck     term(8) index(8) success(1) hint(8) has_payload(1) [len(4) payload]
//! 0x03 RequestVote   term(8) last_log_term(8) last_log_index(8)
//! 0x04 Vote          term(8) granted(1)
//! 0x05 Heartbeat     term(8) leader_commit(8)
//! ```

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::time::{SimDuration, SimTime};
use crate::wire::{Reader, WireError, Writer};

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsensusError {
    #[error("not the leader")]
    NotLeader,
    #[error("index {0} was not proposed with payloads expected")]
    UnknownIndex(u64),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Leader,
    Follower,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub term: u64,
    pub index: u64,
    /// Empty for the no-op a new leader appends.
    pub command: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConsensusMsg {
    AppendEntries {
        term: u64,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogEntry>,
        leader_commit: u64,
    },
    /// `index` is the last index the follower now matches on success.
    /// `hint` is the follower's last log index, used to back up on failure.
    AppendAck {
        term: u64,
        index: u64,
        success: bool,
        hint: u64,
        payload: Option<Vec<u8>>,
    },
    RequestVote {
        term: u64,
        last_log_term: u64,
        last_log_index: u64,
    },
    Vote {
        term: u64,
        granted: bool,
    },
    Heartbeat {
        term: u64,
        leader_commit: u64,
    },
}

pub const TAG_APPEND_ENTRIES: u8 = 0x01;
pub const TAG_APPEND_ACK: u8 = 0x02;
pub const TAG_REQUEST_VOTE: u8 = 0x03;
pub const TAG_VOTE: u8 = 0x04;
pub const TAG_HEARTBEAT: u8 = 0x05;

impl ConsensusMsg {
    pub fn term(&self) -> u64 {
        match self {
            Self::AppendEntries { term, .. }
            | Self::AppendAck { term, .. }
            | Self::RequestVote { term, .. }
            | Self::Vote { term, .. }
            | Self::Heartbeat { term, .. } => *term,
        }
    }

    pub fn encode_into(&self, w: &mut Writer) {
        match self {
            Self::AppendEntries {
                term,
                prev_index,
                prev_term,
                entries,
                leader_commit,
            } => {
                w.u8(TAG_APPEND_ENTRIES)
                    .u64(*term)
                    .u64(*prev_index)
                    .u64(*prev_term)
                    .u64(*leader_commit);
                w.u32(entries.len() as u32);
                for e in entries {
                    w.u64(e.term).u64(e.index).bytes(&e.command);
                }
            }
            Self::AppendAck {
                term,
                index,
                success,
                hint,
                payload,
            } => {
                w.u8(TAG_APPEND_ACK)
                    .u64(*term)
                    .u64(*index)
                    .u8(*success as u8)
                    .u64(*hint);
                match payload {
                    Some(p) => w.u8(1).bytes(p),
                    None => w.u8(0),
                };
            }
            Self::RequestVote {
                term,
                last_log_term,
                last_log_index,
            } => {
                w.u8(TAG_REQUEST_VOTE)
                    .u64(*term)
                    .u64(*last_log_term)
                    .u64(*last_log_index);
            }
            Self::Vote { term, granted } => {
                w.u8(TAG_VOTE).u64(*term).u8(*granted as u8);
            }
            Self::Heartbeat {
                term,
                leader_commit,
            } => {
                w.u8(TAG_HEARTBEAT).u64(*term).u64(*leader_commit);
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ConsensusError> {
        let mut r = Reader::new(bytes);
        let m = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(m)
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, ConsensusError> {
        let msg = match r.u8()? {
            TAG_APPEND_ENTRIES => {
                let (term, prev_index, prev_term, leader_commit) =
                    (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
                let count = r.u32()?;
                let mut entries = Vec::new();
                for _ in 0..count {
                    entries.push(LogEntry {
                        term: r.u64()?,
                        index: r.u64()?,
                        command: r.bytes()?.to_vec(),
                    });
                }
                Self::AppendEntries {
                    term,
                    prev_index,
                    prev_term,
                    entries,
                    leader_commit,
                }
            }
            TAG_APPEND_ACK => {
                let (term, index, success, hint) = (r.u64()?, r.u64()?, r.bool()?, r.u64()?);
                let payload = if r.bool()? {
                    Some(r.bytes()?.to_vec())
                } else {
                    None
                };
                Self::AppendAck {
                    term,
                    index,
                    success,
                    hint,
                    payload,
                }
            }
            TAG_REQUEST_VOTE => Self::RequestVote {
                term: r.u64()?,
                last_log_term: r.u64()?,
                last_log_index: r.u64()?,
            },
            TAG_VOTE => Self::Vote {
                term: r.u64()?,
                granted: r.bool()?,
            },
            TAG_HEARTBEAT => Self::Heartbeat {
                term: r.u64()?,
                leader_commit: r.u64()?,
            },
            tag => {
                return Err(WireError::UnknownTag {
                    what: "consensus message",
                    tag,
                }
                .into())
            }
        };
        Ok(msg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaftConfig {
    pub timeout_min: SimDuration,
    pub timeout_max: SimDuration,
    pub heartbeat_interval: SimDuration,
    /// Resend the next entry to a lagging peer after this much silence.
    pub retransmit_after: SimDuration,
}

impl RaftConfig {
    /// Heartbeats every `min / 5`; retransmission after `max`.
    pub fn with_timeouts(min: SimDuration, max: SimDuration) -> Self {
        assert!(
            min <= max && min.0 > 0,
            "timeout range must be non-empty and positive"
        );
        Self {
            timeout_min: min,
            timeout_max: max,
            heartbeat_interval: SimDuration((min.0 / 5).max(1)),
            retransmit_after: max,
        }
    }
}

/// State that survives a crash.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PersistentState {
    pub current_term: u64,
    pub voted_for: Option<NodeId>,
    pub log: Vec<LogEntry>,
}

impl PersistentState {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.current_term);
        match self.voted_for {
            Some(v) => w.u8(1).u32(v),
            None => w.u8(0),
        };
        w.u64(self.log.len() as u64);
        for e in &self.log {
            w.u64(e.term).u64(e.index).bytes(&e.command);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ConsensusError> {
        let mut r = Reader::new(bytes);
        let current_term = r.u64()?;
        let voted_for = if r.bool()? { Some(r.u32()?) } else { None };
        let n = r.u64()?;
        let mut log = Vec::new();
        for i in 0..n {
            let e = LogEntry {
                term: r.u64()?,
                index: r.u64()?,
                command: r.bytes()?.to_vec(),
            };
            if e.index != i + 1 {
                return Err(WireError::Invalid("log indices not contiguous").into());
            }
            log.push(e);
        }
        r.finish()?;
        Ok(Self {
            current_term,
            voted_for,
            log,
        })
    }
}

/// Application callbacks invoked while a follower mutates its log.
pub trait ReplicaHook {
    /// Called once per newly appended entry; the return value rides on the
    /// acknowledgement for that entry.
    fn on_append(&mut self, _entry: &LogEntry) -> Option<Vec<u8>> {
        None
    }

    /// Entries at `from_index` and above were discarded.
    fn on_truncate(&mut self, _from_index: u64) {}
}

/// A hook that does nothing.
pub struct NoHook;
impl ReplicaHook for NoHook {}

#[derive(Debug, Default)]
pub struct Output {
    pub messages: Vec<(NodeId, ConsensusMsg)>,
    /// Newly committed entries, in index order, each emitted exactly once.
    pub committed: Vec<LogEntry>,
    pub became_leader: bool,
    pub stepped_down: bool,
}

impl Output {
    fn send(&mut self, to: NodeId, msg: ConsensusMsg) {
        self.messages.push((to, msg));
    }

    pub fn merge(&mut self, other: Output) {
        self.messages.extend(other.messages);
        self.committed.extend(other.committed);
        self.became_leader |= other.became_leader;
        self.stepped_down |= other.stepped_down;
    }
}

#[derive(Debug, Clone)]
struct PeerProgress {
    next_index: u64,
    match_index: u64,
    /// Highest index sent since the last reset; allows pipelining.
    sent_up_to: u64,
    last_sent: SimTime,
    last_progress: SimTime,
}

pub struct RaftNode {
    id: NodeId,
    peers: Vec<NodeId>,
    config: RaftConfig,
    rng: ChaCha8Rng,

    current_term: u64,
    voted_for: Option<NodeId>,
    log: Vec<LogEntry>,

    role: NodeRole,
    leader_id: Option<NodeId>,
    commit_index: u64,
    emitted_index: u64,
    /// Highest index known to match the current leader's log this term.
    verified_index: u64,
    election_deadline: SimTime,
    votes: BTreeSet<NodeId>,

    progress: BTreeMap<NodeId, PeerProgress>,
    payloads: BTreeMap<u64, Vec<(NodeId, Vec<u8>)>>,
    commit_limit: Option<u64>,
}

impl std::fmt::Debug for RaftNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RaftNode")
            .field("id", &self.id)
            .field("role", &self.role)
            .field("term", &self.current_term)
            .field("last_index", &self.last_index())
            .field("commit_index", &self.commit_index)
            .finish_non_exhaustive()
    }
}

impl RaftNode {
    /// `peers` excludes `id`. `seed` drives election-timeout randomization.
    pub fn new(
        id: NodeId,
        peers: Vec<NodeId>,
        config: RaftConfig,
        seed: u64,
        now: SimTime,
    ) -> Self {
        Self::restore(id, peers, config, seed, now, PersistentState::default(), 0)
    }

    /// Rebuilds a node after a crash. Entries up to `applied_index` were
    /// already consumed by the application and are not emitted again.
    pub fn restore(
        id: NodeId,
        peers: Vec<NodeId>,
        config: RaftConfig,
        seed: u64,
        now: SimTime,
        state: PersistentState,
        applied_index: u64,
    ) -> Self {
        debug_assert!(!peers.contains(&id));
        let applied = applied_index.min(state.log.len() as u64);
        let mut node = Self {
            id,
            peers,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id) << 32) ^ 0x5eed),
            current_term: state.current_term,
            voted_for: state.voted_for,
            log: state.log,
            role: NodeRole::Follower,
            leader_id: None,
            commit_index: applied,
            emitted_index: applied,
            verified_index: 0,
            election_deadline: now,
            votes: BTreeSet::new(),
            progress: BTreeMap::new(),
            payloads: BTreeMap::new(),
            commit_limit: None,
        };
        node.reset_election_deadline(now);
        node
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn role(&self) -> NodeRole {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == NodeRole::Leader
    }

    pub fn current_term(&self) -> u64 {
        self.current_term
    }

    pub fn leader_id(&self) -> Option<NodeId> {
        self.leader_id
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn entry(&self, index: u64) -> Option<&LogEntry> {
        index.checked_sub(1).and_then(|i| self.log.get(i as usize))
    }

    pub fn election_deadline(&self) -> SimTime {
        self.election_deadline
    }

    pub fn config(&self) -> &RaftConfig {
        &self.config
    }

    pub fn cluster_size(&self) -> usize {
        self.peers.len() + 1
    }

    /// ⌈(n+1)/2⌉.
    pub fn majority(&self) -> usize {
        self.cluster_size() / 2 + 1
    }

    pub fn persistent_state(&self) -> PersistentState {
        PersistentState {
            current_term: self.current_term,
            voted_for: self.voted_for,
            log: self.log.clone(),
        }
    }

    /// Leader never advances its commit index past `limit`.
    /// Raising the limit may commit entries that were held back.
    pub fn set_commit_limit(&mut self, limit: Option<u64>) -> Output {
        let mut out = Output::default();
        if self.commit_limit != limit {
            self.commit_limit = limit;
            self.advance_commit(&mut out);
        }
        out
    }

    pub fn commit_limit(&self) -> Option<u64> {
        self.commit_limit
    }

    /// Earliest time at which `tick` may have something to do.
    pub fn next_wakeup(&self) -> SimTime {
        match self.role {
            NodeRole::Leader => self
                .progress
                .values()
                .map(|p| {
                    let hb = p.last_sent + self.config.heartbeat_interval;
                    if p.match_index < self.last_index() {
                        hb.min(p.last_progress + self.config.retransmit_after)
                    } else {
                        hb
                    }
                })
                .min()
                .unwrap_or(SimTime(u64::MAX)),
            _ => self.election_deadline,
        }
    }

    fn term_at(&self, index: u64) -> u64 {
        if index == 0 {
            0
        } else {
            self.entry(index).map_or(0, |e| e.term)
        }
    }

    fn last_term(&self) -> u64 {
        self.log.last().map_or(0, |e| e.term)
    }

    fn reset_election_deadline(&mut self, now: SimTime) {
        let span = self
            .rng
            .gen_range(self.config.timeout_min.0..=self.config.timeout_max.0);
        self.election_deadline = now + SimDuration(span);
    }

    fn become_follower(&mut self, term: u64, out: &mut Output) {
        if self.role == NodeRole::Leader {
            out.stepped_down = true;
        }
        if term > self.current_term {
            self.current_term = term;
            self.voted_for = None;
            self.leader_id = None;
        }
        self.role = NodeRole::Follower;
        self.verified_index = 0;
        self.votes.clear();
        self.progress.clear();
        self.payloads.clear();
        self.commit_limit = None;
    }

    pub fn tick(&mut self, now: SimTime) -> Output {
        let mut out = Output::default();
        match self.role {
            NodeRole::Leader => {
                for peer in self.peers.clone() {
                    let p = &self.progress[&peer];
                    let lagging = p.match_index < self.last_index();
                    if lagging && now >= p.last_progress + self.config.retransmit_after {
                        let next = p.match_index + 1;
                        let p = self.progress.get_mut(&peer).unwrap();
                        p.next_index = next;
                        p.last_progress = now;
                        self.send_append(peer, next, now, &mut out);
                    } else if now >= p.last_sent + self.config.heartbeat_interval {
                        let msg = ConsensusMsg::Heartbeat {
                            term: self.current_term,
                            leader_commit: self.commit_index,
                        };
                        self.progress.get_mut(&peer).unwrap().last_sent = now;
                        out.send(peer, msg);
                    }
                }
            }
            NodeRole::Follower | NodeRole::Candidate => {
                if now >= self.election_deadline {
                    self.start_election(now, &mut out);
                }
            }
        }
        out
    }

    fn start_election(&mut self, now: SimTime, out: &mut Output) {
        self.current_term += 1;
        self.role = NodeRole::Candidate;
        self.voted_for = Some(self.id);
        self.leader_id = None;
        self.verified_index = 0;
        self.votes = BTreeSet::from([self.id]);
        self.reset_election_deadline(now);
        let msg = ConsensusMsg::RequestVote {
            term: self.current_term,
            last_log_term: self.last_term(),
            last_log_index: self.last_index(),
        };
        for &peer in &self.peers {
            out.send(peer, msg.clone());
        }
        if self.votes.len() >= self.majority() {
            self.become_leader(now, out);
        }
    }

    fn become_leader(&mut self, now: SimTime, out: &mut Output) {
        self.role = NodeRole::Leader;
        self.leader_id = Some(self.id);
        self.votes.clear();
        let last = self.last_index();
        self.progress = self
            .peers
            .iter()
            .map(|&p| {
                (
                    p,
                    PeerProgress {
                        next_index: last + 1,
                        match_index: 0,
                        sent_up_to: last,
                        last_sent: now,
                        last_progress: now,
                    },
                )
            })
            .collect();
        out.became_leader = true;
        self.append_local(Vec::new(), now, out);
    }

    /// Appends a command on the leader and streams it to caught-up peers.
    pub fn propose(
        &mut self,
        command: Vec<u8>,
        payload_expected: bool,
        now: SimTime,
    ) -> Result<(u64, Output), ConsensusError> {
        if self.role != NodeRole::Leader {
            return Err(ConsensusError::NotLeader);
        }
        let mut out = Output::default();
        let index = self.last_index() + 1;
        if payload_expected {
            self.payloads.insert(index, Vec::new());
        }
        self.append_local(command, now, &mut out);
        Ok((index, out))
    }

    fn append_local(&mut self, command: Vec<u8>, now: SimTime, out: &mut Output) {
        let index = self.last_index() + 1;
        self.log.push(LogEntry {
            term: self.current_term,
            index,
            command,
        });
        for peer in self.peers.clone() {
            if self.progress[&peer].sent_up_to + 1 == index {
                self.send_append(peer, index, now, out);
            }
        }
        self.advance_commit(out);
    }

    /// Sends the entry at `index` (or an empty probe past the end).
    fn send_append(&mut self, peer: NodeId, index: u64, now: SimTime, out: &mut Output) {
        let prev_index = index - 1;
        let entries: Vec<LogEntry> = self.entry(index).cloned().into_iter().collect();
        let msg = ConsensusMsg::AppendEntries {
            term: self.current_term,
            prev_index,
            prev_term: self.term_at(prev_index),
            leader_commit: self.commit_index,
            entries,
        };
        let p = self.progress.get_mut(&peer).unwrap();
        p.sent_up_to = index.min(self.log.len() as u64);
        p.last_sent = now;
        out.send(peer, msg);
    }

    pub fn handle(
        &mut self,
        from: NodeId,
        msg: ConsensusMsg,
        now: SimTime,
        hook: &mut dyn ReplicaHook,
    ) -> Output {
        let mut out = Output::default();
        if msg.term() > self.current_term {
            self.become_follower(msg.term(), &mut out);
        }
        match msg {
            ConsensusMsg::RequestVote {
                term,
                last_log_term,
                last_log_index,
            } => {
                let up_to_date =
                    (last_log_term, last_log_index) >= (self.last_term(), self.last_index());
                let granted = term == self.current_term
                    && self.role == NodeRole::Follower
                    && self.voted_for.is_none_or(|v| v == from)
                    && up_to_date;
                if granted {
                    self.voted_for = Some(from);
                    self.reset_election_deadline(now);
                }
                out.send(
                    from,
                    ConsensusMsg::Vote {
                        term: self.current_term,
                        granted,
                    },
                );
            }
            ConsensusMsg::Vote { term, granted } => {
                if self.role == NodeRole::Candidate && term == self.current_term && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.majority() {
                        self.become_leader(now, &mut out);
                    }
                }
            }
            ConsensusMsg::AppendEntries {
                term,
                prev_index,
                prev_term,
                entries,
                leader_commit,
            } => {
                if term < self.current_term {
                    out.send(from, self.reject());
                } else {
                    self.accept_leader(from, term, now, &mut out);
                    self.follow_append(
                        from,
                        prev_index,
                        prev_term,
                        entries,
                        leader_commit,
                        hook,
                        &mut out,
                    );
                }
            }
            ConsensusMsg::Heartbeat {
                term,
                leader_commit,
            } => {
                if term < self.current_term {
                    out.send(from, self.reject());
                } else {
                    self.accept_leader(from, term, now, &mut out);
                    if leader_commit > self.verified_index {
                        // Ask the leader to verify our log so we can commit.
                        out.send(from, self.reject());
                    }
                    self.follower_commit(leader_commit, &mut out);
                }
            }
            ConsensusMsg::AppendAck {
                term,
                index,
                success,
                hint,
                payload,
            } => {
                if self.role == NodeRole::Leader
                    && term == self.current_term
                    && self.progress.contains_key(&from)
                {
                    self.leader_ack(from, index, success, hint, payload, now, &mut out);
                }
            }
        }
        out
    }

    fn reject(&self) -> ConsensusMsg {
        ConsensusMsg::AppendAck {
            term: self.current_term,
            index: 0,
            success: false,
            hint: self.last_index(),
            payload: None,
        }
    }

    fn accept_leader(&mut self, leader: NodeId, term: u64, now: SimTime, out: &mut Output) {
        debug_assert_eq!(term, self.current_term);
        if self.role != NodeRole::Follower {
            self.become_follower(term, out);
        }
        self.leader_id = Some(leader);
        self.reset_election_deadline(now);
    }

    #[allow(clippy::too_many_arguments)]
    fn follow_append(
        &mut self,
        leader: NodeId,
        prev_index: u64,
        prev_term: u64,
        entries: Vec<LogEntry>,
        leader_commit: u64,
        hook: &mut dyn ReplicaHook,
        out: &mut Output,
    ) {
        if prev_index > self.last_index() || self.term_at(prev_index) != prev_term {
            let hint = self.last_index().min(prev_index.saturating_sub(1));
            out.send(
                leader,
                ConsensusMsg::AppendAck {
                    term: self.current_term,
                    index: 0,
                    success: false,
                    hint,
                    payload: None,
                },
            );
            return;
        }
        let mut payload = None;
        let mut matched = prev_index;
        for entry in entries {
            debug_assert_eq!(entry.index, matched + 1);
            match self.entry(entry.index) {
                Some(existing) if existing.term == entry.term => {}
                existing => {
                    if existing.is_some() {
                        assert!(
                            entry.index > self.commit_index,
                            "committed entry {} would be overwritten",
                            entry.index
                        );
                        self.log.truncate(entry.index as usize - 1);
                        hook.on_truncate(entry.index);
                    }
                    if let Some(p) = hook.on_append(&entry) {
                        payload = Some(p);
                    }
                    self.log.push(entry);
                }
            }
            matched += 1;
        }
        self.verified_index = self.verified_index.max(matched);
        self.follower_commit(leader_commit, out);
        out.send(
            leader,
            ConsensusMsg::AppendAck {
                term: self.current_term,
                index: matched,
                success: true,
                hint: self.last_index(),
                payload,
            },
        );
    }

    fn follower_commit(&mut self, leader_commit: u64, out: &mut Output) {
        let target = leader_commit.min(self.verified_index);
        if target > self.commit_index {
            self.commit_index = target;
            self.emit_committed(out);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn leader_ack(
        &mut self,
        from: NodeId,
        index: u64,
        success: bool,
        hint: u64,
        payload: Option<Vec<u8>>,
        now: SimTime,
        out: &mut Output,
    ) {
        let last = self.last_index();
        if success {
            let p = self.progress.get_mut(&from).unwrap();
            if index > p.match_index {
                p.match_index = index;
                p.last_progress = now;
            }
            p.next_index = p.next_index.max(p.match_index + 1);
            if p.sent_up_to < p.match_index {
                p.sent_up_to = p.match_index;
            }
            if let (Some(payload), Some(buf)) = (payload, self.payloads.get_mut(&index)) {
                if !buf.iter().any(|(n, _)| *n == from) {
                    buf.push((from, payload));
                }
            }
            let p = &self.progress[&from];
            if p.sent_up_to < last {
                let next = p.sent_up_to + 1;
                self.send_append(from, next, now, out);
            }
            self.advance_commit(out);
        } else {
            let p = self.progress.get_mut(&from).unwrap();
            let next = (hint + 1)
                .min(p.next_index.saturating_sub(1).max(p.match_index + 1))
                .clamp(1, last + 1);
            p.next_index = next.max(p.match_index + 1);
            let next = p.next_index;
            self.send_append(from, next, now, out);
        }
    }

    fn advance_commit(&mut self, out: &mut Output) {
        if self.role != NodeRole::Leader {
            return;
        }
        let mut matches: Vec<u64> = self.progress.values().map(|p| p.match_index).collect();
        matches.push(self.last_index());
        matches.sort_unstable_by(|a, b| b.cmp(a));
        let mut candidate = matches[self.majority() - 1];
        if let Some(limit) = self.commit_limit {
            candidate = candidate.min(limit);
        }
        // Only entries from the current term commit by counting replicas.
        if candidate > self.commit_index && self.term_at(candidate) == self.current_term {
            self.commit_index = candidate;
            self.emit_committed(out);
        }
    }

    fn emit_committed(&mut self, out: &mut Output) {
        while self.emitted_index < self.commit_index {
            self.emitted_index += 1;
            out.committed.push(
                self.entry(self.emitted_index)
                    .expect("committed entry exists")
                    .clone(),
            );
        }
    }

    /// Payloads buffered so far for an entry proposed with payloads expected.
    pub fn collect_payloads(&self, index: u64) -> Result<&[(NodeId, Vec<u8>)], ConsensusError> {
        self.payloads
            .get(&index)
            .map(Vec::as_slice)
            .ok_or(ConsensusError::UnknownIndex(index))
    }

    pub fn release_payloads(&mut self, index: u64) {
        self.payloads.remove(&index);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn cfg() -> RaftConfig {
        RaftConfig::with_timeouts(SimDuration::from_millis(50), SimDuration::from_millis(150))
    }

    fn cluster(n: u32, seed: u64) -> Vec<RaftNode> {
        (0..n)
            .map(|i| {
                RaftNode::new(
                    i,
                    (0..n).filter(|&j| j != i).collect(),
                    cfg(),
                    seed,
                    SimTime::ZERO,
                )
            })
            .collect()
    }

    /// Instant-delivery FIFO network for hand traces.
    struct Net {
        nodes: Vec<RaftNode>,
        queue: VecDeque<(NodeId, NodeId, ConsensusMsg)>,
        committed: Vec<Vec<LogEntry>>,
        down: BTreeSet<NodeId>,
    }

    impl Net {
        fn new(nodes: Vec<RaftNode>) -> Self {
            let n = nodes.len();
            Self {
                nodes,
                queue: VecDeque::new(),
                committed: vec![Vec::new(); n],
                down: BTreeSet::new(),
            }
        }

        fn absorb(&mut self, from: NodeId, out: Output) {
            for (to, m) in out.messages {
                self.queue.push_back((from, to, m));
            }
            self.committed[from as usize].extend(out.committed);
        }

        fn tick(&mut self, id: NodeId, now: SimTime) {
            let out = self.nodes[id as usize].tick(now);
            self.absorb(id, out);
        }

        fn step(&mut self, now: SimTime) -> bool {
            let Some((from, to, m)) = self.queue.pop_front() else {
                return false;
            };
            if !self.down.contains(&to) {
                let out = self.nodes[to as usize].handle(from, m, now, &mut NoHook);
                self.absorb(to, out);
            }
            true
        }

        fn drain(&mut self, now: SimTime) {
            while self.step(now) {}
        }

        fn leaders(&self) -> Vec<NodeId> {
            self.nodes
                .iter()
                .filter(|n| n.is_leader() && !self.down.contains(&n.id))
                .map(|n| n.id)
                .collect()
        }
    }

    #[test]
    fn single_node_elects_itself_and_self_commits() {
        let mut n = cluster(1, 1).pop().unwrap();
        let before = n.election_deadline();
        let out = n.tick(before);
        assert!(out.became_leader);
        assert!(n.is_leader());
        assert_eq!(out.committed.len(), 1, "no-op commits at once");
        let (idx, out) = n.propose(b"x".to_vec(), false, before).unwrap();
        assert_eq!(idx, 2);
        assert_eq!(out.committed[0].command, b"x");
        assert!(out.messages.is_empty());
    }

    #[test]
    fn heartbeats_prevent_elections() {
        let mut net = Net::new(cluster(3, 2));
        let t0 = net.nodes[0].election_deadline();
        net.tick(0, t0);
        net.drain(t0);
        assert_eq!(net.leaders(), vec![0]);
        let term = net.nodes[0].current_term();
        let hb = cfg().heartbeat_interval;
        let mut now = t0;
        for _ in 0..200 {
            now += hb;
            for id in 0..3 {
                net.tick(id, now);
            }
            net.drain(now);
        }
        assert!(net.nodes.iter().all(|n| n.current_term() == term));
        assert_eq!(net.leaders(), vec![0]);
    }

    #[test]
    fn three_node_commit_after_one_follower_ack() {
        let mut net = Net::new(cluster(3, 3));
        let t = net.nodes[0].election_deadline();
        net.tick(0, t);
        net.drain(t);
        let (idx, out) = net.nodes[0].propose(b"cmd".to_vec(), false, t).unwrap();
        assert!(
            out.committed.is_empty(),
            "leader alone is not a majority of 3"
        );
        net.absorb(0, out);
        // Deliver AppendEntries to node 1 and its ack back; node 2 stays unheard.
        let pos = net.queue.iter().position(|(_, to, _)| *to == 1).unwrap();
        let (from, to, m) = net.queue.remove(pos).unwrap();
        let out = net.nodes[to as usize].handle(from, m, t, &mut NoHook);
        let (_, ack) = out.messages.into_iter().next().unwrap();
        let out = net.nodes[0].handle(1, ack, t, &mut NoHook);
        assert_eq!(out.committed.last().map(|e| e.index), Some(idx));
        assert_eq!(net.nodes[0].commit_index(), idx);
    }

    #[test]
    fn stale_ack_is_ignored() {
        let mut net = Net::new(cluster(3, 4));
        let t = net.nodes[0].election_deadline();
        net.tick(0, t);
        net.drain(t);
        let commit = net.nodes[0].commit_index();
        let stale = ConsensusMsg::AppendAck {
            term: 0,
            index: 99,
            success: true,
            hint: 99,
            payload: None,
        };
        let out = net.nodes[0].handle(1, stale, t, &mut NoHook);
        assert!(out.messages.is_empty() && out.committed.is_empty());
        assert_eq!(net.nodes[0].commit_index(), commit);
        assert!(net.nodes[0].is_leader());
    }

    #[test]
    fn propose_on_follower_fails() {
        let mut n = cluster(3, 5).remove(1);
        assert_eq!(
            n.propose(vec![1], false, SimTime::ZERO).unwrap_err(),
            ConsensusError::NotLeader
        );
    }

    #[test]
    fn payloads_are_buffered_per_index() {
        struct Share(u8);
        impl ReplicaHook for Share {
            fn on_append(&mut self, e: &LogEntry) -> Option<Vec<u8>> {
                (!e.command.is_empty()).then(|| vec![self.0])
            }
        }
        let mut nodes = cluster(5, 6);
        let t = nodes[0].election_deadline();
        let mut queue: VecDeque<(NodeId, NodeId, ConsensusMsg)> = VecDeque::new();
        let out = nodes[0].tick(t);
        queue.extend(out.messages.into_iter().map(|(to, m)| (0, to, m)));
        let mut proposed = None;
        while let Some((from, to, m)) = queue.pop_front() {
            let mut hook = Share(to as u8);
            let out = nodes[to as usize].handle(from, m, t, &mut hook);
            queue.extend(out.messages.into_iter().map(|(dst, m)| (to, dst, m)));
            if queue.is_empty() && proposed.is_none() && nodes[0].is_leader() {
                assert_eq!(
                    nodes[0].collect_payloads(7),
                    Err(ConsensusError::UnknownIndex(7))
                );
                let (idx, out) = nodes[0].propose(b"grant".to_vec(), true, t).unwrap();
                assert!(nodes[0].collect_payloads(idx).unwrap().is_empty());
                queue.extend(out.messages.into_iter().map(|(dst, m)| (0, dst, m)));
                proposed = Some(idx);
            }
        }
        let got = nodes[0].collect_payloads(proposed.unwrap()).unwrap();
        let mut from: Vec<_> = got.iter().map(|(n, p)| (*n, p[0])).collect();
        from.sort();
        assert_eq!(from, vec![(1, 1), (2, 2), (3, 3), (4, 4)]);
    }

    #[test]
    fn split_vote_resolves_in_later_term() {
        // Nodes 0 and 1 time out together; each votes for itself, node 2 and
        // 3 split between them.
        let mut net = Net::new(cluster(4, 7));
        let t = SimTime::from_millis(200);
        net.tick(0, t);
        net.tick(1, t);
        // Deliver 0's request to 2 first and 1's request to 3 first.
        let mut order: Vec<_> = net.queue.drain(..).collect();
        order.sort_by_key(|(from, to, _)| match (from, to) {
            (0, 2) | (1, 3) => 0,
            _ => 1,
        });
        net.queue.extend(order);
        net.drain(t);
        assert!(
            net.leaders().is_empty(),
            "2 of 4 votes each is not a majority"
        );
        let split_term = net.nodes[0].current_term();
        let mut now = t;
        while net.leaders().is_empty() {
            now += SimDuration::from_millis(1);
            for id in 0..4 {
                net.tick(id, now);
            }
            net.drain(now);
        }
        let leader = net.leaders()[0];
        assert!(net.nodes[leader as usize].current_term() > split_term);
    }

    #[test]
    fn lagging_follower_catches_up_via_backtracking() {
        let mut net = Net::new(cluster(3, 8));
        let t = net.nodes[0].election_deadline();
        net.tick(0, t);
        net.drain(t);
        net.down.insert(2);
        let mut now = t;
        for i in 0..5u8 {
            let (_, out) = net.nodes[0].propose(vec![i], false, now).unwrap();
            net.absorb(0, out);
            net.drain(now);
        }
        net.down.clear();
        for _ in 0..100 {
            now += cfg().heartbeat_interval;
            net.tick(0, now);
            net.drain(now);
        }
        assert_eq!(net.nodes[2].log(), net.nodes[0].log());
        assert_eq!(net.committed[2], net.committed[0]);
    }

    #[test]
    fn conflicting_suffix_is_replaced() {
        let mut net = Net::new(cluster(3, 9));
        let t = net.nodes[0].election_deadline();
        net.tick(0, t);
        net.drain(t);
        // Old leader 0 appends entries nobody else sees, then is cut off.
        net.down.insert(1);
        net.down.insert(2);
        for i in 0..3u8 {
            let (_, out) = net.nodes[0].propose(vec![i], false, t).unwrap();
            net.absorb(0, out);
        }
        net.drain(t);
        net.down = BTreeSet::from([0]);
        let mut now = t;
        while net.leaders().is_empty() {
            now += SimDuration::from_millis(1);
            for id in 1..3 {
                net.tick(id, now);
            }
            net.drain(now);
        }
        let leader = net.leaders()[0];
        let (_, out) = net.nodes[leader as usize]
            .propose(b"new".to_vec(), false, now)
            .unwrap();
        net.absorb(leader, out);
        net.drain(now);
        net.down.clear();
        for _ in 0..100 {
            now += cfg().heartbeat_interval;
            for id in 0..3 {
                net.tick(id, now);
            }
            net.drain(now);
        }
        assert!(!net.nodes[0].is_leader());
        assert_eq!(net.nodes[0].log(), net.nodes[leader as usize].log());
        assert!(!net.nodes[0].log().iter().any(|e| e.command == [1]));
    }

    #[test]
    fn wire_round_trip_and_layout() {
        let msgs = vec![
            ConsensusMsg::AppendEntries {
                term: 3,
                prev_index: 4,
                prev_term: 2,
                entries: vec![LogEntry {
                    term: 3,
                    index: 5,
                    command: b"abc".to_vec(),
                }],
                leader_commit: 4,
            },
            ConsensusMsg::AppendAck {
                term: 3,
                index: 5,
                success: true,
                hint: 5,
                payload: Some(vec![9; 3]),
            },
            ConsensusMsg::AppendAck {
                term: 3,
                index: 0,
                success: false,
                hint: 1,
                payload: None,
            },
            ConsensusMsg::RequestVote {
                term: 1,
                last_log_term: 0,
                last_log_index: 0,
            },
            ConsensusMsg::Vote {
                term: 1,
                granted: true,
            },
            ConsensusMsg::Heartbeat {
                term: 7,
                leader_commit: 6,
            },
        ];
        for m in msgs {
            let bytes = m.encode();
            assert_eq!(ConsensusMsg::decode(&bytes).unwrap(), m);
            assert!(ConsensusMsg::decode(&bytes[..bytes.len() - 1]).is_err());
        }
        assert_eq!(
            ConsensusMsg::Heartbeat {
                term: 1,
                leader_commit: 2
            }
            .encode(),
            [5, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 2]
        );
        assert!(ConsensusMsg::decode(&[0x09]).is_err());
    }

    #[test]
    fn persistent_state_round_trip_and_restore() {
        let mut n = cluster(1, 10).pop().unwrap();
        let t = n.election_deadline();
        n.tick(t);
        n.propose(b"a".to_vec(), false, t).unwrap();
        let ps = n.persistent_state();
        let back = PersistentState::decode(&ps.encode()).unwrap();
        assert_eq!(back, ps);
        let mut r = RaftNode::restore(0, vec![], cfg(), 10, t, back, 1);
        assert_eq!(r.role(), NodeRole::Follower);
        assert_eq!(r.commit_index(), 1);
        let out = r.tick(r.election_deadline());
        // Re-election commits the remaining entry plus a fresh no-op; the
        // already-applied entry is not emitted again.
        assert_eq!(
            out.committed.iter().map(|e| e.index).collect::<Vec<_>>(),
            vec![2, 3]
        );
    }

    #[test]
    fn vote_requires_up_to_date_log() {
        let mut nodes = cluster(3, 11);
        nodes[1].log.push(LogEntry {
            term: 1,
            index: 1,
            command: vec![],
        });
        nodes[1].current_term = 1;
        let out = nodes[1].handle(
            0,
            ConsensusMsg::RequestVote {
                term: 2,
                last_log_term: 0,
                last_log_index: 0,
            },
            SimTime::ZERO,
            &mut NoHook,
        );
        assert_eq!(
            out.messages,
            vec![(
                0,
                ConsensusMsg::Vote {
                    term: 2,
                    granted: false
                }
            )]
        );
        let out = nodes[1].handle(
            2,
            ConsensusMsg::RequestVote {
                term: 2,
                last_log_term: 1,
                last_log_index: 1,
            },
            SimTime::ZERO,
            &mut NoHook,
        );
        assert_eq!(
            out.messages,
            vec![(
                2,
                ConsensusMsg::Vote {
                    term: 2,
                    granted: true
                }
            )]
        );
        // One vote per term.
        let out = nodes[1].handle(
            0,
            ConsensusMsg::RequestVote {
                term: 2,
                last_log_term: 5,
                last_log_index: 9,
            },
            SimTime::ZERO,
            &mut NoHook,
        );
        assert_eq!(
            out.messages,
            vec![(
                0,
                ConsensusMsg::Vote {
                    term: 2,
                    granted: false
                }
            )]
        );
    }
}
