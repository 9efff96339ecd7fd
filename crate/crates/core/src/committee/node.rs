//! A committee member: consensus replica plus key-share custodian.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use zeroize::Zeroizing;

use crate::consensus::{
    ConsensusMsg, LogEntry, NodeId, Output, PersistentState, RaftConfig, RaftNode, ReplicaHook,
};
use crate::cost::CostOp;
use crate::enclave::{
    seal, unseal, AttestationCert, Enclave, Measurement, Platform, PublicKey, SealedBlob,
    SecureChannel, TrustAnchors,
};
use crate::policy::{check_eligibility, AccessPolicy, AvailabilityStatus, CapsuleId};
use crate::shamir::{reconstruct_key, ShareColumn, SharingParams};
use crate::sim::{Ctx, WakeupSet};
use crate::time::{SimDuration, SimTime};
use crate::wire::{Reader, Writer};

use super::msg::{deposit_aad, grant_aad, share_aad, CommitteeMsg, DenyReason, GrantCommand};
use super::store::{CapsuleState, GrantMirror, GrantRecord, NodeSecretStore};
use super::Note;

pub const NODE_CODE: &[u8] = b"capsule committee node v1";

const TICK: u64 = 0;

/// Static facts a node knows about itself and the committee.
#[derive(Debug, Clone)]
pub struct NodeEnv {
    pub id: NodeId,
    pub cert: AttestationCert,
    /// Enclave keys of all members, indexed by node id.
    pub member_pks: Vec<PublicKey>,
    pub anchors: TrustAnchors,
    pub params: SharingParams,
    pub raft: RaftConfig,
    pub seed: u64,
}

impl NodeEnv {
    fn n(&self) -> u32 {
        self.member_pks.len() as u32
    }

    fn peers(&self) -> Vec<NodeId> {
        (0..self.n()).filter(|&p| p != self.id).collect()
    }

    /// Share columns are numbered from 1.
    pub fn share_index(node: NodeId) -> u32 {
        node + 1
    }

    fn share_deadline(&self) -> SimDuration {
        self.raft.timeout_max.mul(4)
    }
}

/// Sealed state left behind by a crashed node.
#[derive(Debug, Clone)]
pub struct Disk {
    identity: SealedBlob,
    state: SealedBlob,
}

struct PendingGrant {
    record: GrantRecord,
    columns: BTreeMap<u32, ShareColumn>,
    deadline: SimTime,
    last_share_request: SimTime,
    committed: bool,
}

struct Live {
    enclave: Enclave,
    raft: RaftNode,
    store: NodeSecretStore,
    mirror: GrantMirror,
    channels: BTreeMap<NodeId, SecureChannel>,
    pending: BTreeMap<u64, PendingGrant>,
}

pub struct Node {
    env: NodeEnv,
    platform: Platform,
    rng: ChaCha8Rng,
    live: Option<Live>,
    disk: Option<Disk>,
    wakeups: WakeupSet,
    next_sweep: SimTime,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.env.id)
            .field("up", &self.live.is_some())
            .finish_non_exhaustive()
    }
}

fn channels_for(enclave: &Enclave, env: &NodeEnv) -> BTreeMap<NodeId, SecureChannel> {
    env.peers()
        .into_iter()
        .map(|p| {
            let ch = SecureChannel::establish(enclave.identity(), &env.member_pks[p as usize])
                .expect("member keys are valid");
            (p, ch)
        })
        .collect()
}

/// Runs step-1 checks on appended entries and answers with the local share.
struct FollowerHook<'a> {
    store: &'a NodeSecretStore,
    mirror: &'a mut GrantMirror,
    channel: Option<&'a SecureChannel>,
    anchors: &'a TrustAnchors,
    rng: &'a mut ChaCha8Rng,
    verifies: u64,
    symmetric: u64,
}

impl ReplicaHook for FollowerHook<'_> {
    fn on_append(&mut self, entry: &LogEntry) -> Option<Vec<u8>> {
        let rec = self.mirror.record(entry, self.store, self.anchors)?;
        self.verifies += rec.cert.verify_ops();
        if !rec.valid() {
            return None;
        }
        let share = self.store.capsules.get(&rec.capsule)?.share.as_ref()?;
        self.symmetric += 1;
        Some(self.channel?.seal(
            &share.encode(),
            &share_aad(entry.term, entry.index),
            self.rng,
        ))
    }

    fn on_truncate(&mut self, from_index: u64) {
        self.mirror.truncate(from_index);
    }
}

impl Node {
    pub fn new(env: NodeEnv, platform: Platform, enclave: Enclave, now: SimTime) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(env.seed ^ (0x6e6f6465 << 32) ^ u64::from(env.id));
        let raft = RaftNode::new(
            env.id,
            env.peers(),
            env.raft,
            env.seed ^ u64::from(env.id),
            now,
        );
        let channels = channels_for(&enclave, &env);
        Self {
            live: Some(Live {
                enclave,
                raft,
                store: NodeSecretStore::default(),
                mirror: GrantMirror::default(),
                channels,
                pending: BTreeMap::new(),
            }),
            env,
            platform,
            rng,
            disk: None,
            wakeups: WakeupSet::default(),
            next_sweep: now,
        }
    }

    pub fn id(&self) -> NodeId {
        self.env.id
    }

    pub fn is_up(&self) -> bool {
        self.live.is_some()
    }

    pub fn is_leader(&self) -> bool {
        self.live.as_ref().is_some_and(|l| l.raft.is_leader())
    }

    pub fn current_term(&self) -> Option<u64> {
        self.live.as_ref().map(|l| l.raft.current_term())
    }

    pub fn first_wakeup(&self) -> SimTime {
        self.live
            .as_ref()
            .map_or(SimTime::ZERO, |l| l.raft.next_wakeup())
    }

    pub fn store(&self) -> Option<&NodeSecretStore> {
        self.live.as_ref().map(|l| &l.store)
    }

    /// Every share column held by this node, read from live memory or, when
    /// crashed, from its sealed state.
    pub fn share_census(&self) -> Vec<(CapsuleId, ShareColumn)> {
        match (&self.live, &self.disk) {
            (Some(live), _) => {
                let mut out: Vec<(CapsuleId, ShareColumn)> = live
                    .store
                    .capsules
                    .iter()
                    .filter_map(|(id, c)| c.share.clone().map(|s| (*id, s)))
                    .collect();
                for p in live.pending.values() {
                    out.extend(p.columns.values().map(|c| (p.record.capsule, c.clone())));
                }
                out
            }
            (None, Some(disk)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let Ok((_, store, _)) = self.unseal_disk(disk, &mut rng) else {
                    return Vec::new();
                };
                store
                    .capsules
                    .into_iter()
                    .filter_map(|(id, c)| c.share.map(|s| (id, s)))
                    .collect()
            }
            (None, None) => Vec::new(),
        }
    }

    fn unseal_disk(
        &self,
        disk: &Disk,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Enclave, NodeSecretStore, PersistentState), String> {
        let enclave = Enclave::restore(&self.platform, NODE_CODE, &disk.identity, rng)
            .map_err(|e| e.to_string())?;
        let bytes = Zeroizing::new(unseal(&enclave, &disk.state).map_err(|e| e.to_string())?);
        let mut r = Reader::new(&bytes);
        let raft = PersistentState::decode(r.bytes().map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let store = NodeSecretStore::decode(
            r.bytes().map_err(|e| e.to_string())?,
            self.env.params.field(),
        )
        .map_err(|e| e.to_string())?;
        Ok((enclave, store, raft))
    }

    pub fn on_crash(&mut self) {
        if let Some(live) = self.live.take() {
            let mut w = Writer::new();
            w.bytes(&live.raft.persistent_state().encode())
                .bytes(&live.store.encode());
            let state = Zeroizing::new(w.finish());
            self.disk = Some(Disk {
                identity: live.enclave.seal_identity(&mut self.rng),
                state: seal(&live.enclave, &state, &mut self.rng),
            });
        }
        self.wakeups.clear();
    }

    pub fn on_recover(&mut self, ctx: &mut Ctx<'_, Note>) {
        let Some(disk) = self.disk.take() else { return };
        let mut rng = self.rng.clone();
        let restored = self.unseal_disk(&disk, &mut rng);
        self.rng = rng;
        let Ok((enclave, store, state)) = restored else {
            return;
        };
        let mut mirror = GrantMirror::default();
        for entry in &state.log {
            mirror.record(entry, &store, &self.env.anchors);
        }
        let now = ctx.now();
        let raft = RaftNode::restore(
            self.env.id,
            self.env.peers(),
            self.env.raft,
            self.env.seed ^ u64::from(self.env.id) ^ now.0,
            now,
            state,
            store.applied_index,
        );
        let channels = channels_for(&enclave, &self.env);
        self.live = Some(Live {
            enclave,
            raft,
            store,
            mirror,
            channels,
            pending: BTreeMap::new(),
        });
        self.arm(ctx);
    }

    fn arm(&mut self, ctx: &mut Ctx<'_, Note>) {
        if let Some(live) = &self.live {
            let at = live.raft.next_wakeup().min(self.next_sweep.max(ctx.now()));
            self.wakeups.arm(ctx, at, TICK);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Note>) {
        self.wakeups.fired(ctx.now());
        let Some(live) = self.live.as_mut() else {
            return;
        };
        let out = live.raft.tick(ctx.now());
        live.process(&self.env, &mut self.rng, ctx, out);
        if ctx.now() >= self.next_sweep {
            live.sweep(&self.env, &mut self.rng, ctx);
            self.next_sweep = ctx.now() + self.env.raft.timeout_max;
        }
        self.arm(ctx);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, from: u32, bytes: &[u8]) {
        let Some(live) = self.live.as_mut() else {
            return;
        };
        let env = &self.env;
        let rng = &mut self.rng;
        if bytes.first().is_some_and(|&t| t < 0x10) {
            if from >= env.n() {
                return;
            }
            let Ok(msg) = ConsensusMsg::decode(bytes) else {
                return;
            };
            let mut hook = FollowerHook {
                store: &live.store,
                mirror: &mut live.mirror,
                channel: live.channels.get(&from),
                anchors: &env.anchors,
                rng: &mut *rng,
                verifies: 0,
                symmetric: 0,
            };
            let out = live.raft.handle(from, msg, ctx.now(), &mut hook);
            let (verifies, symmetric) = (hook.verifies, hook.symmetric);
            ctx.charge_n(CostOp::Verify, verifies);
            ctx.charge_n(CostOp::Symmetric, symmetric);
            live.process(env, rng, ctx, out);
        } else if let Ok(msg) = CommitteeMsg::decode(bytes) {
            live.on_committee(env, rng, ctx, from, msg);
        }
        self.arm(ctx);
    }
}

impl Live {
    fn send(ctx: &mut Ctx<'_, Note>, to: u32, msg: &CommitteeMsg) {
        ctx.send(to, msg.encode());
    }

    fn on_committee(
        &mut self,
        env: &NodeEnv,
        rng: &mut ChaCha8Rng,
        ctx: &mut Ctx<'_, Note>,
        from: u32,
        msg: CommitteeMsg,
    ) {
        match msg {
            CommitteeMsg::Deposit {
                capsule,
                owner_pk,
                sealed,
            } => self.on_deposit(env, ctx, from, capsule, owner_pk, &sealed),
            CommitteeMsg::DepositAbort { capsule } => {
                if self
                    .store
                    .capsules
                    .get(&capsule)
                    .is_some_and(|c| c.access_log.is_empty())
                {
                    self.store.capsules.remove(&capsule);
                }
            }
            CommitteeMsg::AccessRequest {
                request_id,
                capsule,
                cert,
            } => self.on_access_request(env, rng, ctx, from, request_id, capsule, cert),
            CommitteeMsg::ShareRequest { term, entry } => {
                self.on_share_request(rng, ctx, from, term, entry)
            }
            CommitteeMsg::ShareReply {
                term,
                entry,
                sealed,
            }
                if self.raft.is_leader() && term == self.raft.current_term() => {
                    self.absorb_column(env, ctx, from, entry, &sealed);
                    self.refresh(env, rng, ctx);
                }
            _ => {}
        }
    }

    fn on_deposit(
        &mut self,
        env: &NodeEnv,
        ctx: &mut Ctx<'_, Note>,
        from: u32,
        capsule: CapsuleId,
        owner_pk: PublicKey,
        sealed: &[u8],
    ) {
        ctx.charge(CostOp::Sign);
        let Ok(channel) = SecureChannel::establish(self.enclave.identity(), &owner_pk) else {
            return;
        };
        ctx.charge(CostOp::Symmetric);
        let Ok(plain) = channel.open(sealed, &deposit_aad(&capsule)) else {
            return;
        };
        let plain = Zeroizing::new(plain);
        let mut r = Reader::new(&plain);
        let Ok(policy) = AccessPolicy::decode_from(&mut r) else {
            return;
        };
        let Ok(column) = ShareColumn::decode_from(&mut r, env.params.field()) else {
            return;
        };
        if r.finish().is_err() || column.index != NodeEnv::share_index(env.id) {
            return;
        }
        self.store.capsules.entry(capsule).or_insert(CapsuleState {
            owner_pk,
            policy,
            share: Some(column),
            access_log: Vec::new(),
        });
        Self::send(ctx, from, &CommitteeMsg::DepositAck { capsule });
    }

    #[allow(clippy::too_many_arguments)]
    fn on_access_request(
        &mut self,
        env: &NodeEnv,
        rng: &mut ChaCha8Rng,
        ctx: &mut Ctx<'_, Note>,
        from: u32,
        request_id: u64,
        capsule: CapsuleId,
        cert: AttestationCert,
    ) {
        if !self.raft.is_leader() {
            Self::send(
                ctx,
                from,
                &CommitteeMsg::LeaderHint {
                    request_id,
                    leader: self.raft.leader_id(),
                },
            );
            return;
        }
        let deny = |ctx: &mut Ctx<'_, Note>, reason| {
            Self::send(ctx, from, &CommitteeMsg::Denial { request_id, reason })
        };
        ctx.charge_n(CostOp::Verify, cert.verify_ops());
        let now = ctx.now();
        let Some(state) = self.store.capsules.get(&capsule) else {
            return deny(ctx, DenyReason::Unknown);
        };
        if !check_eligibility(&state.policy, &cert, &env.anchors) {
            return deny(ctx, DenyReason::Ineligible);
        }
        if let Some(rec) = self.mirror.find(&capsule, &cert.quote.enclave_pk) {
            let committed = rec.index <= self.raft.commit_index();
            match rec.denial {
                Some(reason) if committed => deny(ctx, reason),
                Some(_) => deny(ctx, DenyReason::Busy),
                None if self.pending.contains_key(&rec.index) => {}
                None => {
                    // Logged earlier but never delivered by this leader.
                    let rec = rec.clone();
                    self.start_pending(env, ctx, rec, committed, true);
                    self.refresh(env, rng, ctx);
                }
            }
            return;
        }
        if state.status(now) == AvailabilityStatus::Expired {
            if self.store.discard_if_expired(&capsule, now) {
                ctx.note(Note::ShareDiscarded {
                    node: env.id,
                    capsule,
                });
            }
            return deny(ctx, DenyReason::Expired);
        }
        if state
            .policy
            .expiry
            .status_for(self.mirror.valid_total(&capsule), now)
            == AvailabilityStatus::Expired
        {
            return deny(ctx, DenyReason::Busy);
        }
        let cmd = GrantCommand {
            capsule,
            grant_time: now,
            request_id,
            reply_to: from,
            cert,
        };
        let Ok((index, out)) = self.raft.propose(cmd.encode(), true, now) else {
            return;
        };
        let entry = self.raft.entry(index).expect("just proposed").clone();
        let rec = self
            .mirror
            .record(&entry, &self.store, &env.anchors)
            .expect("grant command")
            .clone();
        debug_assert!(rec.valid());
        self.start_pending(env, ctx, rec, false, false);
        self.process(env, rng, ctx, out);
    }

    fn start_pending(
        &mut self,
        env: &NodeEnv,
        ctx: &mut Ctx<'_, Note>,
        record: GrantRecord,
        committed: bool,
        ask: bool,
    ) {
        let mut columns = BTreeMap::new();
        if let Some(own) = self
            .store
            .capsules
            .get(&record.capsule)
            .and_then(|c| c.share.clone())
        {
            columns.insert(own.index, own);
        }
        let index = record.index;
        let now = ctx.now();
        self.pending.insert(
            index,
            PendingGrant {
                record,
                columns,
                deadline: now + env.share_deadline(),
                last_share_request: now,
                committed,
            },
        );
        if ask {
            self.request_shares(env, ctx, index);
        }
    }

    fn request_shares(&mut self, env: &NodeEnv, ctx: &mut Ctx<'_, Note>, index: u64) {
        let term = self.raft.current_term();
        let Some(p) = self.pending.get_mut(&index) else {
            return;
        };
        p.last_share_request = ctx.now();
        for peer in env.peers() {
            if !p.columns.contains_key(&NodeEnv::share_index(peer)) {
                Self::send(
                    ctx,
                    peer,
                    &CommitteeMsg::ShareRequest { term, entry: index },
                );
            }
        }
    }

    fn on_share_request(
        &mut self,
        rng: &mut ChaCha8Rng,
        ctx: &mut Ctx<'_, Note>,
        from: u32,
        term: u64,
        index: u64,
    ) {
        if self.raft.is_leader()
            || term != self.raft.current_term()
            || self.raft.leader_id() != Some(from)
        {
            return;
        }
        let Some(rec) = self.mirror.get(index).filter(|r| r.valid()) else {
            return;
        };
        let Some(share) = self
            .store
            .capsules
            .get(&rec.capsule)
            .and_then(|c| c.share.as_ref())
        else {
            return;
        };
        let Some(channel) = self.channels.get(&from) else {
            return;
        };
        ctx.charge(CostOp::Symmetric);
        let sealed = channel.seal(&share.encode(), &share_aad(rec.term, index), rng);
        Self::send(
            ctx,
            from,
            &CommitteeMsg::ShareReply {
                term,
                entry: index,
                sealed,
            },
        );
    }

    fn absorb_column(
        &mut self,
        env: &NodeEnv,
        ctx: &mut Ctx<'_, Note>,
        from: u32,
        index: u64,
        sealed: &[u8],
    ) {
        let Some(p) = self.pending.get_mut(&index) else {
            return;
        };
        let expected = NodeEnv::share_index(from);
        if p.columns.contains_key(&expected) {
            return;
        }
        let Some(channel) = self.channels.get(&from) else {
            return;
        };
        ctx.charge(CostOp::Symmetric);
        let Ok(plain) = channel.open(sealed, &share_aad(p.record.term, index)) else {
            return;
        };
        let plain = Zeroizing::new(plain);
        if let Ok(col) = ShareColumn::decode(&plain, env.params.field()) {
            if col.index == expected {
                p.columns.insert(col.index, col);
            }
        }
    }

    /// Absorbs piggybacked shares and finishes whatever grants it can.
    /// Commits stay held back while a grant still lacks shares.
    fn refresh(&mut self, env: &NodeEnv, rng: &mut ChaCha8Rng, ctx: &mut Ctx<'_, Note>) {
        if !self.raft.is_leader() {
            return;
        }
        loop {
            let indices: Vec<u64> = self.pending.keys().copied().collect();
            for index in indices {
                let payloads: Vec<(NodeId, Vec<u8>)> = match self.raft.collect_payloads(index) {
                    Ok(p) => p.to_vec(),
                    Err(_) => continue,
                };
                for (from, sealed) in payloads {
                    self.absorb_column(env, ctx, from, index, &sealed);
                }
            }
            let ready: Vec<u64> = self
                .pending
                .iter()
                .filter(|(_, p)| {
                    p.committed
                        && (p.columns.len() as u32 >= env.params.t() || ctx.now() >= p.deadline)
                })
                .map(|(i, _)| *i)
                .collect();
            for index in ready {
                self.finish(env, rng, ctx, index);
            }
            let t = env.params.t();
            let limit = self
                .pending
                .values()
                .filter(|p| !p.committed && (p.columns.len() as u32) < t && ctx.now() < p.deadline)
                .map(|p| p.record.index - 1)
                .min();
            let out = self.raft.set_commit_limit(limit);
            if out.committed.is_empty() && out.messages.is_empty() {
                break;
            }
            self.process_inner(env, rng, ctx, out);
        }
    }

    fn finish(&mut self, env: &NodeEnv, rng: &mut ChaCha8Rng, ctx: &mut Ctx<'_, Note>, index: u64) {
        let Some(p) = self.pending.remove(&index) else {
            return;
        };
        self.raft.release_payloads(index);
        let rec = p.record;
        let to = rec.reply_to;
        let columns: Vec<ShareColumn> = p
            .columns
            .into_values()
            .take(env.params.t() as usize)
            .collect();
        let key = match reconstruct_key(&columns, &env.params) {
            Ok(k) if columns.len() as u32 >= env.params.t() => Zeroizing::new(k),
            _ => {
                Self::send(
                    ctx,
                    to,
                    &CommitteeMsg::Denial {
                        request_id: rec.request_id,
                        reason: DenyReason::InsufficientShares,
                    },
                );
                return;
            }
        };
        ctx.charge_n(
            CostOp::Symmetric,
            columns.first().map_or(0, |c| c.chunk_count() as u64),
        );
        // Ephemeral channel to the requester's attested key.
        ctx.charge(CostOp::Sign);
        let Ok(channel) = SecureChannel::establish(self.enclave.identity(), &rec.requester_pk())
        else {
            return;
        };
        ctx.charge(CostOp::Symmetric);
        let sealed_key = channel.seal(&key, &grant_aad(rec.request_id, &rec.capsule, index), rng);
        Self::send(
            ctx,
            to,
            &CommitteeMsg::GrantDelivery {
                request_id: rec.request_id,
                capsule: rec.capsule,
                entry: index,
                leader_cert: env.cert.clone(),
                sealed_key,
            },
        );
        ctx.note(Note::Delivered {
            node: env.id,
            request_id: rec.request_id,
            entry: index,
            capsule: rec.capsule,
        });
    }

    fn process(
        &mut self,
        env: &NodeEnv,
        rng: &mut ChaCha8Rng,
        ctx: &mut Ctx<'_, Note>,
        out: Output,
    ) {
        self.process_inner(env, rng, ctx, out);
        self.refresh(env, rng, ctx);
    }

    fn process_inner(
        &mut self,
        env: &NodeEnv,
        rng: &mut ChaCha8Rng,
        ctx: &mut Ctx<'_, Note>,
        out: Output,
    ) {
        if out.stepped_down {
            self.pending.clear();
        }
        if out.became_leader {
            ctx.note(Note::Leader {
                node: env.id,
                term: self.raft.current_term(),
            });
            // Grants inherited from earlier terms are delivered once they commit.
            let commit = self.raft.commit_index();
            let inherited: Vec<GrantRecord> = self
                .mirror
                .after(commit)
                .filter(|r| r.valid())
                .cloned()
                .collect();
            for rec in inherited {
                self.start_pending(env, ctx, rec, false, true);
            }
        }
        for (to, msg) in out.messages {
            ctx.send(to, msg.encode());
        }
        for entry in out.committed {
            self.apply(env, rng, ctx, entry);
        }
    }

    fn apply(
        &mut self,
        env: &NodeEnv,
        rng: &mut ChaCha8Rng,
        ctx: &mut Ctx<'_, Note>,
        entry: LogEntry,
    ) {
        let rec = self.mirror.get(entry.index).cloned();
        ctx.note(Note::Committed {
            node: env.id,
            index: entry.index,
            term: entry.term,
            digest: Sha256::digest(&entry.command).into(),
            grant: rec.as_ref().map(|r| (r.request_id, r.valid())),
        });
        let applied = self.store.apply(entry.index, rec.as_ref());
        if applied.share_discarded {
            ctx.note(Note::ShareDiscarded {
                node: env.id,
                capsule: rec.as_ref().expect("grant").capsule,
            });
        }
        let Some(rec) = rec else { return };
        if !self.raft.is_leader() {
            return;
        }
        match rec.denial {
            Some(reason) => {
                self.pending.remove(&entry.index);
                Self::send(
                    ctx,
                    rec.reply_to,
                    &CommitteeMsg::Denial {
                        request_id: rec.request_id,
                        reason,
                    },
                );
            }
            None => {
                if let Some(p) = self.pending.get_mut(&entry.index) {
                    p.committed = true;
                    if p.columns.len() as u32 >= env.params.t() || ctx.now() >= p.deadline {
                        self.finish(env, rng, ctx, entry.index);
                    }
                }
            }
        }
    }

    /// Periodic housekeeping. Re-asks for missing shares and times out
    /// stuck grants; shares of capsules past their deadline are dropped.
    fn sweep(&mut self, env: &NodeEnv, rng: &mut ChaCha8Rng, ctx: &mut Ctx<'_, Note>) {
        let now = ctx.now();
        if self.raft.is_leader() {
            let t = env.params.t();
            let stale: Vec<u64> = self
                .pending
                .iter()
                .filter(|(_, p)| {
                    (p.columns.len() as u32) < t
                        && now >= p.last_share_request + env.raft.timeout_max
                })
                .map(|(i, _)| *i)
                .collect();
            for index in stale {
                self.request_shares(env, ctx, index);
            }
            self.refresh(env, rng, ctx);
        }
        // Grace lets in-flight grants stamped before the deadline collect shares.
        let horizon = SimTime(now.0.saturating_sub(env.raft.timeout_max.mul(2).0));
        let commit = self.raft.commit_index();
        let expired: Vec<CapsuleId> = self
            .store
            .capsules
            .iter()
            .filter(|(id, c)| {
                c.share.is_some()
                    && c.status(horizon) == AvailabilityStatus::Expired
                    && !self.mirror.has_valid_after(id, commit)
                    && !self.pending.values().any(|p| p.record.capsule == **id)
            })
            .map(|(id, _)| *id)
            .collect();
        for id in expired {
            if self.store.discard_if_expired(&id, horizon) {
                ctx.note(Note::ShareDiscarded {
                    node: env.id,
                    capsule: id,
                });
            }
        }
    }
}

/// The measurement every committee node runs.
pub fn node_measurement() -> Measurement {
    Measurement::of(NODE_CODE)
}
