//! The actors around the committee: data owners, requesters and the storage server.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use zeroize::Zeroizing;

use crate::cost::CostOp;
use crate::enclave::{
    check_cert, instantiate, open_channel, produce_quote, AttestationCert, AttestationService,
    Enclave, Identity, Measurement, Platform, PublicKey, SecureChannel, TrustAnchors,
};
use crate::policy::{AccessPolicy, CapsuleId};
use crate::shamir::{split_key, SharingParams};
use crate::sim::{ActorId, Ctx};
use crate::storage::{
    decrypt_data, encrypt_data, Capsule, StorageRequest, StorageResponse, StorageServer,
    DATA_KEY_LEN,
};
use crate::time::{SimDuration, SimTime};
use crate::wire::Writer;

use super::msg::{deposit_aad, grant_aad, CommitteeMsg, DenyReason};
use super::Note;

/// Terminal result of one access request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    Granted { plaintext_ok: bool },
    Denied(DenyReason),
    Failed(FailReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailReason {
    InsufficientShares,
    Timeout,
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Granted { plaintext_ok: true } => "granted",
            Self::Granted {
                plaintext_ok: false,
            } => "granted_corrupt",
            Self::Denied(DenyReason::Ineligible) => "denied_ineligible",
            Self::Denied(DenyReason::Expired) => "denied_expired",
            Self::Denied(DenyReason::Unknown) => "denied_unknown",
            Self::Denied(DenyReason::InsufficientShares)
            | Self::Failed(FailReason::InsufficientShares) => "failed_insufficient_shares",
            Self::Denied(DenyReason::Busy) | Self::Failed(FailReason::Timeout) => "failed_timeout",
        }
    }

    pub fn is_granted(&self) -> bool {
        matches!(self, Self::Granted { .. })
    }

    pub fn is_denied(&self) -> bool {
        matches!(self, Self::Denied(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub request_id: u64,
    pub capsule: CapsuleId,
    pub submit_time: SimTime,
    /// When the request left the requester, after attestation.
    pub sent_at: SimTime,
    pub finished_at: SimTime,
    pub outcome: Outcome,
    pub attempts: u32,
}

impl RequestRecord {
    pub fn latency(&self) -> SimDuration {
        self.finished_at.saturating_since(self.sent_at)
    }
}

/// How a requester behaves.
#[derive(Debug, Clone)]
pub struct RequestSpec {
    pub request_id: u64,
    pub capsule: CapsuleId,
    pub code: Vec<u8>,
    pub submit_time: SimTime,
    /// Flip a bit of the certificate signature before sending.
    pub tamper_cert: bool,
    /// SHA-256 of the plaintext the requester expects to recover.
    pub expected_digest: Option<[u8; 32]>,
}

const START: u64 = 0;
const RETRY_BASE: u64 = 1;

pub struct Requester {
    spec: RequestSpec,
    platform: Platform,
    ias: Rc<AttestationService>,
    anchors: TrustAnchors,
    node_measurement: Measurement,
    nodes: u32,
    storage: ActorId,
    retry_after: SimDuration,
    backoff: SimDuration,
    max_attempts: u32,
    rng: ChaCha8Rng,

    enclave: Option<Enclave>,
    cert: Option<AttestationCert>,
    ciphertext: Option<Option<Vec<u8>>>,
    key: Option<Zeroizing<Vec<u8>>>,
    sent_at: SimTime,
    attempts: u32,
    retry_token: u64,
    last_retriable: Option<DenyReason>,
    delivered: BTreeSet<u64>,
    record: Option<RequestRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct RequesterTiming {
    pub retry_after: SimDuration,
    pub backoff: SimDuration,
    pub max_attempts: u32,
}

impl Requester {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: RequestSpec,
        platform: Platform,
        ias: Rc<AttestationService>,
        node_measurement: Measurement,
        nodes: u32,
        storage: ActorId,
        timing: RequesterTiming,
        seed: u64,
    ) -> Self {
        Self {
            anchors: ias.anchors(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ spec.request_id.rotate_left(17)),
            spec,
            platform,
            ias,
            node_measurement,
            nodes,
            storage,
            retry_after: timing.retry_after,
            backoff: timing.backoff,
            max_attempts: timing.max_attempts,
            enclave: None,
            cert: None,
            ciphertext: None,
            key: None,
            sent_at: SimTime::ZERO,
            attempts: 0,
            retry_token: RETRY_BASE,
            last_retriable: None,
            delivered: BTreeSet::new(),
            record: None,
        }
    }

    pub fn spec(&self) -> &RequestSpec {
        &self.spec
    }

    pub fn record(&self) -> Option<&RequestRecord> {
        self.record.as_ref()
    }

    pub fn submit_time(&self) -> SimTime {
        self.spec.submit_time
    }

    fn broadcast(&mut self, ctx: &mut Ctx<'_, Note>) {
        let Some(cert) = self.cert.clone() else {
            return;
        };
        self.attempts += 1;
        let msg = CommitteeMsg::AccessRequest {
            request_id: self.spec.request_id,
            capsule: self.spec.capsule,
            cert,
        }
        .encode();
        for node in 0..self.nodes {
            ctx.send(node, msg.clone());
        }
    }

    fn schedule_retry(&mut self, ctx: &mut Ctx<'_, Note>, after: SimDuration) {
        self.retry_token += 1;
        ctx.set_timer(ctx.elapsed_now() + after, self.retry_token);
    }

    fn finish(&mut self, ctx: &mut Ctx<'_, Note>, outcome: Outcome) {
        if self.record.is_some() {
            return;
        }
        let record = RequestRecord {
            request_id: self.spec.request_id,
            capsule: self.spec.capsule,
            submit_time: self.spec.submit_time,
            sent_at: self.sent_at,
            finished_at: ctx.now(),
            outcome,
            attempts: self.attempts,
        };
        ctx.note(Note::Outcome(record.clone()));
        self.record = Some(record);
        self.key = None;
        self.enclave = None;
    }

    fn try_open(&mut self, ctx: &mut Ctx<'_, Note>) {
        let (Some(key), Some(ct)) = (&self.key, &self.ciphertext) else {
            return;
        };
        let plaintext_ok = match ct {
            Some(ct) => {
                ctx.charge(CostOp::Symmetric);
                match decrypt_data(key, &self.spec.capsule, ct) {
                    Some(pt) => {
                        let pt = Zeroizing::new(pt);
                        self.spec
                            .expected_digest
                            .is_none_or(|d| <[u8; 32]>::from(Sha256::digest(&*pt)) == d)
                    }
                    None => false,
                }
            }
            None => false,
        };
        self.finish(ctx, Outcome::Granted { plaintext_ok });
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Note>, token: u64) {
        if self.record.is_some() {
            return;
        }
        if token == START {
            let Ok(enclave) = instantiate(&self.platform, &self.spec.code, &mut self.rng) else {
                return;
            };
            let Ok(quote) = produce_quote(&enclave, &self.platform) else {
                return;
            };
            ctx.charge(CostOp::IasCall);
            let mut cert = self.ias.ias_verify(&quote, ctx.now());
            if self.spec.tamper_cert {
                cert.ias_sig[0] ^= 1;
            }
            self.enclave = Some(enclave);
            self.cert = Some(cert);
            self.sent_at = ctx.elapsed_now();
            ctx.send(
                self.storage,
                CommitteeMsg::StorageReq(StorageRequest::Retrieve(self.spec.capsule).encode())
                    .encode(),
            );
            self.broadcast(ctx);
            self.schedule_retry(ctx, self.retry_after);
        } else if token == self.retry_token {
            if self.attempts >= self.max_attempts {
                let outcome = match self.last_retriable {
                    Some(DenyReason::InsufficientShares) => {
                        Outcome::Failed(FailReason::InsufficientShares)
                    }
                    _ => Outcome::Failed(FailReason::Timeout),
                };
                self.finish(ctx, outcome);
                return;
            }
            self.broadcast(ctx);
            self.schedule_retry(ctx, self.retry_after);
        }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, from: ActorId, bytes: &[u8]) {
        let Ok(msg) = CommitteeMsg::decode(bytes) else {
            return;
        };
        match msg {
            CommitteeMsg::StorageResp(b) if from == self.storage => {
                self.ciphertext = Some(match StorageResponse::decode(&b) {
                    Ok(StorageResponse::Found(c)) => Some(c.ciphertext),
                    _ => None,
                });
                self.try_open(ctx);
            }
            CommitteeMsg::Denial { request_id, reason } if request_id == self.spec.request_id => {
                if self.record.is_some() || self.key.is_some() {
                    return;
                }
                if reason.is_final() {
                    self.finish(ctx, Outcome::Denied(reason));
                } else {
                    self.last_retriable = Some(reason);
                    self.schedule_retry(ctx, self.backoff);
                }
            }
            CommitteeMsg::GrantDelivery {
                request_id,
                capsule,
                entry,
                leader_cert,
                sealed_key,
            } if request_id == self.spec.request_id && capsule == self.spec.capsule => {
                if !self.delivered.insert(entry) || self.record.is_some() || self.key.is_some() {
                    return;
                }
                let Some(enclave) = &self.enclave else { return };
                ctx.charge_n(CostOp::Verify, leader_cert.verify_ops());
                if !check_cert(&leader_cert, &self.node_measurement, &self.anchors) {
                    return;
                }
                ctx.charge(CostOp::Sign);
                let Ok(channel) = open_channel(enclave, &leader_cert) else {
                    return;
                };
                ctx.charge(CostOp::Symmetric);
                let Ok(key) = channel.open(&sealed_key, &grant_aad(request_id, &capsule, entry))
                else {
                    return;
                };
                self.key = Some(Zeroizing::new(key));
                self.try_open(ctx);
            }
            _ => {}
        }
    }
}

/// One capsule to encapsulate.
#[derive(Debug, Clone)]
pub struct CapsuleSpec {
    pub id: CapsuleId,
    pub policy: AccessPolicy,
    pub data: Vec<u8>,
}

pub struct Owner {
    spec: CapsuleSpec,
    identity: Identity,
    member_pks: Vec<PublicKey>,
    params: SharingParams,
    storage: ActorId,
    deadline: SimDuration,
    rng: ChaCha8Rng,
    acks: BTreeSet<ActorId>,
    stored: bool,
    settled: Option<bool>,
    audit_key: Option<Zeroizing<Vec<u8>>>,
}

const OWNER_DEADLINE: u64 = 1;

impl Owner {
    pub fn new(
        spec: CapsuleSpec,
        member_pks: Vec<PublicKey>,
        params: SharingParams,
        storage: ActorId,
        deadline: SimDuration,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ u64::from_be_bytes(spec.id.0[..8].try_into().unwrap()),
        );
        Self {
            identity: Identity::generate(&mut rng),
            spec,
            member_pks,
            params,
            storage,
            deadline,
            rng,
            acks: BTreeSet::new(),
            stored: false,
            settled: None,
            audit_key: None,
        }
    }

    pub fn capsule_id(&self) -> CapsuleId {
        self.spec.id
    }

    /// The data key, kept by the owner only so audits can search for it.
    pub fn audit_key(&self) -> Option<&[u8]> {
        self.audit_key.as_ref().map(|k| k.as_slice())
    }

    pub fn settled(&self) -> Option<bool> {
        self.settled
    }

    fn settle(&mut self, ctx: &mut Ctx<'_, Note>, ok: bool) {
        if self.settled.is_some() {
            return;
        }
        self.settled = Some(ok);
        if !ok {
            let abort = CommitteeMsg::DepositAbort {
                capsule: self.spec.id,
            }
            .encode();
            for node in 0..self.member_pks.len() as u32 {
                ctx.send(node, abort.clone());
            }
        }
        ctx.note(Note::Encapsulated {
            capsule: self.spec.id,
            ok,
        });
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx<'_, Note>, token: u64) {
        if token == OWNER_DEADLINE {
            if self.settled.is_none() {
                self.settle(ctx, false);
            }
            return;
        }
        let mut key = Zeroizing::new([0u8; DATA_KEY_LEN]);
        self.rng.fill_bytes(key.as_mut());
        ctx.charge(CostOp::Symmetric);
        let ciphertext = encrypt_data(&key, &self.spec.id, &self.spec.data, &mut self.rng);
        let bundle = split_key(key.as_ref(), &self.params, &mut self.rng).expect("non-empty key");
        let capsule = Capsule {
            id: self.spec.id,
            ciphertext,
            policy: self.spec.policy.clone(),
            threshold: self.params.t(),
        };
        ctx.send(
            self.storage,
            CommitteeMsg::StorageReq(StorageRequest::Store(capsule).encode()).encode(),
        );
        for (node, pk) in self.member_pks.iter().enumerate() {
            let column = bundle.column(node as u32 + 1).expect("column per member");
            let mut w = Writer::new();
            self.spec.policy.encode_into(&mut w);
            column.encode_into(&mut w);
            let plain = Zeroizing::new(w.finish());
            ctx.charge(CostOp::Sign);
            let Ok(channel) = SecureChannel::establish(&self.identity, pk) else {
                continue;
            };
            ctx.charge(CostOp::Symmetric);
            let sealed = channel.seal(&plain, &deposit_aad(&self.spec.id), &mut self.rng);
            ctx.send(
                node as u32,
                CommitteeMsg::Deposit {
                    capsule: self.spec.id,
                    owner_pk: self.identity.public_key(),
                    sealed,
                }
                .encode(),
            );
        }
        self.audit_key = Some(Zeroizing::new(key.to_vec()));
        ctx.set_timer(ctx.elapsed_now() + self.deadline, OWNER_DEADLINE);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, from: ActorId, bytes: &[u8]) {
        match CommitteeMsg::decode(bytes) {
            Ok(CommitteeMsg::DepositAck { capsule }) if capsule == self.spec.id => {
                self.acks.insert(from);
            }
            Ok(CommitteeMsg::StorageResp(b)) if from == self.storage => {
                self.stored = matches!(StorageResponse::decode(&b), Ok(StorageResponse::Stored));
                if !self.stored {
                    self.settle(ctx, false);
                }
            }
            _ => return,
        }
        if self.stored && self.acks.len() == self.member_pks.len() {
            self.settle(ctx, true);
        }
    }
}

pub struct StorageActor {
    pub server: StorageServer,
}

impl StorageActor {
    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, from: ActorId, bytes: &[u8]) {
        if let Ok(CommitteeMsg::StorageReq(req)) = CommitteeMsg::decode(bytes) {
            ctx.charge(CostOp::Symmetric);
            let resp = self.server.handle_request(&req);
            ctx.send(from, CommitteeMsg::StorageResp(resp).encode());
        }
    }
}
