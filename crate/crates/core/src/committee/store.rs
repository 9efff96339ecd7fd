//! Per-node secrets and the replica's view of grant entries in its log.

use std::collections::BTreeMap;

use crate::consensus::LogEntry;
use crate::enclave::{AttestationCert, PublicKey, TrustAnchors};
use crate::field::Field;
use crate::policy::{
    check_eligibility, AccessLogEntry, AccessPolicy, AvailabilityStatus, CapsuleId,
};
use crate::shamir::ShareColumn;
use crate::time::SimTime;
use crate::wire::{Reader, WireError, Writer};

use super::msg::{DenyReason, GrantCommand};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsuleState {
    pub owner_pk: PublicKey,
    pub policy: AccessPolicy,
    /// Absent once the capsule expired locally.
    pub share: Option<ShareColumn>,
    pub access_log: Vec<AccessLogEntry>,
}

impl CapsuleState {
    pub fn status(&self, now: SimTime) -> AvailabilityStatus {
        self.policy
            .expiry
            .status_for(self.access_log.len() as u64, now)
    }
}

/// Everything a node must keep across crashes besides its consensus state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeSecretStore {
    pub capsules: BTreeMap<CapsuleId, CapsuleState>,
    /// Highest log index applied to the access logs.
    pub applied_index: u64,
}

/// What applying one committed entry did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Applied {
    pub granted: bool,
    pub share_discarded: bool,
}

impl NodeSecretStore {
    pub fn share_count(&self) -> usize {
        self.capsules.values().filter(|c| c.share.is_some()).count()
    }

    /// Drops the share if the capsule is expired at `now`.
    pub fn discard_if_expired(&mut self, capsule: &CapsuleId, now: SimTime) -> bool {
        match self.capsules.get_mut(capsule) {
            Some(c) if c.share.is_some() && c.status(now) == AvailabilityStatus::Expired => {
                c.share = None;
                true
            }
            _ => false,
        }
    }

    /// Applies a committed entry whose grant record is `record` (if any).
    pub fn apply(&mut self, index: u64, record: Option<&GrantRecord>) -> Applied {
        debug_assert!(index > self.applied_index);
        self.applied_index = index;
        let mut applied = Applied::default();
        let Some(rec) = record else { return applied };
        let Some(state) = self.capsules.get_mut(&rec.capsule) else {
            return applied;
        };
        if rec.valid() {
            state.access_log.push(AccessLogEntry {
                capsule_id: rec.capsule,
                cert: rec.cert.clone(),
                grant_time: rec.grant_time,
            });
            applied.granted = true;
        }
        applied.share_discarded = self.discard_if_expired(&rec.capsule, rec.grant_time);
        applied
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.applied_index).u32(self.capsules.len() as u32);
        for (id, c) in &self.capsules {
            w.raw(&id.0).raw(&c.owner_pk.0);
            c.policy.encode_into(&mut w);
            match &c.share {
                Some(col) => {
                    w.u8(1);
                    col.encode_into(&mut w);
                }
                None => {
                    w.u8(0);
                }
            }
            w.u32(c.access_log.len() as u32);
            for e in &c.access_log {
                w.u64(e.grant_time.as_micros()).bytes(&e.cert.encode());
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8], field: &Field) -> Result<Self, WireError> {
        let bad = |_| WireError::Invalid("node store");
        let mut r = Reader::new(bytes);
        let applied_index = r.u64()?;
        let count = r.u32()?;
        let mut capsules = BTreeMap::new();
        for _ in 0..count {
            let id = CapsuleId(r.array()?);
            let owner_pk = PublicKey(r.array()?);
            let policy =
                AccessPolicy::decode_from(&mut r).map_err(|_| WireError::Invalid("policy"))?;
            let share = if r.bool()? {
                Some(ShareColumn::decode_from(&mut r, field).map_err(bad)?)
            } else {
                None
            };
            let entries = r.u32()?;
            let mut access_log = Vec::new();
            for _ in 0..entries {
                let grant_time = SimTime(r.u64()?);
                let cert =
                    AttestationCert::decode(r.bytes()?).map_err(|_| WireError::Invalid("cert"))?;
                access_log.push(AccessLogEntry {
                    capsule_id: id,
                    cert,
                    grant_time,
                });
            }
            capsules.insert(
                id,
                CapsuleState {
                    owner_pk,
                    policy,
                    share,
                    access_log,
                },
            );
        }
        r.finish()?;
        Ok(Self {
            capsules,
            applied_index,
        })
    }
}

/// A grant entry as this replica judged it when it entered the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrantRecord {
    pub index: u64,
    pub term: u64,
    pub capsule: CapsuleId,
    pub cert: AttestationCert,
    pub grant_time: SimTime,
    pub request_id: u64,
    pub reply_to: u32,
    /// `None` when the grant stands.
    pub denial: Option<DenyReason>,
}

impl GrantRecord {
    pub fn valid(&self) -> bool {
        self.denial.is_none()
    }

    pub fn requester_pk(&self) -> PublicKey {
        self.cert.quote.enclave_pk
    }
}

/// Grant entries of the local log, keyed by index.
///
/// A grant's validity depends only on the log prefix before it and the
/// leader-stamped grant time, so every replica reaches the same verdict.
#[derive(Debug, Clone, Default)]
pub struct GrantMirror {
    entries: BTreeMap<u64, GrantRecord>,
}

impl GrantMirror {
    /// Judges and records `entry`. Returns the record for grant entries.
    pub fn record(
        &mut self,
        entry: &LogEntry,
        store: &NodeSecretStore,
        anchors: &TrustAnchors,
    ) -> Option<&GrantRecord> {
        let cmd = GrantCommand::decode(&entry.command)?;
        let denial = match store.capsules.get(&cmd.capsule) {
            None => Some(DenyReason::Unknown),
            Some(c) if !check_eligibility(&c.policy, &cmd.cert, anchors) => {
                Some(DenyReason::Ineligible)
            }
            Some(c) => {
                let prior = self.valid_before(&cmd.capsule, entry.index);
                (c.policy.expiry.status_for(prior, cmd.grant_time) == AvailabilityStatus::Expired)
                    .then_some(DenyReason::Expired)
            }
        };
        let rec = GrantRecord {
            index: entry.index,
            term: entry.term,
            capsule: cmd.capsule,
            cert: cmd.cert,
            grant_time: cmd.grant_time,
            request_id: cmd.request_id,
            reply_to: cmd.reply_to,
            denial,
        };
        self.entries.insert(entry.index, rec);
        self.entries.get(&entry.index)
    }

    pub fn truncate(&mut self, from_index: u64) {
        self.entries.split_off(&from_index);
    }

    pub fn get(&self, index: u64) -> Option<&GrantRecord> {
        self.entries.get(&index)
    }

    pub fn valid_before(&self, capsule: &CapsuleId, index: u64) -> u64 {
        self.entries
            .range(..index)
            .filter(|(_, r)| r.capsule == *capsule && r.valid())
            .count() as u64
    }

    pub fn valid_total(&self, capsule: &CapsuleId) -> u64 {
        self.valid_before(capsule, u64::MAX)
    }

    /// The entry already logged for this requester's enclave, if any.
    pub fn find(&self, capsule: &CapsuleId, requester: &PublicKey) -> Option<&GrantRecord> {
        self.entries
            .values()
            .find(|r| r.capsule == *capsule && r.requester_pk() == *requester)
    }

    pub fn after(&self, index: u64) -> impl Iterator<Item = &GrantRecord> {
        self.entries.range(index + 1..).map(|(_, r)| r)
    }

    pub fn has_valid_after(&self, capsule: &CapsuleId, index: u64) -> bool {
        self.after(index)
            .any(|r| r.capsule == *capsule && r.valid())
    }
}
