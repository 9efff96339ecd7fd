//! Committee protocol messages.
//!
//! They share the framing of the consensus messages: one tag byte, then
//! fixed-width big-endian integers and `len(4) ∥ bytes` fields. Consensus
//! uses tags below 0x10.
//!
//! | tag  | message            | body                                                          |
//! |------|--------------------|---------------------------------------------------------------|
//! | 0x10 | `Deposit`          | capsule(16) ∥ owner_pk(32) ∥ bytes(sealed policy ∥ column)   |
//! | 0x11 | `DepositAck`       | capsule(16)                                                   |
//! | 0x12 | `DepositAbort`     | capsule(16)                                                   |
//! | 0x13 | `AccessRequest`    | request_id(8) ∥ capsule(16) ∥ bytes(cert)                     |
//! | 0x14 | `GrantDelivery`    | request_id(8) ∥ capsule(16) ∥ entry(8) ∥ bytes(cert) ∥ bytes(sealed key) |
//! | 0x15 | `Denial`           | request_id(8) ∥ reason(1)                                     |
//! | 0x16 | `LeaderHint`       | request_id(8) ∥ flag(1) [∥ leader(4)]                         |
//! | 0x17 | `ShareRequest`     | term(8) ∥ entry(8)                                            |
//! | 0x18 | `ShareReply`       | term(8) ∥ entry(8) ∥ bytes(sealed column)                     |
//! | 0x20 | `StorageReq`       | bytes(storage request)                                        |
//! | 0x21 | `StorageResp`      | bytes(storage response)                                       |
//!
//! A grant log command is `0x01 ∥ capsule(16) ∥ grant_time(8) ∥
//! request_id(8) ∥ reply_to(4) ∥ bytes(cert)`; the empty command is a no-op.

use crate::enclave::{AttestationCert, EnclaveError, PublicKey};
use crate::policy::CapsuleId;
use crate::time::SimTime;
use crate::wire::{Reader, WireError, Writer};

pub const TAG_DEPOSIT: u8 = 0x10;
pub const TAG_DEPOSIT_ACK: u8 = 0x11;
pub const TAG_DEPOSIT_ABORT: u8 = 0x12;
pub const TAG_ACCESS_REQUEST: u8 = 0x13;
pub const TAG_GRANT_DELIVERY: u8 = 0x14;
pub const TAG_DENIAL: u8 = 0x15;
pub const TAG_LEADER_HINT: u8 = 0x16;
pub const TAG_SHARE_REQUEST: u8 = 0x17;
pub const TAG_SHARE_REPLY: u8 = 0x18;
pub const TAG_STORAGE_REQ: u8 = 0x20;
pub const TAG_STORAGE_RESP: u8 = 0x21;

const TAG_GRANT_COMMAND: u8 = 0x01;

/// Why a request was not served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DenyReason {
    Ineligible,
    Expired,
    Unknown,
    /// Fewer than `t` share columns arrived before the deadline. Retriable.
    InsufficientShares,
    /// Available only if in-flight grants fail. Retriable.
    Busy,
}

impl DenyReason {
    fn code(self) -> u8 {
        match self {
            Self::Ineligible => 1,
            Self::Expired => 2,
            Self::Unknown => 3,
            Self::InsufficientShares => 4,
            Self::Busy => 5,
        }
    }

    fn from_code(code: u8) -> Result<Self, WireError> {
        Ok(match code {
            1 => Self::Ineligible,
            2 => Self::Expired,
            3 => Self::Unknown,
            4 => Self::InsufficientShares,
            5 => Self::Busy,
            tag => {
                return Err(WireError::UnknownTag {
                    what: "deny reason",
                    tag,
                })
            }
        })
    }

    pub fn is_final(self) -> bool {
        matches!(self, Self::Ineligible | Self::Expired | Self::Unknown)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitteeMsg {
    Deposit {
        capsule: CapsuleId,
        owner_pk: PublicKey,
        sealed: Vec<u8>,
    },
    DepositAck {
        capsule: CapsuleId,
    },
    DepositAbort {
        capsule: CapsuleId,
    },
    AccessRequest {
        request_id: u64,
        capsule: CapsuleId,
        cert: AttestationCert,
    },
    GrantDelivery {
        request_id: u64,
        capsule: CapsuleId,
        entry: u64,
        leader_cert: AttestationCert,
        sealed_key: Vec<u8>,
    },
    Denial {
        request_id: u64,
        reason: DenyReason,
    },
    LeaderHint {
        request_id: u64,
        leader: Option<u32>,
    },
    ShareRequest {
        term: u64,
        entry: u64,
    },
    ShareReply {
        term: u64,
        entry: u64,
        sealed: Vec<u8>,
    },
    StorageReq(Vec<u8>),
    StorageResp(Vec<u8>),
}

impl CommitteeMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Self::Deposit {
                capsule,
                owner_pk,
                sealed,
            } => {
                w.u8(TAG_DEPOSIT)
                    .raw(&capsule.0)
                    .raw(&owner_pk.0)
                    .bytes(sealed);
            }
            Self::DepositAck { capsule } => {
                w.u8(TAG_DEPOSIT_ACK).raw(&capsule.0);
            }
            Self::DepositAbort { capsule } => {
                w.u8(TAG_DEPOSIT_ABORT).raw(&capsule.0);
            }
            Self::AccessRequest {
                request_id,
                capsule,
                cert,
            } => {
                w.u8(TAG_ACCESS_REQUEST)
                    .u64(*request_id)
                    .raw(&capsule.0)
                    .bytes(&cert.encode());
            }
            Self::GrantDelivery {
                request_id,
                capsule,
                entry,
                leader_cert,
                sealed_key,
            } => {
                w.u8(TAG_GRANT_DELIVERY)
                    .u64(*request_id)
                    .raw(&capsule.0)
                    .u64(*entry)
                    .bytes(&leader_cert.encode())
                    .bytes(sealed_key);
            }
            Self::Denial { request_id, reason } => {
                w.u8(TAG_DENIAL).u64(*request_id).u8(reason.code());
            }
            Self::LeaderHint { request_id, leader } => {
                w.u8(TAG_LEADER_HINT).u64(*request_id);
                match leader {
                    Some(l) => w.u8(1).u32(*l),
                    None => w.u8(0),
                };
            }
            Self::ShareRequest { term, entry } => {
                w.u8(TAG_SHARE_REQUEST).u64(*term).u64(*entry);
            }
            Self::ShareReply {
                term,
                entry,
                sealed,
            } => {
                w.u8(TAG_SHARE_REPLY).u64(*term).u64(*entry).bytes(sealed);
            }
            Self::StorageReq(b) => {
                w.u8(TAG_STORAGE_REQ).bytes(b);
            }
            Self::StorageResp(b) => {
                w.u8(TAG_STORAGE_RESP).bytes(b);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let mut r = Reader::new(bytes);
        let msg = match r.u8()? {
            TAG_DEPOSIT => Self::Deposit {
                capsule: CapsuleId(r.array()?),
                owner_pk: PublicKey(r.array()?),
                sealed: r.bytes()?.to_vec(),
            },
            TAG_DEPOSIT_ACK => Self::DepositAck {
                capsule: CapsuleId(r.array()?),
            },
            TAG_DEPOSIT_ABORT => Self::DepositAbort {
                capsule: CapsuleId(r.array()?),
            },
            TAG_ACCESS_REQUEST => Self::AccessRequest {
                request_id: r.u64()?,
                capsule: CapsuleId(r.array()?),
                cert: AttestationCert::decode(r.bytes()?)?,
            },
            TAG_GRANT_DELIVERY => Self::GrantDelivery {
                request_id: r.u64()?,
                capsule: CapsuleId(r.array()?),
                entry: r.u64()?,
                leader_cert: AttestationCert::decode(r.bytes()?)?,
                sealed_key: r.bytes()?.to_vec(),
            },
            TAG_DENIAL => Self::Denial {
                request_id: r.u64()?,
                reason: DenyReason::from_code(r.u8()?)?,
            },
            TAG_LEADER_HINT => {
                let request_id = r.u64()?;
                let leader = if r.bool()? { Some(r.u32()?) } else { None };
                Self::LeaderHint { request_id, leader }
            }
            TAG_SHARE_REQUEST => Self::ShareRequest {
                term: r.u64()?,
                entry: r.u64()?,
            },
            TAG_SHARE_REPLY => Self::ShareReply {
                term: r.u64()?,
                entry: r.u64()?,
                sealed: r.bytes()?.to_vec(),
            },
            TAG_STORAGE_REQ => Self::StorageReq(r.bytes()?.to_vec()),
            TAG_STORAGE_RESP => Self::StorageResp(r.bytes()?.to_vec()),
            tag => {
                return Err(WireError::UnknownTag {
                    what: "committee message",
                    tag,
                }
                .into())
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

/// A replicated access-log command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrantCommand {
    pub capsule: CapsuleId,
    /// Leader-stamped time; every replica evaluates expiry at this instant.
    pub grant_time: SimTime,
    pub request_id: u64,
    pub reply_to: u32,
    pub cert: AttestationCert,
}

impl GrantCommand {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(TAG_GRANT_COMMAND)
            .raw(&self.capsule.0)
            .u64(self.grant_time.as_micros())
            .u64(self.request_id)
            .u32(self.reply_to)
            .bytes(&self.cert.encode());
        w.finish()
    }

    /// `None` for the no-op and for anything that is not a grant.
    pub fn decode(command: &[u8]) -> Option<Self> {
        let mut r = Reader::new(command);
        if r.u8().ok()? != TAG_GRANT_COMMAND {
            return None;
        }
        let cmd = Self {
            capsule: CapsuleId(r.array().ok()?),
            grant_time: SimTime(r.u64().ok()?),
            request_id: r.u64().ok()?,
            reply_to: r.u32().ok()?,
            cert: AttestationCert::decode(r.bytes().ok()?).ok()?,
        };
        r.finish().ok()?;
        Some(cmd)
    }
}

/// Associated data binding a share column to one log entry.
pub fn share_aad(term: u64, entry: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"share").u64(term).u64(entry);
    w.finish()
}

/// Associated data binding a delivered key to one request.
pub fn grant_aad(request_id: u64, capsule: &CapsuleId, entry: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"grant").u64(request_id).raw(&capsule.0).u64(entry);
    w.finish()
}

pub fn deposit_aad(capsule: &CapsuleId) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"deposit").raw(&capsule.0);
    w.finish()
}
