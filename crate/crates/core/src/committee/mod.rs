//! The access-control committee and its clients, as simulation actors.
//!
//! Encapsulation: the owner stores the data encrypted under a fresh key,
//! then deposits one share column plus the policy at every node.
//! Access: a requester attests its enclave and broadcasts its certificate;
//! the leader checks it, replicates a grant entry whose acknowledgements
//! carry followers' share columns, and once the entry is committed and `t`
//! columns are in hand it rebuilds the key and sends it over a channel bound
//! to the requester's attested key.

use crate::policy::CapsuleId;
use crate::sim::{Actor, ActorId, Ctx, Lane};
use crate::time::SimTime;

pub mod client;
pub mod msg;
pub mod node;
pub mod store;

pub use client::{
    CapsuleSpec, FailReason, Outcome, Owner, RequestRecord, RequestSpec, Requester,
    RequesterTiming, StorageActor,
};
pub use msg::{CommitteeMsg, DenyReason, GrantCommand};
pub use node::{node_measurement, Node, NodeEnv, NODE_CODE};
pub use store::{CapsuleState, GrantMirror, GrantRecord, NodeSecretStore};

/// Observations recorded during a run; the harness checks invariants on them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Note {
    Leader {
        node: u32,
        term: u64,
    },
    /// `grant` is `(request_id, valid)` for grant entries.
    Committed {
        node: u32,
        index: u64,
        term: u64,
        digest: [u8; 32],
        grant: Option<(u64, bool)>,
    },
    Delivered {
        node: u32,
        request_id: u64,
        entry: u64,
        capsule: CapsuleId,
    },
    ShareDiscarded {
        node: u32,
        capsule: CapsuleId,
    },
    Encapsulated {
        capsule: CapsuleId,
        ok: bool,
    },
    Outcome(RequestRecord),
}

pub enum Agent {
    Node(Box<Node>),
    Storage(StorageActor),
    Owner(Box<Owner>),
    Requester(Box<Requester>),
}

impl Agent {
    pub fn as_node(&self) -> Option<&Node> {
        match self {
            Agent::Node(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_owner(&self) -> Option<&Owner> {
        match self {
            Agent::Owner(o) => Some(o),
            _ => None,
        }
    }

    pub fn as_requester(&self) -> Option<&Requester> {
        match self {
            Agent::Requester(r) => Some(r),
            _ => None,
        }
    }
}

impl Actor for Agent {
    type Note = Note;

    fn lane(&self, msg: &[u8]) -> Lane {
        match msg.first() {
            Some(&msg::TAG_ACCESS_REQUEST) | Some(&msg::TAG_DEPOSIT) => Lane::Worker,
            _ => Lane::Control,
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, from: ActorId, msg: &[u8]) {
        match self {
            Agent::Node(n) => n.on_message(ctx, from, msg),
            Agent::Storage(s) => s.on_message(ctx, from, msg),
            Agent::Owner(o) => o.on_message(ctx, from, msg),
            Agent::Requester(r) => r.on_message(ctx, from, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Note>, token: u64) {
        match self {
            Agent::Node(n) => n.on_timer(ctx),
            Agent::Owner(o) => o.on_timer(ctx, token),
            Agent::Requester(r) => r.on_timer(ctx, token),
            Agent::Storage(_) => {}
        }
    }

    fn on_crash(&mut self, _now: SimTime) {
        if let Agent::Node(n) = self {
            n.on_crash();
        }
    }

    fn on_recover(&mut self, ctx: &mut Ctx<'_, Note>) {
        if let Agent::Node(n) = self {
            n.on_recover(ctx);
        }
    }
}
