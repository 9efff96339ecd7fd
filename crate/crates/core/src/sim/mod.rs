//! Discrete-event simulation of the committee and its clients.

use std::collections::BTreeSet;

use crate::time::SimTime;

pub mod engine;
pub mod latency;
pub mod raft_check;

pub use engine::{Actor, ActorId, Ctx, Lane, NetStats, Noted, Sim, TraceRecord};
pub use latency::LatencyMatrix;

/// Pending wakeup times for an actor that re-arms after every handler.
/// Only arms a new timer when it is earlier than every one already pending.
#[derive(Debug, Default, Clone)]
pub struct WakeupSet(BTreeSet<SimTime>);

impl WakeupSet {
    pub fn arm<N>(&mut self, ctx: &mut Ctx<'_, N>, at: SimTime, token: u64) {
        if self.0.first().is_none_or(|first| at < *first) {
            self.0.insert(at);
            ctx.set_timer(at, token);
        }
    }

    pub fn fired(&mut self, now: SimTime) {
        self.0.retain(|t| *t > now);
    }

    pub fn clear(&mut self) {
        self.0.clear();
    }
}
