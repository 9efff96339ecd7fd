//! Simulated cost of enclave operations, measured on SGX hardware.
//!
//! Every call site that performs one of these operations charges it to a
//! [`CostMeter`]; the simulator turns the total into processing delay.

use crate::time::SimDuration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostOp {
    /// Public-key signature or key agreement.
    Sign,
    /// Public-key signature verification.
    Verify,
    /// Enclave entry/exit.
    ContextSwitch,
    /// One symmetric cipher or MAC operation.
    Symmetric,
    /// Round trip to the remote attestation service.
    IasCall,
    /// Local (same-host) attestation.
    LocalAttest,
}

pub const SIGN_COST_US: u64 = 450;
pub const VERIFY_COST_US: u64 = 844;
pub const CHEAP_COST_US: u64 = 5;
pub const IAS_CALL_COST_US: u64 = 250_000;

/// Simulated duration of one `op`.
pub fn sgx_cost_model(op: CostOp) -> SimDuration {
    SimDuration::from_micros(match op {
        CostOp::Sign => SIGN_COST_US,
        CostOp::Verify => VERIFY_COST_US,
        CostOp::ContextSwitch | CostOp::Symmetric | CostOp::LocalAttest => CHEAP_COST_US,
        CostOp::IasCall => IAS_CALL_COST_US,
    })
}

/// Accumulates charged operations.
#[derive(Debug, Clone, Default)]
pub struct CostMeter {
    total: SimDuration,
    ias_calls: u64,
    ops: u64,
}

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, op: CostOp) {
        self.charge_n(op, 1);
    }

    pub fn charge_n(&mut self, op: CostOp, count: u64) {
        self.total += sgx_cost_model(op).mul(count);
        self.ops += count;
        if op == CostOp::IasCall {
            self.ias_calls += count;
        }
    }

    pub fn total(&self) -> SimDuration {
        self.total
    }

    pub fn ias_calls(&self) -> u64 {
        self.ias_calls
    }

    pub fn op_count(&self) -> u64 {
        self.ops
    }

    /// Returns the accumulated total and resets the meter.
    pub fn take(&mut self) -> SimDuration {
        let t = self.total;
        *self = Self::default();
        t
    }
}
