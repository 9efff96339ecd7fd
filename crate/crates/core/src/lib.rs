//! Data capsules whose decryption key is split among a committee of
//! simulated enclaves that enforce an access policy and forget the key once
//! the policy expires.

pub mod committee;
pub mod consensus;
pub mod cost;
pub mod enclave;
pub mod field;
pub mod harness;
pub mod policy;
pub mod scenario;
pub mod selftest;
pub mod shamir;
pub mod sim;
pub mod storage;
pub mod sweep;
pub mod time;
pub mod wire;

pub use committee::{DenyReason, Outcome, RequestRecord};
pub use cost::{sgx_cost_model, CostMeter, CostOp};
pub use enclave::{
    AttestationCert, AttestationService, Enclave, EnclaveError, Measurement, PublicKey,
    SecureChannel, TrustAnchors,
};
pub use field::{Field, FieldElement, MERSENNE_127};
pub use harness::{run, RunMetrics, RunOptions, RunResult};
pub use policy::{AccessPolicy, AvailabilityStatus, CapsuleId, ExpiryCondition, PolicyError};
pub use scenario::{Profile, Scenario, ScenarioParseError};
pub use shamir::{
    reconstruct_key, split_key, KeyShareBundle, Share, ShareColumn, ShareError, SharingParams,
};
pub use storage::{Capsule, StorageServer};
pub use time::{SimDuration, SimTime};
