//! Access policies: who may open a capsule, and when it stops being openable.
//!
//! Binary encoding is a tag-length-value tree. Each node is
//! `tag(1) ∥ len(4) ∥ value(len)`:
//!
//! | tag  | node            | value                                           |
//! |------|-----------------|-------------------------------------------------|
//! | 0x01 | `MaxAccesses`   | `m` as u64                                      |
//! | 0x02 | `Deadline`      | deadline in simulated µs as u64                 |
//! | 0x03 | `All`           | concatenated child nodes                        |
//! | 0x04 | `Any`           | concatenated child nodes                        |
//! | 0x10 | `AccessPolicy`  | count(4) ∥ count × measurement(32) ∥ expiry node |
//!
//! The text form accepted by [`ExpiryCondition::from_str`] is
//! `max(M)`, `deadline(MS)`, `all(c, ...)` and `any(c, ...)`, where the
//! deadline is given in milliseconds of simulated time.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::enclave::{check_cert, AttestationCert, Measurement, TrustAnchors};
use crate::time::SimTime;
use crate::wire::{Reader, WireError, Writer};

pub const MAX_DEPTH: usize = 16;

const TAG_MAX: u8 = 0x01;
const TAG_DEADLINE: u8 = 0x02;
const TAG_ALL: u8 = 0x03;
const TAG_ANY: u8 = 0x04;
const TAG_POLICY: u8 = 0x10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("MaxAccesses needs m >= 1")]
    ZeroAccesses,
    #[error("combinator has no children")]
    EmptyCombinator,
    #[error("expression deeper than {MAX_DEPTH}")]
    TooDeep,
    #[error("policy lists no eligible measurement")]
    NoEligible,
    #[error("capsule is already expired")]
    NotAvailable,
    #[error("cannot parse policy: {0}")]
    Parse(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// 16-byte capsule identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CapsuleId(pub [u8; 16]);

impl fmt::Debug for CapsuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CapsuleId(")?;
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExpiryCondition {
    MaxAccesses(u64),
    Deadline(SimTime),
    All(Vec<ExpiryCondition>),
    Any(Vec<ExpiryCondition>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvailabilityStatus {
    Available,
    Expired,
}

impl ExpiryCondition {
    pub fn depth(&self) -> usize {
        match self {
            Self::MaxAccesses(_) | Self::Deadline(_) => 1,
            Self::All(c) | Self::Any(c) => 1 + c.iter().map(Self::depth).max().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.depth() > MAX_DEPTH {
            return Err(PolicyError::TooDeep);
        }
        self.validate_nodes()
    }

    fn validate_nodes(&self) -> Result<(), PolicyError> {
        match self {
            Self::MaxAccesses(0) => Err(PolicyError::ZeroAccesses),
            Self::MaxAccesses(_) | Self::Deadline(_) => Ok(()),
            Self::All(c) | Self::Any(c) if c.is_empty() => Err(PolicyError::EmptyCombinator),
            Self::All(c) | Self::Any(c) => c.iter().try_for_each(Self::validate_nodes),
        }
    }

    /// Status after `accesses` committed grants, at time `now`.
    pub fn status_for(&self, accesses: u64, now: SimTime) -> AvailabilityStatus {
        if self.expired(accesses, now) {
            AvailabilityStatus::Expired
        } else {
            AvailabilityStatus::Available
        }
    }

    fn expired(&self, accesses: u64, now: SimTime) -> bool {
        match self {
            Self::MaxAccesses(m) => accesses >= *m,
            Self::Deadline(ts) => now >= *ts,
            Self::All(c) => c.iter().all(|x| x.expired(accesses, now)),
            Self::Any(c) => c.iter().any(|x| x.expired(accesses, now)),
        }
    }

    pub fn encode_into(&self, w: &mut Writer) {
        let mut body = Writer::new();
        let tag = match self {
            Self::MaxAccesses(m) => {
                body.u64(*m);
                TAG_MAX
            }
            Self::Deadline(ts) => {
                body.u64(ts.as_micros());
                TAG_DEADLINE
            }
            Self::All(c) | Self::Any(c) => {
                for child in c {
                    child.encode_into(&mut body);
                }
                if matches!(self, Self::All(_)) {
                    TAG_ALL
                } else {
                    TAG_ANY
                }
            }
        };
        w.u8(tag).bytes(&body.finish());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = Reader::new(bytes);
        let c = Self::decode_from(&mut r, 1)?;
        r.finish()?;
        c.validate()?;
        Ok(c)
    }

    fn decode_from(r: &mut Reader<'_>, depth: usize) -> Result<Self, PolicyError> {
        if depth > MAX_DEPTH {
            return Err(PolicyError::TooDeep);
        }
        let tag = r.u8()?;
        let mut body = Reader::new(r.bytes()?);
        let node = match tag {
            TAG_MAX => Self::MaxAccesses(body.u64()?),
            TAG_DEADLINE => Self::Deadline(SimTime(body.u64()?)),
            TAG_ALL | TAG_ANY => {
                let mut children = Vec::new();
                while body.remaining() > 0 {
                    children.push(Self::decode_from(&mut body, depth + 1)?);
                }
                if tag == TAG_ALL {
                    Self::All(children)
                } else {
                    Self::Any(children)
                }
            }
            tag => {
                return Err(WireError::UnknownTag {
                    what: "expiry condition",
                    tag,
                }
                .into())
            }
        };
        body.finish()?;
        Ok(node)
    }
}

impl fmt::Display for ExpiryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MaxAccesses(m) => write!(f, "max({m})"),
            Self::Deadline(ts) => {
                if ts.0 % 1000 == 0 {
                    write!(f, "deadline({})", ts.0 / 1000)
                } else {
                    write!(f, "deadline({})", ts.as_millis_f64())
                }
            }
            Self::All(c) | Self::Any(c) => {
                f.write_str(if matches!(self, Self::All(_)) {
                    "all("
                } else {
                    "any("
                })?;
                for (i, child) in c.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{child}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl FromStr for ExpiryCondition {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut p = TextParser {
            s: compact.as_bytes(),
            pos: 0,
        };
        let c = p.expr(1)?;
        if p.pos != p.s.len() {
            return Err(p.error("trailing input"));
        }
        c.validate()?;
        Ok(c)
    }
}

struct TextParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl TextParser<'_> {
    fn error(&self, what: &str) -> PolicyError {
        PolicyError::Parse(format!("{what} at offset {}", self.pos))
    }

    fn eat(&mut self, b: u8) -> Result<(), PolicyError> {
        if self.s.get(self.pos) == Some(&b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", b as char)))
        }
    }

    fn word(&mut self) -> &str {
        let start = self.pos;
        while self
            .s
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_alphabetic())
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("")
    }

    fn number(&mut self) -> Result<f64, PolicyError> {
        let start = self.pos;
        while self
            .s
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit() || *b == b'.')
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos])
            .ok()
            .and_then(|t| t.parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| self.error("expected a number"))
    }

    fn expr(&mut self, depth: usize) -> Result<ExpiryCondition, PolicyError> {
        if depth > MAX_DEPTH {
            return Err(PolicyError::TooDeep);
        }
        let name = self.word().to_ascii_lowercase();
        self.eat(b'(')?;
        let node = match name.as_str() {
            "max" => {
                let m = self.number()?;
                if m.fract() != 0.0 {
                    return Err(self.error("max needs an integer"));
                }
                ExpiryCondition::MaxAccesses(m as u64)
            }
            "deadline" => ExpiryCondition::Deadline(SimTime(
                crate::time::SimDuration::from_millis_f64(self.number()?).0,
            )),
            "all" | "any" => {
                let mut children = vec![self.expr(depth + 1)?];
                while self.s.get(self.pos) == Some(&b',') {
                    self.pos += 1;
                    children.push(self.expr(depth + 1)?);
                }
                if name == "all" {
                    ExpiryCondition::All(children)
                } else {
                    ExpiryCondition::Any(children)
                }
            }
            other => return Err(self.error(&format!("unknown condition '{other}'"))),
        };
        self.eat(b')')?;
        Ok(node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPolicy {
    pub eligible_measurements: BTreeSet<Measurement>,
    pub expiry: ExpiryCondition,
}

impl AccessPolicy {
    pub fn new(
        eligible: impl IntoIterator<Item = Measurement>,
        expiry: ExpiryCondition,
    ) -> Result<Self, PolicyError> {
        let policy = Self {
            eligible_measurements: eligible.into_iter().collect(),
            expiry,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.eligible_measurements.is_empty() {
            return Err(PolicyError::NoEligible);
        }
        self.expiry.validate()
    }

    pub fn encode_into(&self, w: &mut Writer) {
        let mut body = Writer::new();
        body.u32(self.eligible_measurements.len() as u32);
        for m in &self.eligible_measurements {
            body.raw(&m.0);
        }
        self.expiry.encode_into(&mut body);
        w.u8(TAG_POLICY).bytes(&body.finish());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = Reader::new(bytes);
        let p = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, PolicyError> {
        let tag = r.u8()?;
        if tag != TAG_POLICY {
            return Err(WireError::UnknownTag {
                what: "policy",
                tag,
            }
            .into());
        }
        let mut body = Reader::new(r.bytes()?);
        let count = body.u32()? as usize;
        let mut eligible = BTreeSet::new();
        for _ in 0..count {
            eligible.insert(Measurement(body.array()?));
        }
        let expiry = ExpiryCondition::decode_from(&mut body, 1)?;
        body.finish()?;
        let policy = Self {
            eligible_measurements: eligible,
            expiry,
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// One granted access, as replicated in a capsule's access log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessLogEntry {
    pub capsule_id: CapsuleId,
    pub cert: AttestationCert,
    pub grant_time: SimTime,
}

pub fn check_eligibility(
    policy: &AccessPolicy,
    cert: &AttestationCert,
    anchors: &TrustAnchors,
) -> bool {
    policy
        .eligible_measurements
        .contains(&cert.quote.measurement)
        && check_cert(cert, &cert.quote.measurement, anchors)
}

pub fn evaluate_expiry(
    condition: &ExpiryCondition,
    log: &[AccessLogEntry],
    now: SimTime,
) -> AvailabilityStatus {
    condition.status_for(log.len() as u64, now)
}

/// Whether one more grant at `now` would expire the capsule.
pub fn would_expire_after_grant(
    condition: &ExpiryCondition,
    log: &[AccessLogEntry],
    now: SimTime,
) -> Result<bool, PolicyError> {
    would_expire_after_count(condition, log.len() as u64, now)
}

pub fn would_expire_after_count(
    condition: &ExpiryCondition,
    accesses: u64,
    now: SimTime,
) -> Result<bool, PolicyError> {
    match condition.status_for(accesses, now) {
        AvailabilityStatus::Expired => Err(PolicyError::NotAvailable),
        AvailabilityStatus::Available => {
            Ok(condition.status_for(accesses + 1, now) == AvailabilityStatus::Expired)
        }
    }
}
