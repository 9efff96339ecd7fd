//! Line-oriented scenario files.
//!
//! ```text
//! # comment
//! nodes 5
//! profile local                 # or gcp
//! timeout 50 150                # election timeout range, ms
//! capsule photos policy=max(1) data=68656c6c6f allow=fn,fn2
//! request 100 fn photos         # at 100 ms, code "fn" asks for "photos"
//! request 120 evil photos tamper
//! crash 300 2                   # node 2 goes down at 300 ms
//! recover 900 2
//! crash-leader 400 200          # whoever leads at 400 ms, down for 200 ms
//! assert granted=1 denied=1
//! ```
//!
//! Times are simulated milliseconds. A capsule's id is the first 16 bytes
//! of SHA-256 over its name. `allow` defaults to `fn`.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::enclave::Measurement;
use crate::policy::{AccessPolicy, CapsuleId, ExpiryCondition};
use crate::sim::LatencyMatrix;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScenarioParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Local,
    Gcp,
}

impl Profile {
    pub fn latency(self) -> LatencyMatrix {
        match self {
            Profile::Local => LatencyMatrix::local(),
            Profile::Gcp => LatencyMatrix::gcp(),
        }
    }

    /// Election timeout range used when a scenario does not set one.
    pub fn default_timeouts(self) -> (SimDuration, SimDuration) {
        match self {
            Profile::Local => (SimDuration::from_millis(50), SimDuration::from_millis(150)),
            Profile::Gcp => (SimDuration::from_millis(150), SimDuration::from_millis(250)),
        }
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "local" => Ok(Profile::Local),
            "gcp" => Ok(Profile::Gcp),
            other => Err(format!("unknown profile {other:?} (expected local or gcp)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Local => "local",
            Profile::Gcp => "gcp",
        })
    }
}

pub fn capsule_id_for(name: &str) -> CapsuleId {
    let d = Sha256::digest(name.as_bytes());
    CapsuleId(d[..16].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioCapsule {
    pub name: String,
    pub id: CapsuleId,
    pub policy: AccessPolicy,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRequest {
    pub at: SimTime,
    pub code: String,
    pub capsule: String,
    pub tamper: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Crash {
        at: SimTime,
        node: u32,
    },
    Recover {
        at: SimTime,
        node: u32,
    },
    /// Crash whichever node leads at `at`, recovering it after `down_for`.
    CrashLeader {
        at: SimTime,
        down_for: SimDuration,
    },
}

impl Fault {
    pub fn at(&self) -> SimTime {
        match self {
            Fault::Crash { at, .. } | Fault::Recover { at, .. } | Fault::CrashLeader { at, .. } => {
                *at
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Expectations {
    pub granted: Option<u64>,
    pub denied: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub nodes: u32,
    pub profile: Profile,
    pub timeouts: Option<(SimDuration, SimDuration)>,
    pub capsules: Vec<ScenarioCapsule>,
    pub requests: Vec<ScenarioRequest>,
    pub faults: Vec<Fault>,
    pub expect: Expectations,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            nodes: 5,
            profile: Profile::Local,
            timeouts: None,
            capsules: Vec::new(),
            requests: Vec::new(),
            faults: Vec::new(),
            expect: Expectations::default(),
        }
    }
}

impl Scenario {
    pub fn timeouts(&self) -> (SimDuration, SimDuration) {
        self.timeouts
            .unwrap_or_else(|| self.profile.default_timeouts())
    }

    pub fn capsule(&self, name: &str) -> Option<&ScenarioCapsule> {
        self.capsules.iter().find(|c| c.name == name)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioParseError> {
        let mut sc = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| ScenarioParseError {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (kw, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let args: Vec<&str> = rest.split_whitespace().collect();
            let want = |n: usize| {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(err(format!(
                        "`{kw}` takes {n} argument(s), got {}",
                        args.len()
                    )))
                }
            };
            match kw {
                "nodes" => {
                    want(1)?;
                    sc.nodes = parse_num(args[0]).map_err(err)?;
                    if sc.nodes == 0 {
                        return Err(err("nodes must be at least 1".into()));
                    }
                }
                "profile" => {
                    want(1)?;
                    sc.profile = args[0].parse().map_err(err)?;
                }
                "timeout" => {
                    want(2)?;
                    let lo: u64 = parse_num(args[0]).map_err(err)?;
                    let hi: u64 = parse_num(args[1]).map_err(err)?;
                    if lo == 0 || lo > hi {
                        return Err(err("timeout needs 0 < MIN <= MAX".into()));
                    }
                    sc.timeouts =
                        Some((SimDuration::from_millis(lo), SimDuration::from_millis(hi)));
                }
                "capsule" => {
                    let c = parse_capsule(rest).map_err(err)?;
                    if sc.capsule(&c.name).is_some() {
                        return Err(err(format!("capsule {:?} defined twice", c.name)));
                    }
                    sc.capsules.push(c);
                }
                "request" => {
                    if !(3..=4).contains(&args.len()) {
                        return Err(err("usage: request T CODE ID [tamper]".into()));
                    }
                    let tamper = match args.get(3) {
                        None => false,
                        Some(&"tamper") => true,
                        Some(other) => return Err(err(format!("unexpected {other:?}"))),
                    };
                    sc.requests.push(ScenarioRequest {
                        at: SimTime::from_millis(parse_num(args[0]).map_err(err)?),
                        code: args[1].to_string(),
                        capsule: args[2].to_string(),
                        tamper,
                    });
                }
                "crash" | "recover" => {
                    want(2)?;
                    let at = SimTime::from_millis(parse_num(args[0]).map_err(err)?);
                    let node: u32 = parse_num(args[1]).map_err(err)?;
                    sc.faults.push(if kw == "crash" {
                        Fault::Crash { at, node }
                    } else {
                        Fault::Recover { at, node }
                    });
                }
                "crash-leader" => {
                    want(2)?;
                    sc.faults.push(Fault::CrashLeader {
                        at: SimTime::from_millis(parse_num(args[0]).map_err(err)?),
                        down_for: SimDuration::from_millis(parse_num(args[1]).map_err(err)?),
                    });
                }
                "assert" => {
                    if args.is_empty() {
                        return Err(err("assert needs granted=N and/or denied=N".into()));
                    }
                    for a in &args {
                        match a.split_once('=') {
                            Some(("granted", v)) => {
                                sc.expect.granted = Some(parse_num(v).map_err(err)?)
                            }
                            Some(("denied", v)) => {
                                sc.expect.denied = Some(parse_num(v).map_err(err)?)
                            }
                            _ => return Err(err(format!("bad assertion {a:?}"))),
                        }
                    }
                }
                other => return Err(err(format!("unknown directive {other:?}"))),
            }
        }
        for (i, f) in sc.faults.iter().enumerate() {
            if let Fault::Crash { node, .. } | Fault::Recover { node, .. } = f {
                if *node >= sc.nodes {
                    return Err(ScenarioParseError {
                        line: 0,
                        message: format!(
                            "fault #{} names node {node}, but there are {} nodes",
                            i + 1,
                            sc.nodes
                        ),
                    });
                }
            }
        }
        Ok(sc)
    }
}

fn parse_num<T: FromStr>(s: &str) -> Result<T, String> {
    s.parse()
        .map_err(|_| format!("{s:?} is not a valid number"))
}

/// `NAME policy=<spec> data=<hex> [allow=a,b]`; the policy may contain spaces.
fn parse_capsule(rest: &str) -> Result<ScenarioCapsule, String> {
    let rest = rest.trim();
    let (name, tail) = rest
        .split_once(char::is_whitespace)
        .ok_or("usage: capsule ID policy=<spec> data=<hex>")?;
    let mut fields: Vec<(&str, String)> = Vec::new();
    for tok in tail.split_whitespace() {
        match tok.split_once('=') {
            Some((k @ ("policy" | "data" | "allow"), v)) => fields.push((k, v.to_string())),
            _ => match fields.last_mut() {
                Some((_, v)) => {
                    v.push(' ');
                    v.push_str(tok);
                }
                None => return Err(format!("unexpected {tok:?}")),
            },
        }
    }
    let get = |k: &str| {
        fields
            .iter()
            .find(|(f, _)| *f == k)
            .map(|(_, v)| v.as_str())
    };
    let expiry: ExpiryCondition = get("policy")
        .ok_or("capsule needs policy=")?
        .parse()
        .map_err(|e| format!("policy: {e}"))?;
    let data = hex_decode(get("data").ok_or("capsule needs data=")?)?;
    if data.is_empty() {
        return Err("capsule data must be non-empty".into());
    }
    let allow = get("allow").unwrap_or("fn");
    let eligible = allow
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|code| Measurement::of(code.as_bytes()));
    let policy = AccessPolicy::new(eligible, expiry).map_err(|e| format!("policy: {e}"))?;
    Ok(ScenarioCapsule {
        name: name.to_string(),
        id: capsule_id_for(name),
        policy,
        data,
    })
}

fn hex_decode(s: &str) -> Result<Vec<u8>, String> {
    if !s.len().is_multiple_of(2) {
        return Err("data must be an even number of hex digits".into());
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| format!("bad hex {:?}", &s[i..i + 2]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = "\
nodes 5
profile local
capsule photos policy=max(1) data=68656c6c6f
request 100 fn photos
request 400 fn photos
assert granted=1 denied=1
";

    #[test]
    fn parses_demo() {
        let sc = Scenario::parse(DEMO).unwrap();
        assert_eq!(sc.nodes, 5);
        assert_eq!(sc.capsules[0].data, b"hello");
        assert_eq!(
            sc.capsules[0].policy.expiry,
            ExpiryCondition::MaxAccesses(1)
        );
        assert!(sc.capsules[0]
            .policy
            .eligible_measurements
            .contains(&Measurement::of(b"fn")));
        assert_eq!(sc.requests.len(), 2);
        assert_eq!(sc.requests[1].at, SimTime::from_millis(400));
        assert_eq!(
            sc.expect,
            Expectations {
                granted: Some(1),
                denied: Some(1)
            }
        );
        assert_eq!(
            sc.timeouts(),
            (SimDuration::from_millis(50), SimDuration::from_millis(150))
        );
    }

    #[test]
    fn policy_with_spaces_and_faults() {
        let sc = Scenario::parse(
            "profile gcp\ncapsule a policy=any(max(2), deadline(900)) data=00 allow=x,y\ncrash 5 1\nrecover 9 1\ncrash-leader 3 50\n",
        )
        .unwrap();
        assert_eq!(sc.capsules[0].policy.eligible_measurements.len(), 2);
        assert_eq!(sc.faults.len(), 3);
        assert_eq!(sc.timeouts().1, SimDuration::from_millis(250));
        assert_eq!(sc.capsules[0].id, capsule_id_for("a"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [
            ("nodes five", 1),
            ("nodes 3\nprofile moon", 2),
            ("\n\ncapsule x policy=max(0) data=00", 3),
            ("capsule x policy=max(1) data=0", 1),
            ("timeout 10 5", 1),
            ("request 1 fn", 1),
            ("bogus 1", 1),
        ] {
            let e = Scenario::parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
        assert!(Scenario::parse("nodes 3\ncrash 1 7").is_err());
    }
}
