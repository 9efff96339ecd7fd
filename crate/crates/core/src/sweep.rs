//! Throughput and latency sweeps over committee size.
//!
//! Each point submits `requests` concurrent eligible requests for one
//! capsule that never expires during the run. Requests start after a warmup
//! long enough to elect a leader; results are averaged over `runs` seeds.

use crate::enclave::Measurement;
use crate::harness::{run, RunOptions};
use crate::policy::AccessPolicy;
use crate::policy::ExpiryCondition;
use crate::scenario::{capsule_id_for, Profile, Scenario, ScenarioCapsule, ScenarioRequest};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub nodes: Vec<u32>,
    pub profile: Profile,
    pub requests: u32,
    pub runs: u32,
    pub seed: u64,
    pub timeouts: Option<(SimDuration, SimDuration)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub profile: Profile,
    pub nodes: u32,
    pub runs: u32,
    pub requests: u32,
    pub granted: u64,
    pub throughput_rps: f64,
    pub mean_latency_ms: f64,
}

pub fn bench_scenario(
    n: u32,
    profile: Profile,
    requests: u32,
    timeouts: Option<(SimDuration, SimDuration)>,
) -> Scenario {
    let mut sc = Scenario {
        nodes: n,
        profile,
        timeouts,
        ..Scenario::default()
    };
    let (_, tmax) = sc.timeouts();
    let name = "bench";
    sc.capsules.push(ScenarioCapsule {
        name: name.into(),
        id: capsule_id_for(name),
        policy: AccessPolicy::new(
            [Measurement::of(b"fn")],
            ExpiryCondition::MaxAccesses(u64::from(requests) * 10 + 1),
        )
        .expect("valid policy"),
        data: b"benchmark payload".to_vec(),
    });
    let warmup = SimTime(tmax.mul(10).0);
    for _ in 0..requests {
        sc.requests.push(ScenarioRequest {
            at: warmup,
            code: "fn".into(),
            capsule: name.into(),
            tamper: false,
        });
    }
    sc
}

pub fn run_sweep(cfg: &SweepConfig) -> Vec<SweepRow> {
    cfg.nodes
        .iter()
        .map(|&n| {
            let sc = bench_scenario(n, cfg.profile, cfg.requests, cfg.timeouts);
            let (mut tp, mut lat, mut granted) = (0.0, 0.0, 0);
            for i in 0..cfg.runs {
                let r = run(&sc, RunOptions::new(cfg.seed.wrapping_add(u64::from(i))));
                tp += r.metrics.throughput;
                lat += r.metrics.mean_latency_ms;
                granted += r.metrics.granted;
            }
            let runs = f64::from(cfg.runs.max(1));
            SweepRow {
                profile: cfg.profile,
                nodes: n,
                runs: cfg.runs,
                requests: cfg.requests,
                granted,
                throughput_rps: tp / runs,
                mean_latency_ms: lat / runs,
            }
        })
        .collect()
}

/// Throughput must fall and latency rise strictly with committee size.
pub fn check_trends(rows: &[SweepRow]) -> Result<(), String> {
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.throughput_rps >= a.throughput_rps {
            return Err(format!(
                "{}: throughput did not fall from n={} ({:.2}) to n={} ({:.2})",
                a.profile, a.nodes, a.throughput_rps, b.nodes, b.throughput_rps
            ));
        }
        if b.mean_latency_ms <= a.mean_latency_ms {
            return Err(format!(
                "{}: latency did not rise from n={} ({:.3}) to n={} ({:.3})",
                a.profile, a.nodes, a.mean_latency_ms, b.nodes, b.mean_latency_ms
            ));
        }
    }
    Ok(())
}

/// The wide-area profile must be slower than the local one at every size.
pub fn check_profiles(local: &[SweepRow], gcp: &[SweepRow]) -> Result<(), String> {
    for (l, g) in local.iter().zip(gcp) {
        if l.nodes != g.nodes {
            return Err("sweeps cover different sizes".into());
        }
        if g.mean_latency_ms <= l.mean_latency_ms || g.throughput_rps >= l.throughput_rps {
            return Err(format!(
                "n={}: gcp ({:.2} rps, {:.3} ms) not slower than local ({:.2} rps, {:.3} ms)",
                l.nodes, g.throughput_rps, g.mean_latency_ms, l.throughput_rps, l.mean_latency_ms
            ));
        }
    }
    Ok(())
}

pub const SWEEP_CSV_HEADER: &str =
    "profile,nodes,runs,requests,granted,throughput_rps,mean_latency_ms";

pub fn sweep_csv_row(r: &SweepRow) -> String {
    format!(
        "{},{},{},{},{},{:.3},{:.3}",
        r.profile, r.nodes, r.runs, r.requests, r.granted, r.throughput_rps, r.mean_latency_ms
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(nodes: u32, tp: f64, lat: f64) -> SweepRow {
        SweepRow {
            profile: Profile::Local,
            nodes,
            runs: 1,
            requests: 1,
            granted: 1,
            throughput_rps: tp,
            mean_latency_ms: lat,
        }
    }

    #[test]
    fn trend_checker_is_strict() {
        assert!(check_trends(&[row(5, 10.0, 1.0), row(9, 9.0, 2.0)]).is_ok());
        assert!(check_trends(&[row(5, 10.0, 1.0), row(9, 10.0, 2.0)]).is_err());
        assert!(check_trends(&[row(5, 10.0, 2.0), row(9, 9.0, 2.0)]).is_err());
    }

    #[test]
    fn small_sweep_serves_everything() {
        let cfg = SweepConfig {
            nodes: vec![3, 5],
            profile: Profile::Local,
            requests: 20,
            runs: 1,
            seed: 1,
            timeouts: None,
        };
        let rows = run_sweep(&cfg);
        assert!(rows.iter().all(|r| r.granted == 20), "{rows:?}");
    }
}
