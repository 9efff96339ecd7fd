use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use capsule_core::harness::{expectations_hold, metrics_csv, run, summary_line, RunOptions};
use capsule_core::scenario::{Profile, Scenario};
use capsule_core::selftest::{self, SelftestOptions};
use capsule_core::sim::TraceRecord;
use capsule_core::sweep::{check_profiles, check_trends, run_sweep, sweep_csv_row, SweepConfig, SWEEP_CSV_HEADER};
use capsule_core::time::SimDuration;
use clap::{Parser, Subcommand};

/// Exit code for unreadable or malformed input.
const EXIT_BAD_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "capsule", version, about = "Simulate a committee of enclaves guarding self-expiring data capsules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file and print per-request metrics as CSV.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = "CAPSULE_SEED", default_value_t = 1)]
        seed: u64,
        /// Write the full event trace to this CSV file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the metrics CSV here instead of stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Sweep committee sizes and check that larger committees are slower.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "5,9,17,33")]
        nodes: Vec<u32>,
        /// local, gcp, or both (both also checks gcp is slower than local).
        #[arg(long, default_value = "local")]
        profile: String,
        /// Concurrent requests per run.
        #[arg(long, default_value_t = 200)]
        requests: u32,
        #[arg(long, env = "CAPSULE_SEED", default_value_t = 1)]
        seed: u64,
        /// Independent runs averaged per committee size.
        #[arg(long, default_value_t = 5)]
        runs: u32,
        /// Election timeout range in ms; defaults to 50..150 local, 150..250 gcp.
        #[arg(long)]
        timeout_min: Option<u64>,
        #[arg(long)]
        timeout_max: Option<u64>,
    },
    /// Run the built-in self checks.
    Selftest {
        #[arg(long, default_value_t = 50)]
        seeds: u64,
        /// Corrupt one share before every reconstruction; the sharing suite must fail.
        #[arg(long, hide = true)]
        corrupt_shares: bool,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, seed, trace, metrics } => cmd_run(scenario, seed, trace, metrics),
        Command::Bench { nodes, profile, requests, seed, runs, timeout_min, timeout_max } => {
            cmd_bench(nodes, &profile, requests, seed, runs, timeout_min, timeout_max)
        }
        Command::Selftest { seeds, corrupt_shares } => cmd_selftest(seeds, corrupt_shares),
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const TRACE_CSV_HEADER: &str = "kind,time_us,arrive_us,from,to,tag,len";

fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut out = format!("{TRACE_CSV_HEADER}\n");
    for t in trace {
        let line = match t {
            TraceRecord::Message { depart, arrive, from, to, bytes } => format!(
                "message,{},{},{from},{to},{},{}",
                depart.as_micros(),
                arrive.as_micros(),
                bytes.first().map_or(String::new(), |b| format!("0x{b:02x}")),
                bytes.len()
            ),
            TraceRecord::Dropped { time, from, to, sender_crashed } => format!(
                "{},{},,{from},{to},,",
                if *sender_crashed { "dropped_sender_down" } else { "dropped_receiver_down" },
                time.as_micros()
            ),
            TraceRecord::Crash { time, actor } => format!("crash,{},,{actor},,,", time.as_micros()),
            TraceRecord::Recover { time, actor } => format!("recover,{},,{actor},,,", time.as_micros()),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn cmd_run(path: PathBuf, seed: u64, trace: Option<PathBuf>, metrics: Option<PathBuf>) -> ExitCode {
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_BAD_INPUT, format!("cannot read {}: {e}", path.display())),
    };
    let sc = match Scenario::parse(&text) {
        Ok(sc) => sc,
        Err(e) => return fail(EXIT_BAD_INPUT, format!("{}: {e}", path.display())),
    };
    let opts = if trace.is_some() { RunOptions::traced(seed) } else { RunOptions::new(seed) };
    let result = run(&sc, opts);
    let csv = metrics_csv(&result.metrics);
    match &metrics {
        Some(p) => {
            if let Err(e) = fs::write(p, &csv) {
                return fail(1, format!("cannot write {}: {e}", p.display()));
            }
        }
        None => print!("{csv}"),
    }
    if let Some(p) = &trace {
        if let Err(e) = fs::write(p, trace_csv(&result.trace)) {
            return fail(1, format!("cannot write {}: {e}", p.display()));
        }
    }
    eprintln!("{}", summary_line(&result.metrics));
    eprintln!("trace_digest {}", hex(&result.trace_digest));
    if !result.checks.clean() {
        return fail(1, format!("invariant check failed: {:?}", result.checks));
    }
    match expectations_hold(&sc, &result.metrics) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(1, format!("assertion failed: {e}")),
    }
}

fn cmd_bench(
    nodes: Vec<u32>,
    profile: &str,
    requests: u32,
    seed: u64,
    runs: u32,
    timeout_min: Option<u64>,
    timeout_max: Option<u64>,
) -> ExitCode {
    if let Some(bad) = nodes.iter().find(|&&n| n == 0 || n % 2 == 0) {
        return fail(EXIT_BAD_INPUT, format!("committee sizes must be odd and at least 1, got {bad}"));
    }
    if requests == 0 || runs == 0 {
        return fail(EXIT_BAD_INPUT, "--requests and --runs must be positive");
    }
    let profiles: Vec<Profile> = match profile {
        "both" => vec![Profile::Local, Profile::Gcp],
        p => match p.parse() {
            Ok(p) => vec![p],
            Err(e) => return fail(EXIT_BAD_INPUT, e),
        },
    };
    let timeouts = match (timeout_min, timeout_max) {
        (None, None) => None,
        (Some(lo), Some(hi)) if 0 < lo && lo <= hi => Some((SimDuration::from_millis(lo), SimDuration::from_millis(hi))),
        _ => return fail(EXIT_BAD_INPUT, "--timeout-min and --timeout-max go together, with 0 < min <= max"),
    };
    println!("{SWEEP_CSV_HEADER}");
    let mut problems = Vec::new();
    let mut sweeps = Vec::new();
    for profile in profiles {
        let cfg = SweepConfig { nodes: nodes.clone(), profile, requests, runs, seed, timeouts };
        let rows = run_sweep(&cfg);
        for r in &rows {
            println!("{}", sweep_csv_row(r));
            let want = u64::from(requests) * u64::from(runs);
            if r.granted != want {
                problems.push(format!("{profile} n={}: {} of {want} requests granted", r.nodes, r.granted));
            }
        }
        if let Err(e) = check_trends(&rows) {
            problems.push(e);
        }
        sweeps.push(rows);
    }
    if let [local, gcp] = sweeps.as_slice() {
        if let Err(e) = check_profiles(local, gcp) {
            problems.push(e);
        }
    }
    if problems.is_empty() {
        ExitCode::SUCCESS
    } else {
        fail(1, problems.join("; "))
    }
}

fn cmd_selftest(seeds: u64, corrupt_shares: bool) -> ExitCode {
    let reports = selftest::run_all(SelftestOptions { corrupt_shares, consensus_seeds: seeds });
    for r in &reports {
        println!("{}", r.line());
    }
    if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
