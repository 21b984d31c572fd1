//! Sequential vs parallel scan throughput.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::Result;
use crate::rng::SeededRng;
use crate::ssm::{discretize_zoh, scan, DiscreteSsm, ScanDims, ScanMode};

/// Channels used for every benchmark row.
pub const BENCH_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub state: usize,
    pub sequential_ns_per_token: f64,
    pub parallel_ns_per_token: f64,
}

impl BenchRow {
    pub fn parallel_not_slower(&self) -> bool {
        self.parallel_ns_per_token <= self.sequential_ns_per_token
    }
}

/// `(ssm, x, c, d)` of one scan.
pub type ScanProblem = (DiscreteSsm<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

/// A random stable scan problem.
pub fn random_problem(len: usize, channels: usize, state: usize, seed: u64) -> Result<ScanProblem> {
    let mut rng = SeededRng::new(seed);
    let dims = ScanDims {
        len,
        channels,
        state,
    };
    let a: Vec<f64> = (0..channels * state)
        .map(|i| -((i % state) as f64 + 1.0))
        .collect();
    let b: Vec<f64> = (0..len * state).map(|_| rng.normal()).collect();
    let delta: Vec<f64> = (0..len * channels)
        .map(|_| rng.uniform_range(0.001, 0.1))
        .collect();
    let ssm = discretize_zoh(&a, &b, &delta, dims)?;
    let x = (0..len * channels).map(|_| rng.normal()).collect();
    let c = (0..len * state).map(|_| rng.normal()).collect();
    let d = (0..channels).map(|_| rng.normal()).collect();
    Ok((ssm, x, c, d))
}

fn time_mode(
    p: &(DiscreteSsm<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
    mode: ScanMode,
    reps: usize,
) -> Result<f64> {
    let (ssm, x, c, d) = p;
    // One untimed warm-up run.
    std::hint::black_box(scan(ssm, x, c, d, None, mode)?);
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(scan(ssm, x, c, d, None, mode)?);
    }
    Ok(start.elapsed().as_nanos() as f64 / (reps * ssm.dims.len) as f64)
}

/// Times both evaluators on every `(len, state)` pair; rows are ordered by
/// length, then state.
pub fn bench_scan(
    lengths: &[usize],
    states: &[usize],
    min_tokens: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    let mut rows = Vec::new();
    for &len in &lengths {
        for &state in states {
            let p = random_problem(len, BENCH_CHANNELS, state, seed)?;
            let reps = (min_tokens / len).max(1);
            rows.push(BenchRow {
                len,
                state,
                sequential_ns_per_token: time_mode(&p, ScanMode::Sequential, reps)?,
                parallel_ns_per_token: time_mode(&p, ScanMode::Parallel, reps)?,
            });
        }
    }
    Ok(rows)
}

/// The table, plus a note for every long-sequence row where the parallel
/// evaluator lost.
pub fn format_bench(rows: &[BenchRow], threads: usize) -> String {
    let mut out =
        format!("# scan throughput, {BENCH_CHANNELS} channels, {threads} worker thread(s)\n");
    out.push_str("length\tstate\tseq-ns/token\tpar-ns/token\tpar>=seq\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.2}\t{:.2}\t{}",
            r.len,
            r.state,
            r.sequential_ns_per_token,
            r.parallel_ns_per_token,
            if r.parallel_not_slower() { "yes" } else { "no" }
        );
    }
    for r in rows
        .iter()
        .filter(|r| r.len >= 4096 && r.state == 16 && !r.parallel_not_slower())
    {
        let _ = writeln!(
            out,
            "FLAG: parallel scan slower than sequential at length {} state {} on this machine ({threads} thread(s))",
            r.len, r.state
        );
    }
    out
}
