//! Criterion benchmarks for the sequential and parallel scan evaluators.
//! Run with `cargo bench -p robustgs-bench`.
