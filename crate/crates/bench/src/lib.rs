//! Criterion benchmarks for the matching, MMD and training-step kernels.
//! See `benches/kernels.rs`.
