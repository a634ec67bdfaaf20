//! Criterion benchmarks for the registration kernels; see `benches/kernels.rs`.
