//! Benchmark-only crate; see `benches/tuning.rs`.
