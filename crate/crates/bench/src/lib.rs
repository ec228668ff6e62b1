//! Benchmarks for `pretest-core` live under `benches/`.
