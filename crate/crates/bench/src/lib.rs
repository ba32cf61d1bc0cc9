//! Criterion benchmarks for `gpn`; see `benches/`.
