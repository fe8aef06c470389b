//! Criterion benchmarks for gtrans-core; see `benches/`.
