//! Criterion benchmarks for the router and training step; see `benches/`.
