//! Criterion benchmarks for the hot paths of `hep-core`; see `benches/`.
