//! Criterion benchmarks for the videosaur crate; see `benches/`.
