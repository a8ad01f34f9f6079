//! Criterion benchmarks for the roadfuse stages; see `benches/`.
