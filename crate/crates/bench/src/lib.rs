//! Criterion benchmarks for the qdnn-core kernels live under `benches/`.
