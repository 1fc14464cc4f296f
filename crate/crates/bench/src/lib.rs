//! Criterion benchmarks for the attention kernels live in `benches/`.
