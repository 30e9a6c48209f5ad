//! Criterion benchmarks for the mislabel toolkit live in `benches/`.
