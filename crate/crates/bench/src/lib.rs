//! Criterion benchmarks for the voxedit kernels; see `benches/kernels.rs`.
