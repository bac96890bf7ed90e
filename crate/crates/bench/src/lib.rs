//! Criterion benchmarks for the metric, backbone and sampling hot paths;
//! see `benches/kernels.rs`.
