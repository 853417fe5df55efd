//! Host crate for the criterion benchmarks in `benches/`. No library code.
