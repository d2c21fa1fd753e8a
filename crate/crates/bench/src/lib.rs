//! Criterion benchmarks for the simulator, gradients, and classical kernel live in `benches/`.
