//! Criterion benchmarks for the forward pass, backward pass and a full
//! training step at desk scale. Run with `cargo bench -p polylm-bench`.
