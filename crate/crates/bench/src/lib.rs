//! Benchmark-only crate; see `benches/scaling.rs` for the GP fit and Kalman
//! smoother timing studies.
