//! Benchmark-only crate; see benches/hot_paths.rs for the hot-path
//! criterion benches (quadrature, capacitance, force, KDE, solver step).
