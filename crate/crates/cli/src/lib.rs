//! IO, file formats, and the benchmark runner for the scmflow CLI.

pub mod benchmark;
pub mod dataio;
pub mod plots;

pub use benchmark::{benchmark, BenchmarkOptions, BenchmarkReport, PairRow};
