//! Desk-scale laboratory for margin-aware preference optimization of
//! conditional diffusion models on synthetic low-dimensional tasks.

pub mod diffusion;
pub mod experiment;
pub mod metrics;
pub mod ndgrad;
pub mod objectives;
pub mod parallel;
pub mod samples;
pub mod tasks;
pub mod train;

pub use samples::SampleSet;
