//! Early warning of intraoperative hypoxemia from pulse-oximetry traces.
//!
//! The crate covers the full pipeline: synthetic SpO2 trace generation
//! ([`trace`]), time-point labeling and windowed feature extraction
//! ([`pipeline`]), several risk predictors from a climatological base rate
//! up to recurrent networks ([`baseline`], [`gbt`], [`neural`], [`model`]),
//! threshold-free evaluation with paired significance tests ([`eval`]),
//! per-minute attribution methods ([`explain`]), portable model artifacts
//! ([`artifact`]), and a line-delimited streaming scorer ([`serve`]).

pub mod artifact;
pub mod baseline;
pub mod eval;
pub mod explain;
pub mod gbt;
pub mod math;
pub mod model;
pub mod neural;
pub mod pipeline;
pub mod serve;
pub mod trace;

pub use model::ModelKind;

pub use trace::SpO2Trace;
