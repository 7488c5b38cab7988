//! Turning raw traces into labeled, windowed, normalized examples.
//!
//! The stages are deliberately independent pure functions: labeling and the
//! negative-point filter ([`label_timepoints`], [`apply_doctor_filter`]),
//! hour-long window extraction with causal imputation ([`extract_window`]),
//! per-column normalization fit on training windows only
//! ([`NormalizationStats`]), a case-level split ([`split_cases`]), and the
//! class-balanced batch stream the neural trainers consume
//! ([`balanced_batches`]).

mod batch;
mod cache;
mod dataset;
mod label;
mod split;
mod window;

pub use batch::{balanced_batches, BalancedBatches};
pub use cache::{
    load_label_cache, load_norm_stats, read_label_cache, read_norm_stats, save_label_cache,
    save_norm_stats, write_label_cache, write_norm_stats, CachedPoint,
};
pub use dataset::{assemble_examples, build_label_cache, prevalence, raw_windows_for_split};
pub use label::{apply_doctor_filter, label_timepoints, LabeledPoint, LabelingConfig};
pub use split::{split_cases, Split, SplitFractions};
pub use window::{
    apply_normalization, extract_window, fit_normalization, impute_window, invert_normalization,
    NormalizationStats, DEFAULT_FILL_SPO2, WINDOW_WIDTH,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("{0}")]
    InvalidInput(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One prediction-time example: an hour of (imputed) SpO2 readings ending at
/// `minute`, both raw and normalized, with its five-minute-lookahead label.
///
/// `features[0]` is 59 minutes before the prediction time and `features[59]`
/// is the current minute.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedExample {
    pub case_id: String,
    pub minute: usize,
    /// Normalized window, length [`WINDOW_WIDTH`].
    pub features: Vec<f64>,
    /// Imputed but un-normalized window, length [`WINDOW_WIDTH`].
    pub raw_window: Vec<f64>,
    /// 1 if hypoxemia occurs within the label horizon, else 0.
    pub label: u8,
    pub split: Split,
}
