//! Per-case SpO2 time series: the domain type, a synthetic generator, and
//! the portable trace CSV format.

mod io;
mod synth;

pub use io::{load_traces, read_traces, save_traces, write_traces};
pub use synth::{generate_synthetic_cases, simulate_case, SynthConfig, SynthEvent};

use thiserror::Error;

/// Lowest SpO2 percentage a pulse oximeter reports.
pub const SPO2_MIN: f64 = 50.0;
/// Highest SpO2 percentage a pulse oximeter reports.
pub const SPO2_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid trace: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One surgical case's minute-resolution SpO2 series.
///
/// Minute indices are implicit and gap-free: `samples[m]` is the reading at
/// minute `m`, with `None` marking a minute where the monitor produced no
/// value. Present values always lie in `[SPO2_MIN, SPO2_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpO2Trace {
    case_id: String,
    samples: Vec<Option<f64>>,
}

impl SpO2Trace {
    pub fn new(case_id: impl Into<String>, samples: Vec<Option<f64>>) -> Result<Self, TraceError> {
        let case_id = case_id.into();
        if case_id.is_empty() {
            return Err(TraceError::Validation("empty case id".into()));
        }
        if case_id.contains(',') || case_id.contains('\n') || case_id.contains('\r') {
            return Err(TraceError::Validation(format!(
                "case id {case_id:?} contains a CSV delimiter"
            )));
        }
        for (minute, sample) in samples.iter().enumerate() {
            if let Some(v) = sample {
                if !v.is_finite() || !(SPO2_MIN..=SPO2_MAX).contains(v) {
                    return Err(TraceError::Validation(format!(
                        "case {case_id}, minute {minute}: value {v} outside [{SPO2_MIN}, {SPO2_MAX}]"
                    )));
                }
            }
        }
        Ok(Self { case_id, samples })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    /// Number of minutes covered (present or missing).
    pub fn duration(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[Option<f64>] {
        &self.samples
    }

    /// Reading at `minute`; `None` for missing samples and for minutes
    /// outside the recorded range (including negative ones).
    pub fn value_at(&self, minute: i64) -> Option<f64> {
        if minute < 0 {
            return None;
        }
        self.samples.get(minute as usize).copied().flatten()
    }
}
