//! Time-point labeling and exclusion rules.

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::trace::SpO2Trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    /// A reading at or below this value counts as hypoxemia.
    pub hypoxemia_threshold: f64,
    /// Minutes of lookahead the label covers.
    pub horizon_minutes: usize,
    /// Points are excluded when a recent reading fell strictly below this.
    pub exclusion_threshold: f64,
    /// How far back the exclusion rule looks.
    pub exclusion_lookback_minutes: usize,
    /// Longer lookahead used only by [`apply_doctor_filter`]: negatives with
    /// hypoxemia inside (horizon, extended_horizon] are dropped.
    pub extended_horizon_minutes: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            hypoxemia_threshold: 92.0,
            horizon_minutes: 5,
            exclusion_threshold: 95.0,
            exclusion_lookback_minutes: 10,
            extended_horizon_minutes: 10,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |field: &'static str, reason: String| Err(PipelineError::Config { field, reason });
        if !(self.hypoxemia_threshold.is_finite() && self.hypoxemia_threshold > 0.0) {
            return err(
                "hypoxemia_threshold",
                format!("{} must be positive", self.hypoxemia_threshold),
            );
        }
        if !(self.exclusion_threshold.is_finite()
            && self.exclusion_threshold > self.hypoxemia_threshold)
        {
            return err(
                "exclusion_threshold",
                format!(
                    "{} must exceed hypoxemia_threshold {}",
                    self.exclusion_threshold, self.hypoxemia_threshold
                ),
            );
        }
        if self.horizon_minutes == 0 {
            return err("horizon_minutes", "must be positive".into());
        }
        if self.exclusion_lookback_minutes == 0 {
            return err("exclusion_lookback_minutes", "must be positive".into());
        }
        if self.extended_horizon_minutes <= self.horizon_minutes {
            return err(
                "extended_horizon_minutes",
                format!(
                    "{} must exceed horizon_minutes {}",
                    self.extended_horizon_minutes, self.horizon_minutes
                ),
            );
        }
        Ok(())
    }
}

/// Labeling decision for one prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledPoint {
    pub minute: usize,
    /// 1 if any observed reading in `(minute, minute + horizon]` is at or
    /// below the hypoxemia threshold.
    pub label: u8,
    /// False if any observed reading in `[minute - lookback, minute]` fell
    /// strictly below the exclusion threshold.
    pub included: bool,
}

/// Labels every minute of `trace` that still has a full horizon of future
/// trace remaining. Missing readings contribute to neither rule; points
/// early in the case evaluate the exclusion over whatever history exists.
pub fn label_timepoints(trace: &SpO2Trace, cfg: &LabelingConfig) -> Vec<LabeledPoint> {
    let duration = trace.duration();
    if duration <= cfg.horizon_minutes {
        return Vec::new();
    }

    // Prefix counts over indicator series make both rules O(1) per point.
    let mut low_prefix = vec![0u32; duration + 1];
    let mut below_excl_prefix = vec![0u32; duration + 1];
    for (m, sample) in trace.samples().iter().enumerate() {
        let low = matches!(sample, Some(v) if *v <= cfg.hypoxemia_threshold);
        let below = matches!(sample, Some(v) if *v < cfg.exclusion_threshold);
        low_prefix[m + 1] = low_prefix[m] + u32::from(low);
        below_excl_prefix[m + 1] = below_excl_prefix[m] + u32::from(below);
    }
    let any_low = |from: usize, to: usize| low_prefix[to + 1] > low_prefix[from];
    let any_below = |from: usize, to: usize| below_excl_prefix[to + 1] > below_excl_prefix[from];

    (0..duration - cfg.horizon_minutes)
        .map(|t| {
            let label = any_low(t + 1, t + cfg.horizon_minutes);
            let lookback_start = t.saturating_sub(cfg.exclusion_lookback_minutes);
            let excluded = any_below(lookback_start, t);
            LabeledPoint {
                minute: t,
                label: u8::from(label),
                included: !excluded,
            }
        })
        .collect()
}

/// Drops negative points that become positive just past the horizon, leaving
/// only clear-cut cases. Positive points always survive.
pub fn apply_doctor_filter(
    points: &[LabeledPoint],
    trace: &SpO2Trace,
    cfg: &LabelingConfig,
) -> Vec<LabeledPoint> {
    points
        .iter()
        .filter(|p| {
            if p.label == 1 {
                return true;
            }
            let from = p.minute + cfg.horizon_minutes + 1;
            let to = p.minute + cfg.extended_horizon_minutes;
            !(from..=to).any(|m| {
                matches!(trace.value_at(m as i64), Some(v) if v <= cfg.hypoxemia_threshold)
            })
        })
        .copied()
        .collect()
}
