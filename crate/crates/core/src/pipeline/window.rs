//! Window extraction, causal imputation, and per-column normalization.

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::trace::SpO2Trace;

/// Minutes of history in every feature window.
pub const WINDOW_WIDTH: usize = 60;

/// Fill value for a window with no observations at all: a typical normal
/// SpO2 reading.
pub const DEFAULT_FILL_SPO2: f64 = 97.0;

/// Resolves missing slots causally: each gap takes the last observed value,
/// a leading gap takes the first observed value, and a window with no
/// observations at all is filled with [`DEFAULT_FILL_SPO2`].
pub fn impute_window(slots: &[Option<f64>]) -> Vec<f64> {
    let first_observed = slots
        .iter()
        .flatten()
        .next()
        .copied()
        .unwrap_or(DEFAULT_FILL_SPO2);
    let mut last = first_observed;
    slots
        .iter()
        .map(|slot| {
            if let Some(v) = slot {
                last = *v;
            }
            last
        })
        .collect()
}

/// The `width` readings ending at minute `t` (inclusive), imputed so the
/// result has no gaps. Minutes before the start of the case count as
/// missing.
pub fn extract_window(trace: &SpO2Trace, t: usize, width: usize) -> Vec<f64> {
    let slots: Vec<Option<f64>> = (0..width)
        .map(|i| trace.value_at(t as i64 - (width as i64 - 1) + i as i64))
        .collect();
    impute_window(&slots)
}

/// Per-column mean and population standard deviation of the training
/// windows, with a degeneracy guard for constant columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(means: Vec<f64>, stds: Vec<f64>) -> Result<Self, PipelineError> {
        if means.len() != stds.len() {
            return Err(PipelineError::InvalidInput(format!(
                "{} means but {} stds",
                means.len(),
                stds.len()
            )));
        }
        if let Some(s) = stds.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(PipelineError::InvalidInput(format!(
                "non-positive std {s} in normalization stats"
            )));
        }
        Ok(Self { means, stds })
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }
}

/// Fits normalization statistics over training windows only (single Welford
/// pass per column; population variance).
pub fn fit_normalization(windows: &[Vec<f64>]) -> Result<NormalizationStats, PipelineError> {
    if windows.len() < 2 {
        return Err(PipelineError::InvalidInput(format!(
            "need at least 2 windows to fit normalization, got {}",
            windows.len()
        )));
    }
    let width = windows[0].len();
    let mut means = vec![0.0; width];
    let mut m2 = vec![0.0; width];
    for (i, window) in windows.iter().enumerate() {
        if window.len() != width {
            return Err(PipelineError::InvalidInput(format!(
                "window {i} has length {}, expected {width}",
                window.len()
            )));
        }
        let n = (i + 1) as f64;
        for (c, x) in window.iter().enumerate() {
            let delta = x - means[c];
            means[c] += delta / n;
            m2[c] += delta * (x - means[c]);
        }
    }
    let n = windows.len() as f64;
    let stds = m2
        .iter()
        .map(|m2c| {
            let std = (m2c / n).sqrt();
            if std < 1e-9 {
                1.0
            } else {
                std
            }
        })
        .collect();
    NormalizationStats::new(means, stds)
}

/// `(x - mean) / std`, column by column.
pub fn apply_normalization(
    window: &[f64],
    stats: &NormalizationStats,
) -> Result<Vec<f64>, PipelineError> {
    if window.len() != stats.width() {
        return Err(PipelineError::InvalidInput(format!(
            "window length {} does not match stats width {}",
            window.len(),
            stats.width()
        )));
    }
    Ok(window
        .iter()
        .zip(stats.means.iter().zip(&stats.stds))
        .map(|(x, (m, s))| (x - m) / s)
        .collect())
}

/// Exact inverse of [`apply_normalization`].
pub fn invert_normalization(
    features: &[f64],
    stats: &NormalizationStats,
) -> Result<Vec<f64>, PipelineError> {
    if features.len() != stats.width() {
        return Err(PipelineError::InvalidInput(format!(
            "feature length {} does not match stats width {}",
            features.len(),
            stats.width()
        )));
    }
    Ok(features
        .iter()
        .zip(stats.means.iter().zip(&stats.stds))
        .map(|(z, (m, s))| z * s + m)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_synthetic_cases, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fully_observed_window_passes_through() {
        let values: Vec<Option<f64>> = (0..70).map(|i| Some(95.0 + (i % 5) as f64)).collect();
        let trace = SpO2Trace::new("t", values.clone()).unwrap();
        let window = extract_window(&trace, 64, WINDOW_WIDTH);
        let expected: Vec<f64> = (5..=64).map(|i| values[i].unwrap()).collect();
        assert_eq!(window, expected);
    }

    #[test]
    fn gaps_carry_the_last_observation_forward() {
        assert_eq!(
            impute_window(&[Some(98.0), None, Some(96.0)]),
            vec![98.0, 98.0, 96.0]
        );
        // Leading gap takes the first observed value.
        assert_eq!(
            impute_window(&[None, None, Some(95.5), None]),
            vec![95.5, 95.5, 95.5, 95.5]
        );
        // No observations at all: neutral fill.
        assert_eq!(impute_window(&[None; 3]), vec![DEFAULT_FILL_SPO2; 3]);
    }

    #[test]
    fn early_minutes_backfill_from_first_observation() {
        let trace = SpO2Trace::new("t", vec![Some(93.0), Some(94.0), Some(95.0)]).unwrap();
        let window = extract_window(&trace, 2, 5);
        assert_eq!(window, vec![93.0, 93.0, 93.0, 94.0, 95.0]);
    }

    #[test]
    fn identical_windows_hit_the_degeneracy_guard() {
        let windows = vec![vec![97.0, 96.0]; 4];
        let stats = fit_normalization(&windows).unwrap();
        assert_eq!(stats.means(), &[97.0, 96.0]);
        assert_eq!(stats.stds(), &[1.0, 1.0]);
        assert_eq!(
            apply_normalization(&windows[0], &stats).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn normalized_training_columns_have_zero_mean_unit_variance() {
        let traces = generate_synthetic_cases(&SynthConfig {
            n_cases: 8,
            duration_minutes: (120, 160),
            ..SynthConfig::default()
        })
        .unwrap();
        let mut windows = Vec::new();
        for trace in &traces {
            for t in (WINDOW_WIDTH - 1..trace.duration()).step_by(7) {
                windows.push(extract_window(trace, t, WINDOW_WIDTH));
            }
        }
        let stats = fit_normalization(&windows).unwrap();
        let normalized: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| apply_normalization(w, &stats).unwrap())
            .collect();
        let n = normalized.len() as f64;
        for c in 0..WINDOW_WIDTH {
            let mean: f64 = normalized.iter().map(|w| w[c]).sum::<f64>() / n;
            let var: f64 = normalized.iter().map(|w| w[c] * w[c]).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "column {c} mean {mean}");
            if stats.stds()[c] != 1.0 {
                assert!((var - 1.0).abs() < 1e-6, "column {c} variance {var}");
            }
        }
    }

    #[test]
    fn welford_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let windows: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..12).map(|_| rng.gen_range(80.0..100.0)).collect())
            .collect();
        let stats = fit_normalization(&windows).unwrap();

        let n = windows.len() as f64;
        for c in 0..12 {
            let mean: f64 = windows.iter().map(|w| w[c]).sum::<f64>() / n;
            let var: f64 = windows.iter().map(|w| (w[c] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            assert!(((stats.means()[c] - mean) / mean).abs() < 1e-12);
            assert!(((stats.stds()[c] - std) / std).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let windows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..WINDOW_WIDTH).map(|_| rng.gen_range(50.0..100.0)).collect())
            .collect();
        let stats = fit_normalization(&windows).unwrap();
        for w in &windows {
            let z = apply_normalization(w, &stats).unwrap();
            let back = invert_normalization(&z, &stats).unwrap();
            for (a, b) in w.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fitting_with_extra_windows_changes_stats() {
        // Leakage tripwire: statistics must come from the training set only,
        // so adding held-out windows has to move them.
        let train = vec![vec![97.0, 98.0], vec![96.0, 97.0], vec![95.0, 96.0]];
        let mut leaky = train.clone();
        leaky.push(vec![70.0, 70.0]);
        assert_ne!(
            fit_normalization(&train).unwrap(),
            fit_normalization(&leaky).unwrap()
        );
    }

    #[test]
    fn length_mismatches_are_errors() {
        let stats = NormalizationStats::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        assert!(apply_normalization(&[1.0, 2.0], &stats).is_err());
        assert!(invert_normalization(&[1.0, 2.0], &stats).is_err());
        assert!(fit_normalization(&[vec![1.0]]).is_err());
        assert!(fit_normalization(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
