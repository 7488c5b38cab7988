//! Case-level train/validation/test assignment.
//!
//! Splitting by case, not by time point, keeps every minute of a surgery on
//! one side of the fence; windows from the same case overlap heavily and
//! would leak across a point-level split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        // Hold out 10% of cases for testing, then split the rest 90-10.
        Self {
            train: 0.81,
            validation: 0.09,
            test: 0.10,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(PipelineError::Config {
                field: "fractions",
                reason: format!("{self:?} must all be positive"),
            });
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config {
                field: "fractions",
                reason: format!("{self:?} sums to {sum}, expected 1"),
            });
        }
        Ok(())
    }
}

/// Assigns each of `n_cases` to a split, deterministically in `seed`.
///
/// The returned vector is indexed by case position. Every split receives at
/// least one case, which is why fewer than three cases is an error.
pub fn split_cases(
    n_cases: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<Split>, PipelineError> {
    fractions.validate()?;
    if n_cases < 3 {
        return Err(PipelineError::InvalidInput(format!(
            "need at least 3 cases to split, got {n_cases}"
        )));
    }

    let mut order: Vec<usize> = (0..n_cases).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = n_cases as f64;
    let n_test = ((n * fractions.test).round() as usize).clamp(1, n_cases - 2);
    let n_val = ((n * fractions.validation).round() as usize).clamp(1, n_cases - n_test - 1);

    let mut assignment = vec![Split::Train; n_cases];
    for &case in &order[..n_test] {
        assignment[case] = Split::Test;
    }
    for &case in &order[n_test..n_test + n_val] {
        assignment[case] = Split::Validation;
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_is_deterministic() {
        let a = split_cases(10, SplitFractions::default(), 5).unwrap();
        let b = split_cases(10, SplitFractions::default(), 5).unwrap();
        assert_eq!(a, b);
        let c = split_cases(10, SplitFractions::default(), 6).unwrap();
        assert_ne!(a, c, "different seeds should shuffle differently");
    }

    #[test]
    fn every_split_is_nonempty_even_for_tiny_cohorts() {
        let assignment = split_cases(3, SplitFractions::default(), 1).unwrap();
        for split in [Split::Train, Split::Validation, Split::Test] {
            assert_eq!(assignment.iter().filter(|s| **s == split).count(), 1);
        }
    }

    #[test]
    fn realized_fractions_track_targets_at_scale() {
        let assignment = split_cases(10_000, SplitFractions::default(), 9).unwrap();
        let frac = |split: Split| {
            assignment.iter().filter(|s| **s == split).count() as f64 / 10_000.0
        };
        assert!((0.08..=0.12).contains(&frac(Split::Test)));
        assert!((0.07..=0.11).contains(&frac(Split::Validation)));
        assert!((0.79..=0.83).contains(&frac(Split::Train)));
    }

    #[test]
    fn rejects_tiny_cohorts_and_bad_fractions() {
        assert!(split_cases(2, SplitFractions::default(), 0).is_err());
        let bad = SplitFractions {
            train: 0.5,
            validation: 0.2,
            test: 0.2,
        };
        assert!(matches!(
            split_cases(100, bad, 0).unwrap_err(),
            PipelineError::Config { field: "fractions", .. }
        ));
    }

    #[test]
    fn split_round_trips_through_names() {
        for split in [Split::Train, Split::Validation, Split::Test] {
            assert_eq!(Split::parse(split.as_str()), Some(split));
        }
        assert_eq!(Split::parse("dev"), None);
    }
}
