//! Paired bootstrap comparison of two models scored on the same examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pr_curve, roc_curve, EvalError, ScoredSet};
use crate::math::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RocArea,
    PrArea,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RocArea => "au_roc",
            Metric::PrArea => "au_prc",
        }
    }

    fn compute(self, set: &ScoredSet) -> Result<f64, EvalError> {
        match self {
            Metric::RocArea => roc_curve(set).map(|(_, auc)| auc),
            Metric::PrArea => pr_curve(set).map(|(_, auc)| auc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapComparison {
    pub metric: Metric,
    /// Observed metric difference, first model minus second.
    pub delta: f64,
    /// Two-sided sign-flip fraction with +1 smoothing, capped at 1.
    pub p_value: f64,
    /// 95% percentile interval over the resampled differences.
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
}

/// Compares two score vectors over the same labeled examples by resampling
/// example indices, keeping each example's label and both of its scores
/// together. Deterministic given `seed`; every resample draws from its own
/// derived stream, so the result does not depend on evaluation order.
///
/// Resamples that lose one class entirely are redrawn (deterministically);
/// pathological label sets where that keeps happening are an error.
pub fn bootstrap_compare(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
    metric: Metric,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapComparison, EvalError> {
    if scores_a.len() != scores_b.len() || scores_a.len() != labels.len() {
        return Err(EvalError::InvalidInput(format!(
            "aligned inputs required: {} vs {} scores over {} labels",
            scores_a.len(),
            scores_b.len(),
            labels.len()
        )));
    }
    if n_resamples == 0 {
        return Err(EvalError::InvalidInput("n_resamples must be positive".into()));
    }
    let n = labels.len();
    let full_a = ScoredSet::new(scores_a.to_vec(), labels.to_vec())?;
    let full_b = ScoredSet::new(scores_b.to_vec(), labels.to_vec())?;
    let delta = metric.compute(&full_a)? - metric.compute(&full_b)?;

    let mut deltas = Vec::with_capacity(n_resamples);
    let mut flips = 0usize;
    for r in 0..n_resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, r as u64));
        let mut resample_delta = None;
        for _attempt in 0..1000 {
            let mut rs_a = Vec::with_capacity(n);
            let mut rs_b = Vec::with_capacity(n);
            let mut rs_labels = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.gen_range(0..n);
                rs_a.push(scores_a[i]);
                rs_b.push(scores_b[i]);
                rs_labels.push(labels[i]);
            }
            if rs_labels.iter().any(|l| *l == 1) && rs_labels.iter().any(|l| *l == 0) {
                let set_a = ScoredSet::new(rs_a, rs_labels.clone())?;
                let set_b = ScoredSet::new(rs_b, rs_labels)?;
                resample_delta = Some(metric.compute(&set_a)? - metric.compute(&set_b)?);
                break;
            }
        }
        let d = resample_delta.ok_or_else(|| {
            EvalError::InvalidInput(
                "resamples keep collapsing to a single class; too few examples".into(),
            )
        })?;
        if d * delta <= 0.0 {
            flips += 1;
        }
        deltas.push(d);
    }

    deltas.sort_by(|a, b| a.partial_cmp(b).expect("finite deltas"));
    let percentile = |q: f64| {
        let rank = q * (deltas.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        let frac = rank - lo as f64;
        deltas[lo] * (1.0 - frac) + deltas[hi] * frac
    };

    Ok(BootstrapComparison {
        metric,
        delta,
        p_value: (2.0 * (flips + 1) as f64 / (n_resamples + 1) as f64).min(1.0),
        ci_low: percentile(0.025),
        ci_high: percentile(0.975),
        n_resamples,
    })
}
