//! Threshold-free evaluation: PR and ROC curves, their areas, paired
//! bootstrap comparison, and ROC dominance checking.

mod bootstrap;

pub use bootstrap::{bootstrap_compare, BootstrapComparison, Metric};

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    InvalidInput(String),
    #[error("need both classes, got {n_pos} positives and {n_neg} negatives")]
    SingleClass { n_pos: usize, n_neg: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Aligned model scores and reference labels for one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, EvalError> {
        if scores.len() != labels.len() {
            return Err(EvalError::InvalidInput(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(EvalError::InvalidInput(format!(
                "score {s} outside [0, 1]"
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l > 1) {
            return Err(EvalError::InvalidInput(format!("label {l} not in {{0, 1}}")));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|l| **l == 1).count()
    }

    pub fn n_neg(&self) -> usize {
        self.len() - self.n_pos()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// `(tp, fp)` counts at each distinct score threshold, descending, plus the
/// class totals. The shared backbone of both curves.
fn threshold_sweep(set: &ScoredSet) -> (Vec<(usize, usize)>, usize, usize) {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .partial_cmp(&set.scores[a])
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });

    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = set.scores[order[i]];
        // Equal scores fall at one threshold together.
        while i < order.len() && set.scores[order[i]] == score {
            if set.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp, fp));
    }
    (steps, set.n_pos(), set.n_neg())
}

/// ROC curve as `(fpr, tpr)` points from `(0, 0)` to `(1, 1)`, with the
/// trapezoid area. The area equals the Mann-Whitney statistic
/// `P(s+ > s-) + P(s+ = s-) / 2`.
pub fn roc_curve(set: &ScoredSet) -> Result<(Vec<(f64, f64)>, f64), EvalError> {
    let (steps, n_pos, n_neg) = threshold_sweep(set);
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg });
    }
    let mut points = vec![(0.0, 0.0)];
    for (tp, fp) in steps {
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let mut auc = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok((points, auc))
}

/// Precision-recall curve as `(recall, precision)` points and the step-wise
/// area `sum (R_k - R_{k-1}) * P_k` (no precision interpolation). The first
/// point anchors the plot at recall 0 with the first threshold's precision.
pub fn pr_curve(set: &ScoredSet) -> Result<(Vec<(f64, f64)>, f64), EvalError> {
    let (steps, n_pos, _) = threshold_sweep(set);
    if n_pos == 0 {
        return Err(EvalError::SingleClass { n_pos, n_neg: set.n_neg() });
    }
    let mut points = Vec::with_capacity(steps.len() + 1);
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for (k, (tp, fp)) in steps.iter().enumerate() {
        let recall = *tp as f64 / n_pos as f64;
        let precision = *tp as f64 / (tp + fp) as f64;
        if k == 0 {
            points.push((0.0, precision));
        }
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok((points, auc))
}

/// Curve points, areas, and class counts for one scored set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pr_points: Vec<(f64, f64)>,
    pub roc_points: Vec<(f64, f64)>,
    pub au_prc: f64,
    pub au_roc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::InvalidInput(e.to_string()))
    }

    /// Writes the ROC points as CSV `fpr,tpr`.
    pub fn write_roc_csv<W: Write>(&self, mut out: W) -> Result<(), EvalError> {
        writeln!(out, "fpr,tpr")?;
        for (fpr, tpr) in &self.roc_points {
            writeln!(out, "{fpr},{tpr}")?;
        }
        Ok(())
    }

    /// Writes the PR points as CSV `recall,precision`.
    pub fn write_pr_csv<W: Write>(&self, mut out: W) -> Result<(), EvalError> {
        writeln!(out, "recall,precision")?;
        for (recall, precision) in &self.pr_points {
            writeln!(out, "{recall},{precision}")?;
        }
        Ok(())
    }
}

pub fn evaluate(set: &ScoredSet) -> Result<EvalReport, EvalError> {
    let (roc_points, au_roc) = roc_curve(set)?;
    let (pr_points, au_prc) = pr_curve(set)?;
    Ok(EvalReport {
        pr_points,
        roc_points,
        au_prc,
        au_roc,
        n_pos: set.n_pos(),
        n_neg: set.n_neg(),
    })
}

/// Result of checking whether one ROC curve sits above another everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dominance {
    /// True iff curve A's TPR is at least curve B's at every FPR.
    pub dominant: bool,
    /// Largest amount by which B rises above A (0 when dominant).
    pub max_violation: f64,
}

/// Collapses an ROC point list to one (best) TPR per distinct FPR, so
/// vertical segments evaluate to their top.
fn upper_profile(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut profile: Vec<(f64, f64)> = Vec::new();
    for &(fpr, tpr) in points {
        match profile.last_mut() {
            Some((last_fpr, last_tpr)) if *last_fpr == fpr => {
                *last_tpr = last_tpr.max(tpr);
            }
            _ => profile.push((fpr, tpr)),
        }
    }
    profile
}

fn interp(profile: &[(f64, f64)], x: f64) -> f64 {
    match profile.binary_search_by(|(fpr, _)| fpr.partial_cmp(&x).expect("finite fpr")) {
        Ok(i) => profile[i].1,
        Err(i) => {
            let (x0, y0) = profile[i - 1];
            let (x1, y1) = profile[i];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }
}

/// True iff `roc_a` attains at least `roc_b`'s TPR at every FPR in [0, 1].
/// Both curves are piecewise linear, so the worst gap occurs at one of the
/// curves' breakpoints.
pub fn check_dominance(roc_a: &[(f64, f64)], roc_b: &[(f64, f64)]) -> Dominance {
    let a = upper_profile(roc_a);
    let b = upper_profile(roc_b);
    let mut max_violation = 0.0_f64;
    for &(fpr, _) in a.iter().chain(&b) {
        let gap = interp(&b, fpr) - interp(&a, fpr);
        max_violation = max_violation.max(gap);
    }
    Dominance {
        dominant: max_violation == 0.0,
        max_violation,
    }
}
