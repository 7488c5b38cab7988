//! The three simple predictors: base rate, AR(1) forecasting, and logistic
//! regression.

use serde::{Deserialize, Serialize};

use crate::math::{normal_cdf, sigmoid};
use crate::model::ModelError;

/// Constant predictor outputting the training positive fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseRateModel {
    pub rate: f64,
}

pub fn train_base_rate(labels: &[u8]) -> Result<BaseRateModel, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::InvalidInput(
            "cannot estimate a base rate from zero examples".into(),
        ));
    }
    let positives = labels.iter().filter(|l| **l == 1).count();
    Ok(BaseRateModel {
        rate: positives as f64 / labels.len() as f64,
    })
}

impl BaseRateModel {
    pub fn predict(&self) -> f64 {
        self.rate
    }
}

/// AR(1) forecaster with a one-dimensional logistic calibration on top.
///
/// An AR(1) forecast is Markov: it conditions only on the window's current
/// value, so two windows ending at the same reading get the same risk no
/// matter how they got there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ar1Model {
    /// AR coefficient, clamped inside (-1, 1) for stationarity.
    pub phi: f64,
    pub intercept: f64,
    /// Population standard deviation of one-step residuals.
    pub residual_std: f64,
    /// `(slope, offset)` of the logistic link over the forecast z-score.
    ///
    /// Calibrating on the z-score rather than the tail probability keeps the
    /// link well-conditioned: tail probabilities underflow toward zero for
    /// every healthy window, which would starve the fit of signal.
    pub calibration: (f64, f64),
    /// Hypoxemia threshold the forecast is compared against.
    pub threshold: f64,
    /// Steps ahead the recursion is iterated.
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Config {
    pub threshold: f64,
    pub horizon: usize,
    /// Settings for the calibration fit.
    pub calibration: LogisticConfig,
}

impl Default for Ar1Config {
    fn default() -> Self {
        Self {
            threshold: 92.0,
            horizon: 5,
            calibration: LogisticConfig {
                learning_rate: 1.0,
                epochs: 300,
                l2: 0.0,
            },
        }
    }
}

/// Fits phi and the intercept by least squares over consecutive pairs pooled
/// from all windows, then fits the risk calibration on the training labels.
pub fn fit_ar1(
    windows: &[Vec<f64>],
    labels: &[u8],
    cfg: &Ar1Config,
) -> Result<Ar1Model, ModelError> {
    if windows.len() != labels.len() {
        return Err(ModelError::InvalidInput(format!(
            "{} windows but {} labels",
            windows.len(),
            labels.len()
        )));
    }
    let mut n = 0usize;
    let (mut sum_x, mut sum_y, mut sum_xx, mut sum_xy) = (0.0, 0.0, 0.0, 0.0);
    for window in windows {
        for pair in window.windows(2) {
            let (x, y) = (pair[0], pair[1]);
            if !(x.is_finite() && y.is_finite()) {
                return Err(ModelError::InvalidInput("non-finite window value".into()));
            }
            n += 1;
            sum_x += x;
            sum_y += y;
            sum_xx += x * x;
            sum_xy += x * y;
        }
    }
    if n < 2 {
        return Err(ModelError::InvalidInput(format!(
            "need at least 2 consecutive pairs to fit AR(1), got {n}"
        )));
    }
    let nf = n as f64;
    let var_x = sum_xx / nf - (sum_x / nf).powi(2);
    let cov_xy = sum_xy / nf - (sum_x / nf) * (sum_y / nf);
    let phi = if var_x < 1e-12 {
        0.0
    } else {
        (cov_xy / var_x).clamp(-0.999, 0.999)
    };
    let intercept = sum_y / nf - phi * sum_x / nf;

    let mut ss_resid = 0.0;
    for window in windows {
        for pair in window.windows(2) {
            ss_resid += (pair[1] - intercept - phi * pair[0]).powi(2);
        }
    }
    let residual_std = (ss_resid / nf).sqrt();

    let mut model = Ar1Model {
        phi,
        intercept,
        residual_std,
        calibration: (1.0, 0.0),
        threshold: cfg.threshold,
        horizon: cfg.horizon,
    };
    let zs: Vec<Vec<f64>> = windows.iter().map(|w| vec![model.forecast_z(w)]).collect();
    let (link, _) = train_logistic(&zs, labels, &cfg.calibration)?;
    model.calibration = (link.weights[0], link.bias);
    Ok(model)
}

impl Ar1Model {
    /// Mean and standard deviation of the value `horizon` steps past the
    /// window's last reading.
    pub fn forecast(&self, window: &[f64]) -> (f64, f64) {
        let last = *window.last().expect("window cannot be empty");
        let mut mean = last;
        let mut variance = 0.0;
        for _ in 0..self.horizon {
            mean = self.intercept + self.phi * mean;
            variance = variance * self.phi * self.phi + self.residual_std * self.residual_std;
        }
        (mean, variance.sqrt().max(1e-9))
    }

    /// Standardized distance of the hypoxemia threshold from the forecast:
    /// positive when the forecast mean sits below the threshold.
    pub fn forecast_z(&self, window: &[f64]) -> f64 {
        let (mean, std) = self.forecast(window);
        (self.threshold - mean) / std
    }

    /// Probability that the forecast distribution falls at or below the
    /// hypoxemia threshold.
    pub fn forecast_probability(&self, window: &[f64]) -> f64 {
        normal_cdf(self.forecast_z(window))
    }

    /// Calibrated risk.
    pub fn predict(&self, window: &[f64]) -> f64 {
        let (slope, offset) = self.calibration;
        sigmoid(slope * self.forecast_z(window) + offset)
    }
}

/// Linear model over the normalized window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    pub fn predict(&self, features: &[f64]) -> Result<f64, ModelError> {
        if features.len() != self.weights.len() {
            return Err(ModelError::InvalidInput(format!(
                "expected {} features, got {}",
                self.weights.len(),
                features.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::InvalidInput("non-finite feature".into()));
        }
        Ok(sigmoid(crate::math::dot(&self.weights, features) + self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// L2 penalty on the weights (the bias is unregularized).
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 300,
            l2: 1e-4,
        }
    }
}

/// Mean cross-entropy with L2 penalty, and its gradient.
fn logistic_loss_and_grad(
    weights: &[f64],
    bias: f64,
    features: &[Vec<f64>],
    labels: &[u8],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = features.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (row, label) in features.iter().zip(labels) {
        let z = crate::math::dot(weights, row) + bias;
        let p = sigmoid(z);
        let y = *label as f64;
        // Numerically stable BCE straight from the logit.
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let err = p - y;
        for (g, x) in grad_w.iter_mut().zip(row) {
            *g += err * x;
        }
        grad_b += err;
    }
    loss /= n;
    grad_b /= n;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
        loss += l2 / 2.0 * w * w;
    }
    (loss, grad_w, grad_b)
}

/// Full-batch gradient descent from zero weights. The learning rate is
/// halved (and the step retried) whenever a step would increase the loss,
/// so the returned per-epoch losses are non-increasing.
pub fn train_logistic(
    features: &[Vec<f64>],
    labels: &[u8],
    cfg: &LogisticConfig,
) -> Result<(LogisticModel, Vec<f64>), ModelError> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(ModelError::InvalidInput(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let width = features[0].len();
    for (i, row) in features.iter().enumerate() {
        if row.len() != width {
            return Err(ModelError::InvalidInput(format!(
                "row {i} has {} features, expected {width}",
                row.len()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::InvalidInput(format!("non-finite feature in row {i}")));
        }
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(ModelError::Config {
            field: "learning_rate",
            reason: format!("{} must be positive", cfg.learning_rate),
        });
    }
    if !(cfg.l2.is_finite() && cfg.l2 >= 0.0) {
        return Err(ModelError::Config {
            field: "l2",
            reason: format!("{} must be nonnegative", cfg.l2),
        });
    }

    let mut weights = vec![0.0; width];
    let mut bias = 0.0;
    let mut lr = cfg.learning_rate;
    let (mut loss, mut grad_w, mut grad_b) =
        logistic_loss_and_grad(&weights, bias, features, labels, cfg.l2);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        loop {
            let trial_w: Vec<f64> = weights
                .iter()
                .zip(&grad_w)
                .map(|(w, g)| w - lr * g)
                .collect();
            let trial_b = bias - lr * grad_b;
            let (trial_loss, trial_gw, trial_gb) =
                logistic_loss_and_grad(&trial_w, trial_b, features, labels, cfg.l2);
            if trial_loss <= loss || lr < 1e-12 {
                if !trial_loss.is_finite() {
                    return Err(ModelError::Diverged {
                        step: epoch,
                        reason: format!("loss became {trial_loss}"),
                    });
                }
                weights = trial_w;
                bias = trial_b;
                loss = trial_loss.min(loss);
                grad_w = trial_gw;
                grad_b = trial_gb;
                break;
            }
            lr /= 2.0;
        }
        losses.push(loss);
    }
    Ok((LogisticModel { weights, bias }, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{roc_curve, ScoredSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn base_rate_is_the_positive_fraction() {
        let mut labels = vec![0u8; 983];
        for l in labels.iter_mut().take(17) {
            *l = 1;
        }
        let model = train_base_rate(&labels).unwrap();
        assert!((model.predict() - 17.0 / 983.0).abs() < 1e-15);
        assert_eq!(train_base_rate(&[0, 0, 0]).unwrap().predict(), 0.0);
        assert!(train_base_rate(&[]).is_err());
    }

    #[test]
    fn constant_scores_sit_at_chance_roc() {
        let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 50 == 0)).collect();
        let model = train_base_rate(&labels).unwrap();
        let scores = vec![model.predict(); labels.len()];
        let (_, auc) = roc_curve(&ScoredSet::new(scores, labels).unwrap()).unwrap();
        assert_eq!(auc, 0.5);
    }

    /// Simulates a known AR(1) process chopped into windows.
    fn simulate_ar1_windows(
        phi: f64,
        intercept: f64,
        noise: f64,
        n_windows: usize,
        width: usize,
        seed: u64,
    ) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = intercept / (1.0 - phi);
        (0..n_windows)
            .map(|_| {
                (0..width)
                    .map(|_| {
                        let eps: f64 = rng.sample(StandardNormal);
                        x = intercept + phi * x + noise * eps;
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn recovers_known_ar_coefficients() {
        // 2,000 windows x 59 pairs > 1e5 pairs.
        let windows = simulate_ar1_windows(0.8, 19.4, 0.5, 2000, 60, 21);
        let labels = vec![0u8; windows.len() - 1]
            .into_iter()
            .chain([1u8])
            .collect::<Vec<_>>();
        let model = fit_ar1(&windows, &labels, &Ar1Config::default()).unwrap();
        assert!((model.phi - 0.8).abs() < 0.05, "phi {}", model.phi);

        let white = simulate_ar1_windows(0.0, 97.0, 0.3, 2000, 60, 22);
        let model = fit_ar1(&white, &labels, &Ar1Config::default()).unwrap();
        assert!(model.phi.abs() < 0.05, "phi {}", model.phi);
    }

    #[test]
    fn ar_estimate_tightens_with_more_data() {
        let labels_of = |n: usize| {
            let mut l = vec![0u8; n];
            l[0] = 1;
            l
        };
        let small = simulate_ar1_windows(0.6, 38.8, 0.5, 40, 60, 30);
        let big = simulate_ar1_windows(0.6, 38.8, 0.5, 4000, 60, 30);
        let err_small =
            (fit_ar1(&small, &labels_of(40), &Ar1Config::default()).unwrap().phi - 0.6).abs();
        let err_big =
            (fit_ar1(&big, &labels_of(4000), &Ar1Config::default()).unwrap().phi - 0.6).abs();
        assert!(
            err_big < err_small,
            "estimate did not tighten: {err_small} -> {err_big}"
        );
    }

    #[test]
    fn constant_healthy_windows_score_near_zero() {
        let mut windows = vec![vec![98.0; 60]; 200];
        // One token dip so a positive label exists for calibration.
        windows[0] = vec![91.0; 60];
        let mut labels = vec![0u8; 200];
        labels[0] = 1;
        let model = fit_ar1(&windows, &labels, &Ar1Config::default()).unwrap();
        assert!(
            model.predict(&vec![98.0; 60]) < 0.05,
            "risk {}",
            model.predict(&vec![98.0; 60])
        );
    }

    #[test]
    fn ar_risk_decreases_in_the_current_value() {
        let windows = simulate_ar1_windows(0.7, 29.1, 0.4, 500, 60, 33);
        let labels: Vec<u8> = windows
            .iter()
            .map(|w| u8::from(*w.last().unwrap() < 96.0))
            .collect();
        // Threshold near the data so the forecast probability has dynamic
        // range for the calibration to latch onto.
        let cfg = Ar1Config {
            threshold: 96.0,
            ..Ar1Config::default()
        };
        let model = fit_ar1(&windows, &labels, &cfg).unwrap();
        assert!(model.phi > 0.0, "sanity: positive autocorrelation");

        let mut flat_low = vec![96.0; 60];
        flat_low[59] = 93.0;
        let flat_high = vec![96.0; 60];
        assert!(model.predict(&flat_low) > model.predict(&flat_high));

        // Markov property: equal current values give equal risk regardless
        // of the path taken.
        let falling: Vec<f64> = (0..60).map(|i| 99.0 - 0.1 * i as f64).collect();
        let mut flat_same_end = vec![falling[59]; 60];
        flat_same_end[0] = falling[59];
        assert_eq!(model.predict(&falling), model.predict(&flat_same_end));
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        assert!(fit_ar1(&[vec![98.0, 97.0]], &[0], &Ar1Config::default()).is_err());
        assert!(fit_ar1(&[], &[], &Ar1Config::default()).is_err());
    }

    #[test]
    fn logistic_separates_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200 {
            let y = rng.gen_bool(0.5);
            let center = if y { 1.0 } else { -1.0 };
            features.push(vec![
                center + 0.3 * rng.sample::<f64, _>(StandardNormal),
                -center + 0.3 * rng.sample::<f64, _>(StandardNormal),
            ]);
            labels.push(u8::from(y));
        }
        let cfg = LogisticConfig {
            learning_rate: 1.0,
            epochs: 500,
            l2: 1e-4,
        };
        let (model, losses) = train_logistic(&features, &labels, &cfg).unwrap();
        let scores: Vec<f64> = features.iter().map(|f| model.predict(f).unwrap()).collect();
        let (_, auc) = roc_curve(&ScoredSet::new(scores, labels).unwrap()).unwrap();
        assert!(auc >= 0.99, "training AU-ROC {auc}");
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "loss increased");
    }

    #[test]
    fn zero_epochs_leaves_the_zero_model() {
        let cfg = LogisticConfig {
            epochs: 0,
            ..LogisticConfig::default()
        };
        let (model, losses) =
            train_logistic(&[vec![1.0], vec![-1.0]], &[1, 0], &cfg).unwrap();
        assert_eq!(model.weights, vec![0.0]);
        assert_eq!(model.bias, 0.0);
        assert!(losses.is_empty());
        assert_eq!(model.predict(&[3.0]).unwrap(), 0.5);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let d = 5;
        let features: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let labels: Vec<u8> = (0..8).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        let l2 = 0.01;

        for _ in 0..20 {
            let weights: Vec<f64> =
                (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let bias: f64 = rng.sample(StandardNormal);
            let (_, grad_w, grad_b) =
                logistic_loss_and_grad(&weights, bias, &features, &labels, l2);

            let check = |analytic: f64, perturb: &dyn Fn(f64) -> (Vec<f64>, f64)| {
                let h = 1e-5;
                let (wp, bp) = perturb(h);
                let (lp, _, _) = logistic_loss_and_grad(&wp, bp, &features, &labels, l2);
                let (wm, bm) = perturb(-h);
                let (lm, _, _) = logistic_loss_and_grad(&wm, bm, &features, &labels, l2);
                let fd = (lp - lm) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-6, "gradient mismatch: {analytic} vs {fd}");
            };
            for k in 0..d {
                let w = weights.clone();
                check(grad_w[k], &move |h| {
                    let mut wp = w.clone();
                    wp[k] += h;
                    (wp, bias)
                });
            }
            let w = weights.clone();
            check(grad_b, &move |h| (w.clone(), bias + h));
        }
    }

    #[test]
    fn logistic_rejects_bad_inputs() {
        let cfg = LogisticConfig::default();
        assert!(train_logistic(&[vec![f64::NAN]], &[1], &cfg).is_err());
        assert!(train_logistic(&[vec![1.0]], &[1, 0], &cfg).is_err());
        let model = LogisticModel {
            weights: vec![1.0, 2.0],
            bias: 0.0,
        };
        assert!(model.predict(&[1.0]).is_err());
        assert!(model.predict(&[1.0, f64::INFINITY]).is_err());
    }
}
