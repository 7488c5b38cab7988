//! Per-minute attribution for trained predictors.
//!
//! Two methods cover the supported model families: exact interventional
//! Tree SHAP for the boosted ensemble and Integrated Gradients for the two
//! networks. Both attribute the pre-sigmoid margin/logit, where their
//! summation axioms (local accuracy, completeness) hold exactly, and both
//! take their reference distribution from a [`BackgroundSet`] of normalized
//! windows. A brute-force Shapley oracle over explicit subset enumeration
//! backs the Tree SHAP implementation in tests.

mod ig;
mod render;
mod shap;

pub use ig::{integrated_gradients, integrated_gradients_cnn, integrated_gradients_lstm, IG_STEPS};
pub use render::{render_csv, render_explanation, render_svg};
pub use shap::{shapley_bruteforce, tree_shap, BRUTEFORCE_MAX_FEATURES};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelKind, TrainedModel};
use crate::pipeline::{apply_normalization, NormalizationStats};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("background set must contain at least one window")]
    EmptyBackground,
    #[error("window width mismatch: {context} has {got} values, expected {want}")]
    WidthMismatch {
        context: &'static str,
        got: usize,
        want: usize,
    },
    #[error("brute-force enumeration supports at most {max} active features, got {got}")]
    TooManyActiveFeatures { got: usize, max: usize },
    #[error("invalid active feature set: {0}")]
    InvalidActiveSet(String),
    #[error("integration steps must be at least 1")]
    ZeroSteps,
    #[error("non-finite gradient at integration point {point}")]
    NonFiniteGradient { point: usize },
    #[error("attribution is not supported for the {} model", .0.as_str())]
    Unsupported(ModelKind),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("could not write explanation: {0}")]
    Io(#[from] std::io::Error),
}

/// The scale an attribution lives on. Both built-in methods work in
/// pre-sigmoid log-odds, where their summation axioms are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    LogOdds,
    Probability,
}

/// Importance of each minute's SpO₂ value for one window's prediction; the
/// last index is the current minute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub per_minute: Vec<f64>,
    /// Expected model output over the background set.
    pub base_value: f64,
    pub model_output: f64,
    pub space: Space,
}

impl Attribution {
    /// `model_output − (base_value + Σ per_minute)`; the summation axioms
    /// say this is ~0 where they apply.
    pub fn residual(&self) -> f64 {
        self.model_output - self.base_value - self.per_minute.iter().sum::<f64>()
    }
}

/// Reference windows (already normalized) that stand in for "a typical
/// input": Tree SHAP averages its expectations over them, Integrated
/// Gradients uses their mean as the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSet {
    windows: Vec<Vec<f64>>,
    width: usize,
}

impl BackgroundSet {
    pub fn new(windows: Vec<Vec<f64>>) -> Result<Self, ExplainError> {
        let width = windows.first().ok_or(ExplainError::EmptyBackground)?.len();
        for w in &windows {
            if w.len() != width {
                return Err(ExplainError::WidthMismatch {
                    context: "background window",
                    got: w.len(),
                    want: width,
                });
            }
        }
        Ok(Self { windows, width })
    }

    /// Draw `n` windows without replacement (all of them if the pool is
    /// smaller), deterministically in `seed`.
    pub fn sample(pool: &[Vec<f64>], n: usize, seed: u64) -> Result<Self, ExplainError> {
        if n == 0 || pool.is_empty() {
            return Err(ExplainError::EmptyBackground);
        }
        if pool.len() <= n {
            return Self::new(pool.to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        Self::new(idx.into_iter().map(|i| pool[i].clone()).collect())
    }

    pub fn windows(&self) -> &[Vec<f64>] {
        &self.windows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Per-coordinate mean across the set; the Integrated Gradients baseline.
    pub fn mean_window(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.width];
        for w in &self.windows {
            for (m, v) in mean.iter_mut().zip(w) {
                *m += v;
            }
        }
        let n = self.windows.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Attribute one raw (physical, imputed) window under `model`. Normalizes
/// with `stats`, then routes to the method that fits the model family:
/// Tree SHAP for the boosted ensemble, Integrated Gradients against the
/// background mean for the networks. The constant baseline, the
/// autoregressive forecaster, and the logistic model are not supported.
pub fn explain_window(
    model: &TrainedModel,
    raw_window: &[f64],
    stats: &NormalizationStats,
    background: &BackgroundSet,
) -> Result<Attribution, ExplainError> {
    if background.width() != stats.width() {
        return Err(ExplainError::WidthMismatch {
            context: "background set",
            got: background.width(),
            want: stats.width(),
        });
    }
    let normalized = apply_normalization(raw_window, stats).map_err(|e| {
        ExplainError::Model(ModelError::InvalidInput(e.to_string()))
    })?;
    match model {
        TrainedModel::Gbt(m) => tree_shap(m, &normalized, background),
        TrainedModel::Cnn(m) => {
            integrated_gradients_cnn(m, &normalized, &background.mean_window(), IG_STEPS)
        }
        TrainedModel::Lstm(m) => {
            integrated_gradients_lstm(m, &normalized, &background.mean_window(), IG_STEPS)
        }
        other => Err(ExplainError::Unsupported(other.kind())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::BaseRateModel;
    use crate::gbt::{train_gbt, GBTConfig};
    use crate::neural::{init_cnn_params, init_lstm_params, CnnConfig, CnnModel, LstmConfig, LstmModel};
    use rand::Rng;

    fn pool(n: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect()
    }

    #[test]
    fn sampling_is_deterministic_and_caps_at_the_pool() {
        let windows = pool(40, 6, 3);
        let a = BackgroundSet::sample(&windows, 16, 9).unwrap();
        let b = BackgroundSet::sample(&windows, 16, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let c = BackgroundSet::sample(&windows, 16, 10).unwrap();
        assert_ne!(a, c, "different seeds should draw different subsets");

        let all = BackgroundSet::sample(&windows, 100, 9).unwrap();
        assert_eq!(all.len(), 40);
        assert_eq!(all.windows(), &windows[..]);
    }

    #[test]
    fn background_validates_shape() {
        assert!(matches!(
            BackgroundSet::new(vec![]),
            Err(ExplainError::EmptyBackground)
        ));
        let err = BackgroundSet::new(vec![vec![1.0, 2.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, ExplainError::WidthMismatch { .. }));
    }

    #[test]
    fn mean_window_averages_each_coordinate() {
        let set =
            BackgroundSet::new(vec![vec![1.0, -2.0, 0.0], vec![3.0, 2.0, 0.0]]).unwrap();
        assert_eq!(set.mean_window(), vec![2.0, 0.0, 0.0]);
    }

    fn identity_stats(width: usize) -> NormalizationStats {
        NormalizationStats::new(vec![0.0; width], vec![1.0; width]).unwrap()
    }

    #[test]
    fn dispatch_rejects_unsupported_families() {
        let stats = identity_stats(4);
        let bg = BackgroundSet::new(pool(3, 4, 1)).unwrap();
        let model = TrainedModel::BaseRate(BaseRateModel { rate: 0.1 });
        let err = explain_window(&model, &[1.0, 2.0, 3.0, 4.0], &stats, &bg).unwrap_err();
        assert!(matches!(err, ExplainError::Unsupported(ModelKind::BaseRate)));
        assert!(err.to_string().contains("base_rate"));
    }

    #[test]
    fn dispatch_checks_background_width() {
        let stats = identity_stats(4);
        let bg = BackgroundSet::new(pool(3, 5, 1)).unwrap();
        let model = TrainedModel::BaseRate(BaseRateModel { rate: 0.1 });
        let err = explain_window(&model, &[1.0; 4], &stats, &bg).unwrap_err();
        assert!(matches!(err, ExplainError::WidthMismatch { .. }));
    }

    #[test]
    fn dispatch_satisfies_each_methods_sum_rule() {
        let width = 12;
        let windows = pool(80, width, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let labels: Vec<u8> = (0..80).map(|_| rng.gen_range(0..2)).collect();
        let stats = identity_stats(width);
        let bg = BackgroundSet::sample(&windows, 8, 5).unwrap();
        let x: Vec<f64> = (0..width).map(|i| 0.1 * i as f64 - 0.5).collect();

        let gbt = train_gbt(
            &windows,
            &labels,
            &GBTConfig {
                n_trees: 10,
                max_depth: 3,
                ..GBTConfig::default()
            },
        )
        .unwrap();
        let att = explain_window(&TrainedModel::Gbt(gbt), &x, &stats, &bg).unwrap();
        assert_eq!(att.space, Space::LogOdds);
        assert!(att.residual().abs() <= 1e-9, "residual {}", att.residual());

        let cnn_cfg = CnnConfig {
            input_len: width,
            layer_filters: vec![2, 3],
            ..CnnConfig::default()
        };
        let cnn = CnnModel {
            params: init_cnn_params(&cnn_cfg, 7),
            config: cnn_cfg,
        };
        let att = explain_window(&TrainedModel::Cnn(cnn), &x, &stats, &bg).unwrap();
        assert_eq!(att.per_minute.len(), width);
        assert!(att.residual().abs() <= 1e-3, "residual {}", att.residual());

        let lstm_cfg = LstmConfig {
            input_len: width,
            hidden_sizes: vec![3, 4],
            ..LstmConfig::default()
        };
        let lstm = LstmModel {
            params: init_lstm_params(&lstm_cfg, 7),
            config: lstm_cfg,
        };
        let att = explain_window(&TrainedModel::Lstm(lstm), &x, &stats, &bg).unwrap();
        assert!(att.residual().abs() <= 1e-3, "residual {}", att.residual());
    }

    #[test]
    fn recent_drops_dominate_old_ones_for_a_trained_ensemble() {
        // Windows whose label depends on the most recent values: the model
        // must learn recency, and the attribution should reflect it.
        let width = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut windows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..400 {
            let mut w: Vec<f64> = (0..width).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let positive = rng.gen_range(0..2) == 1;
            if positive {
                for v in &mut w[width - 5..] {
                    *v -= rng.gen_range(1.5..2.5);
                }
            }
            windows.push(w);
            labels.push(u8::from(positive));
        }
        let model = train_gbt(
            &windows,
            &labels,
            &GBTConfig {
                n_trees: 40,
                max_depth: 3,
                ..GBTConfig::default()
            },
        )
        .unwrap();
        let bg = BackgroundSet::sample(&windows, 32, 11).unwrap();

        // Flat history with a sharp drop over the last five minutes, deep
        // enough to read as an event under the training distribution.
        let mut x = vec![0.0; width];
        for (k, v) in x[width - 5..].iter_mut().enumerate() {
            *v = -1.6 - 0.2 * k as f64;
        }
        let att = tree_shap(&model, &x, &bg).unwrap();
        let recent: f64 = att.per_minute[width - 5..].iter().sum();
        let old: f64 = att.per_minute[..40].iter().map(|v| v.abs()).sum();
        assert!(
            recent > old,
            "recent sum {recent} should exceed old |sum| {old}"
        );
    }
}
