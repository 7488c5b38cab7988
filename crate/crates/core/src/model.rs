//! The predictor contract shared by every model in the toolkit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{Ar1Model, BaseRateModel, LogisticModel};
use crate::gbt::GBTModel;
use crate::neural::{CnnModel, LstmModel};
use crate::pipeline::{apply_normalization, NormalizationStats};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0}")]
    InvalidInput(String),
    #[error("invalid config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
}

/// The six predictor families, in the order they appear in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BaseRate,
    Ar1,
    Logistic,
    Gbt,
    Cnn,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::BaseRate,
        ModelKind::Ar1,
        ModelKind::Logistic,
        ModelKind::Gbt,
        ModelKind::Cnn,
        ModelKind::Lstm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::BaseRate => "base_rate",
            ModelKind::Ar1 => "ar1",
            ModelKind::Logistic => "logistic",
            ModelKind::Gbt => "gbt",
            ModelKind::Cnn => "cnn",
            ModelKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Human-readable name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::BaseRate => "Base Rate",
            ModelKind::Ar1 => "AR(1)",
            ModelKind::Logistic => "Logistic Regression",
            ModelKind::Gbt => "Gradient Boosted Trees",
            ModelKind::Cnn => "CNN",
            ModelKind::Lstm => "LSTM",
        }
    }
}

/// Any trained predictor, dispatched by kind.
///
/// Every variant scores from the same input: the raw (physical, already
/// imputed) SpO₂ window. The AR(1) model consumes those values directly —
/// its forecast lives on the SpO₂ scale; every other model sees the window
/// after per-minute normalization with the supplied statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum TrainedModel {
    BaseRate(BaseRateModel),
    Ar1(Ar1Model),
    Logistic(LogisticModel),
    Gbt(GBTModel),
    Cnn(CnnModel),
    Lstm(LstmModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::BaseRate(_) => ModelKind::BaseRate,
            TrainedModel::Ar1(_) => ModelKind::Ar1,
            TrainedModel::Logistic(_) => ModelKind::Logistic,
            TrainedModel::Gbt(_) => ModelKind::Gbt,
            TrainedModel::Cnn(_) => ModelKind::Cnn,
            TrainedModel::Lstm(_) => ModelKind::Lstm,
        }
    }

    /// Risk in (0, 1) for one raw imputed window.
    pub fn predict(
        &self,
        raw_window: &[f64],
        stats: &NormalizationStats,
    ) -> Result<f64, ModelError> {
        if raw_window.len() != stats.width() {
            return Err(ModelError::InvalidInput(format!(
                "window holds {} values, expected {}",
                raw_window.len(),
                stats.width()
            )));
        }
        if let Some(v) = raw_window.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::InvalidInput(format!(
                "non-finite window value {v}"
            )));
        }
        let normalized = || {
            apply_normalization(raw_window, stats)
                .map_err(|e| ModelError::InvalidInput(e.to_string()))
        };
        match self {
            TrainedModel::BaseRate(m) => Ok(m.predict()),
            TrainedModel::Ar1(m) => Ok(m.predict(raw_window)),
            TrainedModel::Logistic(m) => m.predict(&normalized()?),
            TrainedModel::Gbt(m) => m.predict(&normalized()?),
            TrainedModel::Cnn(m) => m.predict(&normalized()?),
            TrainedModel::Lstm(m) => m.predict(&normalized()?),
        }
    }

    /// Risks for many raw windows; bit-identical to mapping [`Self::predict`]
    /// over them (the batched network paths hold that property by test).
    pub fn predict_batch(
        &self,
        raw_windows: &[Vec<f64>],
        stats: &NormalizationStats,
    ) -> Result<Vec<f64>, ModelError> {
        match self {
            TrainedModel::Cnn(m) => {
                let normalized = normalize_all(raw_windows, stats)?;
                m.predict_batch(&normalized)
            }
            TrainedModel::Lstm(m) => {
                let normalized = normalize_all(raw_windows, stats)?;
                m.predict_batch(&normalized)
            }
            _ => raw_windows.iter().map(|w| self.predict(w, stats)).collect(),
        }
    }
}

fn normalize_all(
    raw_windows: &[Vec<f64>],
    stats: &NormalizationStats,
) -> Result<Vec<Vec<f64>>, ModelError> {
    raw_windows
        .iter()
        .map(|w| {
            if let Some(v) = w.iter().find(|v| !v.is_finite()) {
                return Err(ModelError::InvalidInput(format!(
                    "non-finite window value {v}"
                )));
            }
            apply_normalization(w, stats).map_err(|e| ModelError::InvalidInput(e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::BaseRateModel;

    #[test]
    fn kind_names_round_trip() {
        for kind in ModelKind::ALL {
            assert_eq!(ModelKind::parse(kind.as_str()), Some(kind));
        }
        assert_eq!(ModelKind::parse("xgboost"), None);
    }

    #[test]
    fn dispatch_reports_the_inner_kind() {
        let m = TrainedModel::BaseRate(BaseRateModel { rate: 0.02 });
        assert_eq!(m.kind(), ModelKind::BaseRate);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"kind\":\"base_rate\""), "{json}");
        let back: TrainedModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn predict_validates_window_shape() {
        let stats =
            NormalizationStats::new(vec![96.0, 96.5], vec![1.0, 1.2]).unwrap();
        let m = TrainedModel::BaseRate(BaseRateModel { rate: 0.02 });
        assert!(m.predict(&[97.0], &stats).is_err());
        assert!(m.predict(&[97.0, f64::NAN], &stats).is_err());
        assert_eq!(m.predict(&[97.0, 98.0], &stats).unwrap(), 0.02);
    }
}
