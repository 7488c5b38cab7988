//! Integrated Gradients on the pre-sigmoid logit.
//!
//! The path integral from a baseline window to the explained window is
//! approximated with the midpoint rule; all interpolation points go through
//! the network as one batch (inference mode is per-example independent, so
//! batching changes nothing). Attributions live in log-odds space, where the
//! completeness axiom — attributions summing to the logit difference from
//! the baseline — holds up to quadrature error.

use crate::model::ModelError;
use crate::neural::{cnn_input_gradient, lstm_input_gradient, CnnModel, LstmModel};

use super::{Attribution, ExplainError, Space};

/// Default quadrature resolution; keeps the completeness residual of the
/// desk-scale networks comfortably under 1e-3.
pub const IG_STEPS: usize = 300;

/// Integrated Gradients for any batched logit-and-gradient function.
/// `grad_fn(flat_windows, batch)` must return the pre-sigmoid logit and the
/// per-example input gradient, laid out `(batch, width)`.
///
/// `attribution_i = (x_i − b_i) · (1/m) Σ_k ∂f/∂x_i` evaluated at
/// `b + (k − ½)/m · (x − b)`, `k = 1..m`.
pub fn integrated_gradients<F>(
    grad_fn: F,
    features: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Attribution, ExplainError>
where
    F: Fn(&[f64], usize) -> Result<(Vec<f64>, Vec<f64>), ModelError>,
{
    if steps == 0 {
        return Err(ExplainError::ZeroSteps);
    }
    let width = features.len();
    if baseline.len() != width {
        return Err(ExplainError::WidthMismatch {
            context: "baseline",
            got: baseline.len(),
            want: width,
        });
    }

    // One batch: the window, the baseline, then the m midpoints.
    let batch = steps + 2;
    let mut points = Vec::with_capacity(batch * width);
    points.extend_from_slice(features);
    points.extend_from_slice(baseline);
    for k in 0..steps {
        let alpha = (k as f64 + 0.5) / steps as f64;
        points.extend(
            features
                .iter()
                .zip(baseline)
                .map(|(x, b)| b + alpha * (x - b)),
        );
    }

    let (logits, grads) = grad_fn(&points, batch)?;
    if let Some(row) = (0..batch).find(|&r| {
        !logits[r].is_finite() || grads[r * width..][..width].iter().any(|g| !g.is_finite())
    }) {
        return Err(ExplainError::NonFiniteGradient { point: row });
    }

    let per_minute = (0..width)
        .map(|i| {
            let total: f64 = (0..steps).map(|k| grads[(k + 2) * width + i]).sum();
            (features[i] - baseline[i]) * total / steps as f64
        })
        .collect();
    Ok(Attribution {
        per_minute,
        base_value: logits[1],
        model_output: logits[0],
        space: Space::LogOdds,
    })
}

pub fn integrated_gradients_cnn(
    model: &CnnModel,
    features: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Attribution, ExplainError> {
    integrated_gradients(
        |buf, batch| cnn_input_gradient(&model.params, &model.config, buf, batch),
        features,
        baseline,
        steps,
    )
}

pub fn integrated_gradients_lstm(
    model: &LstmModel,
    features: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Attribution, ExplainError> {
    integrated_gradients(
        |buf, batch| lstm_input_gradient(&model.params, &model.config, buf, batch),
        features,
        baseline,
        steps,
    )
}
