//! From-scratch neural predictors: a 1-D convolutional net and a two-layer
//! LSTM, with hand-derived gradients, batch normalization, dropout, and the
//! Adam/RMSprop optimizers.
//!
//! Everything is deterministic: forward passes take explicit dropout masks,
//! training derives its mask/batch/init streams from the config seed, and no
//! step depends on iteration order of a hash map.

mod cnn;
mod lstm;

pub use cnn::{
    cnn_backward, cnn_forward_infer, cnn_forward_train, cnn_input_gradient, init_cnn_params,
    sample_cnn_masks, train_cnn, CnnCache, CnnConfig, CnnMasks, CnnModel,
};
pub use lstm::{
    init_lstm_params, lstm_backward, lstm_forward_infer, lstm_forward_train, lstm_input_gradient,
    sample_lstm_masks, train_lstm, LstmCache, LstmConfig, LstmMasks, LstmModel,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelError;

/// Momentum for batch-norm running-moment updates during training.
pub(crate) const BN_MOMENTUM: f64 = 0.9;
/// Batch-norm variance floor.
pub(crate) const BN_EPSILON: f64 = 1e-5;
/// Rows scored per inference pass when batch-predicting, keeping activation
/// memory bounded regardless of dataset size.
pub(crate) const INFER_CHUNK: usize = 1024;

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// False for state carried with the model but never touched by the
    /// optimizer (batch-norm running moments).
    pub trainable: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector plus the layout that names each slice of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    values: Vec<f64>,
    layout: Vec<TensorSpec>,
}

impl NetParams {
    /// Zero-initialized parameters with the given layout.
    pub fn zeros(layout: Vec<TensorSpec>) -> Self {
        let total = layout.iter().map(TensorSpec::len).sum();
        Self {
            values: vec![0.0; total],
            layout,
        }
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn range_of(&self, name: &str) -> std::ops::Range<usize> {
        let mut start = 0;
        for spec in &self.layout {
            let len = spec.len();
            if spec.name == name {
                return start..start + len;
            }
            start += len;
        }
        panic!("unknown tensor {name:?}");
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        &self.values[self.range_of(name)]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.range_of(name);
        &mut self.values[range]
    }

    /// Per-value trainability flags, aligned with `values`.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.len());
        for spec in &self.layout {
            mask.extend(std::iter::repeat(spec.trainable).take(spec.len()));
        }
        mask
    }

    pub fn validate_finite(&self) -> Result<(), ModelError> {
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::InvalidInput(format!(
                "non-finite parameter value {v}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], trainable: &[bool]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Decay of the squared-gradient accumulator.
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// RMSprop with a leaky squared-gradient accumulator.
pub struct RmsProp {
    cfg: RmsPropConfig,
    acc: Vec<f64>,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig, n_params: usize) -> Self {
        Self {
            cfg,
            acc: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], trainable: &[bool]) {
        let c = &self.cfg;
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i];
            self.acc[i] = c.rho * self.acc[i] + (1.0 - c.rho) * g * g;
            params[i] -= c.learning_rate * g / (self.acc[i].sqrt() + c.epsilon);
        }
    }
}

/// Inverted-dropout mask: kept entries carry `1/keep` so train-time expected
/// activations match inference; dropped entries are zero.
pub(crate) fn sample_mask(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Uniform init in ±1/sqrt(fan_in).
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in out {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Numerically stable mean binary cross-entropy from logits, plus dL/dlogit.
pub(crate) fn bce_from_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(labels) {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        dlogits.push((crate::math::sigmoid(*z) - y) / n);
    }
    (loss / n, dlogits)
}

/// Shared trainer scaffolding: divergence reporting and loss smoothing.
pub(crate) struct LossTrack {
    pub smoothed: Vec<f64>,
    ema: Option<f64>,
}

impl LossTrack {
    pub fn new(capacity: usize) -> Self {
        Self {
            smoothed: Vec::with_capacity(capacity),
            ema: None,
        }
    }

    pub fn push(&mut self, step: usize, loss: f64) -> Result<(), ModelError> {
        if !loss.is_finite() {
            let last = self
                .ema
                .map(|l| format!("last finite smoothed loss {l} at step {}", step.saturating_sub(1)))
                .unwrap_or_else(|| "no finite steps completed".to_string());
            return Err(ModelError::Diverged {
                step,
                reason: format!("loss became {loss}; {last}"),
            });
        }
        let ema = match self.ema {
            Some(prev) => 0.95 * prev + 0.05 * loss,
            None => loss,
        };
        self.ema = Some(ema);
        self.smoothed.push(ema);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn demo_layout() -> Vec<TensorSpec> {
        vec![
            TensorSpec {
                name: "w".into(),
                shape: vec![2, 3],
                trainable: true,
            },
            TensorSpec {
                name: "running".into(),
                shape: vec![4],
                trainable: false,
            },
        ]
    }

    #[test]
    fn tensors_address_their_slices() {
        let mut p = NetParams::zeros(demo_layout());
        assert_eq!(p.len(), 10);
        p.tensor_mut("running")[0] = 7.0;
        assert_eq!(p.values()[6], 7.0);
        assert_eq!(p.tensor("w").len(), 6);
        let mask = p.trainable_mask();
        assert!(mask[..6].iter().all(|t| *t));
        assert!(mask[6..].iter().all(|t| !*t));
    }

    #[test]
    fn layout_round_trips_through_serialization() {
        let mut p = NetParams::zeros(demo_layout());
        p.tensor_mut("w")[3] = -0.125;
        let json = serde_json::to_string(&p).unwrap();
        let back: NetParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn adam_ignores_zero_gradients_and_frozen_tensors() {
        let mut p = NetParams::zeros(demo_layout());
        p.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let before = p.values().to_vec();
        let mask = p.trainable_mask();
        let mut adam = Adam::new(AdamConfig::default(), p.len());
        adam.step(p.values_mut(), &vec![0.0; 10], &mask);
        assert_eq!(p.values(), before.as_slice(), "zero gradient moved params");

        let grads = vec![1.0; 10];
        adam.step(p.values_mut(), &grads, &mask);
        assert!(p.values()[..6].iter().all(|v| *v != 1.0));
        assert!(p.values()[6..].iter().all(|v| *v == 1.0), "frozen tensor moved");
    }

    #[test]
    fn rmsprop_moves_against_the_gradient() {
        let mut params = vec![0.5, -0.5];
        let mut opt = RmsProp::new(RmsPropConfig::default(), 2);
        opt.step(&mut params, &[1.0, -1.0], &[true, true]);
        assert!(params[0] < 0.5 && params[1] > -0.5);
    }

    #[test]
    fn inverted_dropout_preserves_expected_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = [1.0, -2.0, 0.5, 3.0, -0.25, 1.5, 2.0, -1.0];
        let mut sums = [0.0; 8];
        let draws = 10_000;
        for _ in 0..draws {
            let mask = sample_mask(&mut rng, 8, 0.3);
            for (s, (xi, mi)) in sums.iter_mut().zip(x.iter().zip(&mask)) {
                *s += xi * mi;
            }
        }
        for (s, xi) in sums.iter().zip(&x) {
            let mean = s / draws as f64;
            assert!(
                ((mean - xi) / xi).abs() < 0.02,
                "E[dropout(x)] = {mean}, want {xi}"
            );
        }
    }

    #[test]
    fn divergence_reports_the_last_finite_step() {
        let mut track = LossTrack::new(4);
        track.push(0, 0.7).unwrap();
        track.push(1, 0.6).unwrap();
        let err = track.push(2, f64::NAN).unwrap_err();
        match err {
            ModelError::Diverged { step, reason } => {
                assert_eq!(step, 2);
                assert!(reason.contains("step 1"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bce_matches_direct_computation() {
        let (loss, dlogits) = bce_from_logits(&[0.0, 2.0], &[1.0, 0.0]);
        let expected = (-(0.5f64).ln() + -((1.0 - crate::math::sigmoid(2.0)) as f64).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((dlogits[0] - (0.5 - 1.0) / 2.0).abs() < 1e-12);
    }
}
