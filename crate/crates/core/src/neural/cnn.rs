//! 1-D convolutional risk model over the 60-minute window.
//!
//! Architecture, in exact application order for `n` convolution layers:
//! `conv_0, bn_0, relu`, then for each remaining layer `j` the block
//! `(bn_j, relu, dropout, conv_j)`, and finally `(bn_n, relu, dense, sigmoid)`.
//! All convolutions use stride 1 and same padding, so the temporal axis keeps
//! its length end to end; the last feature map is flattened before the dense
//! layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bce_from_logits, init_uniform, sample_mask, Adam, AdamConfig, LossTrack, NetParams,
    TensorSpec, BN_EPSILON, BN_MOMENTUM,
};
use crate::math::{mix_seed, sigmoid};
use crate::model::ModelError;
use crate::pipeline::balanced_batches;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Expected feature-window length (temporal axis).
    pub input_len: usize,
    pub kernel_size: usize,
    /// Output channels of each convolution, first to last.
    pub layer_filters: Vec<usize>,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            input_len: crate::pipeline::WINDOW_WIDTH,
            kernel_size: 6,
            layer_filters: vec![16, 16, 32, 32],
            dropout_rate: 0.3,
            batch_size: 64,
            steps: 600,
            adam: AdamConfig::default(),
            seed: 7,
        }
    }
}

impl CnnConfig {
    /// Full-size configuration matching the original six-layer network.
    pub fn full_scale() -> Self {
        Self {
            layer_filters: vec![64, 64, 128, 128, 128, 128],
            steps: 3000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let field = |field: &'static str, reason: String| ModelError::Config { field, reason };
        if self.input_len == 0 {
            return Err(field("input_len", "must be positive".into()));
        }
        if self.kernel_size == 0 {
            return Err(field("kernel_size", "must be positive".into()));
        }
        if self.layer_filters.is_empty() || self.layer_filters.iter().any(|f| *f == 0) {
            return Err(field(
                "layer_filters",
                format!("need at least one nonzero width, got {:?}", self.layer_filters),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(field(
                "dropout_rate",
                format!("must lie in [0, 1), got {}", self.dropout_rate),
            ));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(field(
                "batch_size",
                format!("must be even and positive, got {}", self.batch_size),
            ));
        }
        if self.steps == 0 {
            return Err(field("steps", "must be positive".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate.is_finite() && a.learning_rate >= 0.0) {
            return Err(field("adam.learning_rate", "must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(field("adam.beta", "betas must lie in [0, 1)".into()));
        }
        if !(a.epsilon > 0.0) {
            return Err(field("adam.epsilon", "must be positive".into()));
        }
        Ok(())
    }

    fn n_convs(&self) -> usize {
        self.layer_filters.len()
    }

    /// Input channels of the tensor each batch-norm site normalizes.
    fn bn_channels(&self) -> Vec<usize> {
        std::iter::once(self.layer_filters[0])
            .chain(self.layer_filters.iter().copied())
            .collect()
    }

    fn conv_in_channels(&self, j: usize) -> usize {
        if j == 0 {
            1
        } else {
            self.layer_filters[j - 1]
        }
    }

    fn layout(&self) -> Vec<TensorSpec> {
        let spec = |name: String, shape: Vec<usize>, trainable: bool| TensorSpec {
            name,
            shape,
            trainable,
        };
        let bn_specs = |k: usize, ch: usize, out: &mut Vec<TensorSpec>| {
            out.push(spec(format!("bn{k}.gamma"), vec![ch], true));
            out.push(spec(format!("bn{k}.beta"), vec![ch], true));
            out.push(spec(format!("bn{k}.running_mean"), vec![ch], false));
            out.push(spec(format!("bn{k}.running_var"), vec![ch], false));
        };
        let conv_specs = |j: usize, cin: usize, cout: usize, out: &mut Vec<TensorSpec>| {
            out.push(spec(
                format!("conv{j}.weight"),
                vec![cout, self.kernel_size, cin],
                true,
            ));
            out.push(spec(format!("conv{j}.bias"), vec![cout], true));
        };

        let n = self.n_convs();
        let bn_ch = self.bn_channels();
        let mut out = Vec::new();
        conv_specs(0, 1, self.layer_filters[0], &mut out);
        bn_specs(0, bn_ch[0], &mut out);
        for j in 1..n {
            bn_specs(j, bn_ch[j], &mut out);
            conv_specs(j, self.conv_in_channels(j), self.layer_filters[j], &mut out);
        }
        bn_specs(n, bn_ch[n], &mut out);
        let flat = self.input_len * self.layer_filters[n - 1];
        out.push(spec("dense.weight".into(), vec![flat], true));
        out.push(spec("dense.bias".into(), vec![1], true));
        out
    }
}

/// Fresh parameters: weights uniform in ±1/sqrt(fan_in), biases zero,
/// batch-norm scale one / shift zero / running moments (0, 1).
pub fn init_cnn_params(cfg: &CnnConfig, seed: u64) -> NetParams {
    let mut params = NetParams::zeros(cfg.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_convs();
    for j in 0..n {
        let fan_in = cfg.kernel_size * cfg.conv_in_channels(j);
        init_uniform(&mut rng, params.tensor_mut(&format!("conv{j}.weight")), fan_in);
    }
    for (k, _) in cfg.bn_channels().iter().enumerate() {
        params
            .tensor_mut(&format!("bn{k}.gamma"))
            .iter_mut()
            .for_each(|v| *v = 1.0);
        params
            .tensor_mut(&format!("bn{k}.running_var"))
            .iter_mut()
            .for_each(|v| *v = 1.0);
    }
    let fan_in = cfg.input_len * cfg.layer_filters[n - 1];
    init_uniform(&mut rng, params.tensor_mut("dense.weight"), fan_in);
    params
}

/// One inverted-dropout mask per `(bn, relu, dropout, conv)` block, shaped
/// like the tensor entering that block's convolution.
#[derive(Debug, Clone)]
pub struct CnnMasks {
    pub layers: Vec<Vec<f64>>,
}

pub fn sample_cnn_masks(cfg: &CnnConfig, batch: usize, rng: &mut ChaCha8Rng) -> CnnMasks {
    let layers = (1..cfg.n_convs())
        .map(|j| {
            let len = batch * cfg.input_len * cfg.conv_in_channels(j);
            sample_mask(rng, len, cfg.dropout_rate)
        })
        .collect();
    CnnMasks { layers }
}

/// Activations recorded by a training-mode forward pass, sufficient to run
/// the backward pass and to update batch-norm running moments.
pub struct CnnCache {
    batch: usize,
    /// Input to convolution `j` (post-dropout for `j >= 1`).
    conv_inputs: Vec<Vec<f64>>,
    bn_xhat: Vec<Vec<f64>>,
    pub(crate) bn_mean: Vec<Vec<f64>>,
    pub(crate) bn_var: Vec<Vec<f64>>,
    relu_out: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

fn conv1d_forward(
    x: &[f64],
    batch: usize,
    t_len: usize,
    cin: usize,
    cout: usize,
    k: usize,
    w: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let pad_left = (k - 1) / 2;
    let mut y = vec![0.0; batch * t_len * cout];
    for b in 0..batch {
        for t0 in 0..t_len {
            for co in 0..cout {
                let mut acc = bias[co];
                for kk in 0..k {
                    let ti = t0 + kk;
                    if ti < pad_left || ti - pad_left >= t_len {
                        continue;
                    }
                    let ti = ti - pad_left;
                    let xr = &x[(b * t_len + ti) * cin..][..cin];
                    let wr = &w[(co * k + kk) * cin..][..cin];
                    for ci in 0..cin {
                        acc += xr[ci] * wr[ci];
                    }
                }
                y[(b * t_len + t0) * cout + co] = acc;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    t_len: usize,
    cin: usize,
    cout: usize,
    k: usize,
    w: &[f64],
    dw: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let pad_left = (k - 1) / 2;
    let mut dx = vec![0.0; batch * t_len * cin];
    for b in 0..batch {
        for t0 in 0..t_len {
            for co in 0..cout {
                let g = dy[(b * t_len + t0) * cout + co];
                if g == 0.0 {
                    continue;
                }
                dbias[co] += g;
                for kk in 0..k {
                    let ti = t0 + kk;
                    if ti < pad_left || ti - pad_left >= t_len {
                        continue;
                    }
                    let ti = ti - pad_left;
                    let xr = &x[(b * t_len + ti) * cin..][..cin];
                    let dxr = &mut dx[(b * t_len + ti) * cin..][..cin];
                    let wr = &w[(co * k + kk) * cin..][..cin];
                    let dwr = &mut dw[(co * k + kk) * cin..][..cin];
                    for ci in 0..cin {
                        dwr[ci] += g * xr[ci];
                        dxr[ci] += g * wr[ci];
                    }
                }
            }
        }
    }
    dx
}

struct BnTrainOut {
    y: Vec<f64>,
    xhat: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Batch normalization over the batch and temporal axes, per channel, using
/// the biased batch variance.
fn bn_forward_train(x: &[f64], n_rows: usize, c: usize, gamma: &[f64], beta: &[f64]) -> BnTrainOut {
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for row in 0..n_rows {
        for ch in 0..c {
            mean[ch] += x[row * c + ch];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_rows as f64);
    for row in 0..n_rows {
        for ch in 0..c {
            let d = x[row * c + ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n_rows as f64);

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for row in 0..n_rows {
        for ch in 0..c {
            let i = row * c + ch;
            xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
            y[i] = gamma[ch] * xhat[i] + beta[ch];
        }
    }
    BnTrainOut { y, xhat, mean, var }
}

fn bn_forward_infer(
    x: &[f64],
    n_rows: usize,
    c: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for row in 0..n_rows {
        for ch in 0..c {
            let i = row * c + ch;
            let inv_std = 1.0 / (running_var[ch] + BN_EPSILON).sqrt();
            y[i] = gamma[ch] * (x[i] - running_mean[ch]) * inv_std + beta[ch];
        }
    }
    y
}

/// Backward through training-mode batch norm; returns dx and accumulates
/// dgamma/dbeta.
fn bn_backward(
    xhat: &[f64],
    var: &[f64],
    n_rows: usize,
    c: usize,
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let n = n_rows as f64;
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    for row in 0..n_rows {
        for ch in 0..c {
            let i = row * c + ch;
            dgamma[ch] += dy[i] * xhat[i];
            dbeta[ch] += dy[i];
            let dxhat = dy[i] * gamma[ch];
            sum_dxhat[ch] += dxhat;
            sum_dxhat_xhat[ch] += dxhat * xhat[i];
        }
    }
    let mut dx = vec![0.0; xhat.len()];
    for row in 0..n_rows {
        for ch in 0..c {
            let i = row * c + ch;
            let inv_std = 1.0 / (var[ch] + BN_EPSILON).sqrt();
            let dxhat = dy[i] * gamma[ch];
            dx[i] = inv_std * (dxhat - sum_dxhat[ch] / n - xhat[i] * sum_dxhat_xhat[ch] / n);
        }
    }
    dx
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn relu_backward(out: &[f64], dy: &[f64]) -> Vec<f64> {
    out.iter()
        .zip(dy)
        .map(|(o, d)| if *o > 0.0 { *d } else { 0.0 })
        .collect()
}

fn check_input(cfg: &CnnConfig, x: &[f64], batch: usize) -> Result<(), ModelError> {
    if batch == 0 || x.len() != batch * cfg.input_len {
        return Err(ModelError::InvalidInput(format!(
            "expected {} values for a batch of {batch} windows of {}, got {}",
            batch * cfg.input_len,
            cfg.input_len,
            x.len()
        )));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(ModelError::InvalidInput(format!(
            "non-finite feature value {v}"
        )));
    }
    Ok(())
}

fn check_layout(cfg: &CnnConfig, params: &NetParams) -> Result<(), ModelError> {
    if params.layout() != cfg.layout().as_slice() {
        return Err(ModelError::InvalidInput(
            "parameter layout does not match the network configuration".into(),
        ));
    }
    Ok(())
}

/// Training-mode forward pass with explicit dropout masks and batch
/// statistics; returns risks and the cache needed by [`cnn_backward`].
pub fn cnn_forward_train(
    params: &NetParams,
    cfg: &CnnConfig,
    x: &[f64],
    batch: usize,
    masks: &CnnMasks,
) -> Result<(Vec<f64>, CnnCache), ModelError> {
    cfg.validate()?;
    check_layout(cfg, params)?;
    check_input(cfg, x, batch)?;
    let n = cfg.n_convs();
    if masks.layers.len() != n - 1 {
        return Err(ModelError::InvalidInput(format!(
            "expected {} dropout masks, got {}",
            n - 1,
            masks.layers.len()
        )));
    }
    for (j, mask) in masks.layers.iter().enumerate() {
        let want = batch * cfg.input_len * cfg.conv_in_channels(j + 1);
        if mask.len() != want {
            return Err(ModelError::InvalidInput(format!(
                "dropout mask {j} has {} entries, expected {want}",
                mask.len()
            )));
        }
    }

    let t_len = cfg.input_len;
    let bn_ch = cfg.bn_channels();
    let mut cache = CnnCache {
        batch,
        conv_inputs: Vec::with_capacity(n),
        bn_xhat: Vec::with_capacity(n + 1),
        bn_mean: Vec::with_capacity(n + 1),
        bn_var: Vec::with_capacity(n + 1),
        relu_out: Vec::with_capacity(n + 1),
        logits: Vec::new(),
    };

    let bn_train = |k: usize, input: &[f64], cache: &mut CnnCache| -> Vec<f64> {
        let out = bn_forward_train(
            input,
            batch * t_len,
            bn_ch[k],
            params.tensor(&format!("bn{k}.gamma")),
            params.tensor(&format!("bn{k}.beta")),
        );
        cache.bn_xhat.push(out.xhat);
        cache.bn_mean.push(out.mean);
        cache.bn_var.push(out.var);
        out.y
    };

    cache.conv_inputs.push(x.to_vec());
    let mut cur = conv1d_forward(
        x,
        batch,
        t_len,
        1,
        cfg.layer_filters[0],
        cfg.kernel_size,
        params.tensor("conv0.weight"),
        params.tensor("conv0.bias"),
    );
    cur = bn_train(0, &cur, &mut cache);
    cur = relu(&cur);
    cache.relu_out.push(cur.clone());

    for j in 1..n {
        cur = bn_train(j, &cur, &mut cache);
        cur = relu(&cur);
        cache.relu_out.push(cur.clone());
        let dropped: Vec<f64> = cur
            .iter()
            .zip(&masks.layers[j - 1])
            .map(|(v, m)| v * m)
            .collect();
        cache.conv_inputs.push(dropped);
        cur = conv1d_forward(
            cache.conv_inputs.last().unwrap(),
            batch,
            t_len,
            cfg.conv_in_channels(j),
            cfg.layer_filters[j],
            cfg.kernel_size,
            params.tensor(&format!("conv{j}.weight")),
            params.tensor(&format!("conv{j}.bias")),
        );
    }

    cur = bn_train(n, &cur, &mut cache);
    cur = relu(&cur);
    cache.relu_out.push(cur);

    let dense_in = cache.relu_out.last().unwrap();
    let flat = t_len * cfg.layer_filters[n - 1];
    let w = params.tensor("dense.weight");
    let bias = params.tensor("dense.bias")[0];
    for b in 0..batch {
        cache
            .logits
            .push(bias + crate::math::dot(w, &dense_in[b * flat..][..flat]));
    }
    let risks = cache.logits.iter().map(|z| sigmoid(*z)).collect();
    Ok((risks, cache))
}

/// Inference forward core: logits plus every post-ReLU activation, in chain
/// order. Batch norm uses only the stored running moments and dropout is
/// inactive, so each example's output is independent of the rest of the
/// batch.
fn infer_forward_core(
    params: &NetParams,
    cfg: &CnnConfig,
    x: &[f64],
    batch: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
    cfg.validate()?;
    check_layout(cfg, params)?;
    check_input(cfg, x, batch)?;
    let n = cfg.n_convs();
    let t_len = cfg.input_len;
    let bn_ch = cfg.bn_channels();

    let bn_infer = |k: usize, input: &[f64]| -> Vec<f64> {
        bn_forward_infer(
            input,
            batch * t_len,
            bn_ch[k],
            params.tensor(&format!("bn{k}.gamma")),
            params.tensor(&format!("bn{k}.beta")),
            params.tensor(&format!("bn{k}.running_mean")),
            params.tensor(&format!("bn{k}.running_var")),
        )
    };

    let mut relu_outs = Vec::with_capacity(n + 1);
    let mut cur = conv1d_forward(
        x,
        batch,
        t_len,
        1,
        cfg.layer_filters[0],
        cfg.kernel_size,
        params.tensor("conv0.weight"),
        params.tensor("conv0.bias"),
    );
    cur = relu(&bn_infer(0, &cur));
    relu_outs.push(cur.clone());
    for j in 1..n {
        cur = relu(&bn_infer(j, &cur));
        relu_outs.push(cur.clone());
        cur = conv1d_forward(
            &cur,
            batch,
            t_len,
            cfg.conv_in_channels(j),
            cfg.layer_filters[j],
            cfg.kernel_size,
            params.tensor(&format!("conv{j}.weight")),
            params.tensor(&format!("conv{j}.bias")),
        );
    }
    cur = relu(&bn_infer(n, &cur));
    relu_outs.push(cur);

    let last = relu_outs.last().unwrap();
    let flat = t_len * cfg.layer_filters[n - 1];
    let w = params.tensor("dense.weight");
    let bias = params.tensor("dense.bias")[0];
    let logits = (0..batch)
        .map(|b| bias + crate::math::dot(w, &last[b * flat..][..flat]))
        .collect();
    Ok((logits, relu_outs))
}

/// Inference forward pass; batch norm uses only the stored running moments,
/// dropout is inactive, so each example's output is independent of the rest
/// of the batch.
pub fn cnn_forward_infer(
    params: &NetParams,
    cfg: &CnnConfig,
    x: &[f64],
    batch: usize,
) -> Result<Vec<f64>, ModelError> {
    let (logits, _) = infer_forward_core(params, cfg, x, batch)?;
    Ok(logits.iter().map(|z| sigmoid(*z)).collect())
}

/// Gradient of d(conv output)/d(conv input) only — weights fixed.
fn conv1d_backward_input(
    dy: &[f64],
    batch: usize,
    t_len: usize,
    cin: usize,
    cout: usize,
    k: usize,
    w: &[f64],
) -> Vec<f64> {
    let pad_left = (k - 1) / 2;
    let mut dx = vec![0.0; batch * t_len * cin];
    for b in 0..batch {
        for t0 in 0..t_len {
            for co in 0..cout {
                let g = dy[(b * t_len + t0) * cout + co];
                if g == 0.0 {
                    continue;
                }
                for kk in 0..k {
                    let ti = t0 + kk;
                    if ti < pad_left || ti - pad_left >= t_len {
                        continue;
                    }
                    let ti = ti - pad_left;
                    let dxr = &mut dx[(b * t_len + ti) * cin..][..cin];
                    let wr = &w[(co * k + kk) * cin..][..cin];
                    for ci in 0..cin {
                        dxr[ci] += g * wr[ci];
                    }
                }
            }
        }
    }
    dx
}

/// Per-example gradient of the pre-sigmoid logit with respect to the input
/// window, in inference mode; returns `(logits, gradients)` with gradients
/// laid out `(batch, input_len)`. Used by attribution.
pub fn cnn_input_gradient(
    params: &NetParams,
    cfg: &CnnConfig,
    x: &[f64],
    batch: usize,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let (logits, relu_outs) = infer_forward_core(params, cfg, x, batch)?;
    let n = cfg.n_convs();
    let t_len = cfg.input_len;
    let bn_ch = cfg.bn_channels();

    // Inference batch norm is a fixed per-channel affine map.
    let bn_scale_bwd = |k: usize, dy: &[f64]| -> Vec<f64> {
        let gamma = params.tensor(&format!("bn{k}.gamma"));
        let rvar = params.tensor(&format!("bn{k}.running_var"));
        let c = bn_ch[k];
        let scale: Vec<f64> = (0..c)
            .map(|ch| gamma[ch] / (rvar[ch] + BN_EPSILON).sqrt())
            .collect();
        dy.iter()
            .enumerate()
            .map(|(i, d)| d * scale[i % c])
            .collect()
    };

    let flat = t_len * cfg.layer_filters[n - 1];
    let w = params.tensor("dense.weight");
    let mut cur = vec![0.0; batch * flat];
    for b in 0..batch {
        cur[b * flat..][..flat].copy_from_slice(w);
    }
    cur = relu_backward(&relu_outs[n], &cur);
    cur = bn_scale_bwd(n, &cur);
    for j in (1..n).rev() {
        cur = conv1d_backward_input(
            &cur,
            batch,
            t_len,
            cfg.conv_in_channels(j),
            cfg.layer_filters[j],
            cfg.kernel_size,
            params.tensor(&format!("conv{j}.weight")),
        );
        cur = relu_backward(&relu_outs[j], &cur);
        cur = bn_scale_bwd(j, &cur);
    }
    cur = relu_backward(&relu_outs[0], &cur);
    cur = bn_scale_bwd(0, &cur);
    let dx = conv1d_backward_input(
        &cur,
        batch,
        t_len,
        1,
        cfg.layer_filters[0],
        cfg.kernel_size,
        params.tensor("conv0.weight"),
    );
    Ok((logits, dx))
}

/// Gradient of the mean loss with respect to every parameter, given
/// dLoss/dlogit per example; aligned with `params.values()`.
pub fn cnn_backward(
    params: &NetParams,
    cfg: &CnnConfig,
    cache: &CnnCache,
    masks: &CnnMasks,
    dlogits: &[f64],
) -> Vec<f64> {
    let n = cfg.n_convs();
    let batch = cache.batch;
    let t_len = cfg.input_len;
    let bn_ch = cfg.bn_channels();
    let mut grads = vec![0.0; params.len()];

    // Dense layer.
    let flat = t_len * cfg.layer_filters[n - 1];
    let dense_in = cache.relu_out.last().unwrap();
    let w = params.tensor("dense.weight");
    let mut d_dense_in = vec![0.0; dense_in.len()];
    {
        let r = params.range_of("dense.weight");
        let (dw, rest) = grads[r.start..].split_at_mut(r.len());
        let db = &mut rest[..1];
        for b in 0..batch {
            let g = dlogits[b];
            db[0] += g;
            let row = &dense_in[b * flat..][..flat];
            let drow = &mut d_dense_in[b * flat..][..flat];
            for i in 0..flat {
                dw[i] += g * row[i];
                drow[i] = g * w[i];
            }
        }
    }

    let bn_bwd = |k: usize, dy: &[f64], grads: &mut Vec<f64>| -> Vec<f64> {
        let rg = params.range_of(&format!("bn{k}.gamma"));
        let rb = params.range_of(&format!("bn{k}.beta"));
        let mut dgamma = vec![0.0; bn_ch[k]];
        let mut dbeta = vec![0.0; bn_ch[k]];
        let dx = bn_backward(
            &cache.bn_xhat[k],
            &cache.bn_var[k],
            batch * t_len,
            bn_ch[k],
            params.tensor(&format!("bn{k}.gamma")),
            dy,
            &mut dgamma,
            &mut dbeta,
        );
        grads[rg].copy_from_slice(&dgamma);
        grads[rb].copy_from_slice(&dbeta);
        dx
    };

    // Final (bn, relu, dense) block, backward.
    let mut cur = relu_backward(&cache.relu_out[n], &d_dense_in);
    cur = bn_bwd(n, &cur, &mut grads);

    // (bn, relu, dropout, conv) blocks, backward.
    for j in (1..n).rev() {
        let cin = cfg.conv_in_channels(j);
        let cout = cfg.layer_filters[j];
        let rw = params.range_of(&format!("conv{j}.weight"));
        let rb = params.range_of(&format!("conv{j}.bias"));
        let mut dw = vec![0.0; rw.len()];
        let mut db = vec![0.0; rb.len()];
        let d_dropped = conv1d_backward(
            &cache.conv_inputs[j],
            &cur,
            batch,
            t_len,
            cin,
            cout,
            cfg.kernel_size,
            params.tensor(&format!("conv{j}.weight")),
            &mut dw,
            &mut db,
        );
        grads[rw].copy_from_slice(&dw);
        grads[rb].copy_from_slice(&db);
        let d_relu: Vec<f64> = d_dropped
            .iter()
            .zip(&masks.layers[j - 1])
            .map(|(d, m)| d * m)
            .collect();
        cur = relu_backward(&cache.relu_out[j], &d_relu);
        cur = bn_bwd(j, &cur, &mut grads);
    }

    // Initial (conv, bn, relu) block, backward.
    cur = relu_backward(&cache.relu_out[0], &cur);
    cur = bn_bwd(0, &cur, &mut grads);
    let rw = params.range_of("conv0.weight");
    let rb = params.range_of("conv0.bias");
    let mut dw = vec![0.0; rw.len()];
    let mut db = vec![0.0; rb.len()];
    conv1d_backward(
        &cache.conv_inputs[0],
        &cur,
        batch,
        t_len,
        1,
        cfg.layer_filters[0],
        cfg.kernel_size,
        params.tensor("conv0.weight"),
        &mut dw,
        &mut db,
    );
    grads[rw].copy_from_slice(&dw);
    grads[rb].copy_from_slice(&db);

    grads
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub config: CnnConfig,
    pub params: NetParams,
}

impl CnnModel {
    /// Risk for one feature window; identical bit for bit to running the
    /// window through a batched inference pass.
    pub fn predict(&self, window: &[f64]) -> Result<f64, ModelError> {
        Ok(cnn_forward_infer(&self.params, &self.config, window, 1)?[0])
    }

    pub fn predict_batch(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        // Chunked so arbitrarily large inputs keep activation buffers small;
        // inference is per-example, so chunking cannot change any output bit.
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(super::INFER_CHUNK.max(1)) {
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            out.extend(cnn_forward_infer(&self.params, &self.config, &flat, chunk.len())?);
        }
        Ok(out)
    }
}

/// Train the convolutional net with Adam on class-balanced batches.
///
/// Returns the model and the exponentially smoothed per-step training loss.
/// `initial` resumes from existing parameters (layout must match).
pub fn train_cnn(
    features: &[Vec<f64>],
    labels: &[u8],
    cfg: &CnnConfig,
    initial: Option<NetParams>,
) -> Result<(CnnModel, Vec<f64>), ModelError> {
    cfg.validate()?;
    if features.len() != labels.len() || features.is_empty() {
        return Err(ModelError::InvalidInput(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    for row in features {
        if row.len() != cfg.input_len || row.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidInput(format!(
                "feature rows must hold {} finite values",
                cfg.input_len
            )));
        }
    }

    let mut params = match initial {
        Some(p) => {
            check_layout(cfg, &p)?;
            p.validate_finite()?;
            p
        }
        None => init_cnn_params(cfg, mix_seed(cfg.seed, 0x11)),
    };
    let mut batches = balanced_batches(labels, cfg.batch_size, mix_seed(cfg.seed, 0x22))
        .map_err(|e| ModelError::InvalidInput(e.to_string()))?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x33));
    let mut adam = Adam::new(cfg.adam, params.len());
    let trainable = params.trainable_mask();
    let mut track = LossTrack::new(cfg.steps);
    let n_bn = cfg.n_convs() + 1;

    for step in 0..cfg.steps {
        let idx = batches.next().expect("balanced batch stream is infinite");
        let mut x = Vec::with_capacity(idx.len() * cfg.input_len);
        let mut y = Vec::with_capacity(idx.len());
        for i in &idx {
            x.extend_from_slice(&features[*i]);
            y.push(f64::from(labels[*i]));
        }
        let masks = sample_cnn_masks(cfg, idx.len(), &mut mask_rng);
        let (_, cache) = cnn_forward_train(&params, cfg, &x, idx.len(), &masks)?;
        let (loss, dlogits) = bce_from_logits(&cache.logits, &y);
        track.push(step, loss)?;
        let grads = cnn_backward(&params, cfg, &cache, &masks, &dlogits);
        adam.step(params.values_mut(), &grads, &trainable);
        if params.validate_finite().is_err() {
            return Err(ModelError::Diverged {
                step,
                reason: format!(
                    "parameters became non-finite after the update; last finite smoothed loss {}",
                    track.smoothed.last().copied().unwrap_or(f64::NAN)
                ),
            });
        }
        for k in 0..n_bn {
            let mean = cache.bn_mean[k].clone();
            let var = cache.bn_var[k].clone();
            for (r, m) in params
                .tensor_mut(&format!("bn{k}.running_mean"))
                .iter_mut()
                .zip(&mean)
            {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in params
                .tensor_mut(&format!("bn{k}.running_var"))
                .iter_mut()
                .zip(&var)
            {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    Ok((
        CnnModel {
            config: cfg.clone(),
            params,
        },
        track.smoothed,
    ))
}
