//! Two-layer LSTM risk model over the 60-minute window.
//!
//! The first layer consumes the window one value per minute and emits its
//! full hidden sequence; the second layer consumes that sequence and only its
//! final hidden state feeds a dense layer and sigmoid. Ordinary dropout sits
//! between layers and before the dense layer; recurrent dropout is
//! variational — one mask per example and layer, applied to the previous
//! hidden state at every timestep. All gradients are hand-derived
//! backpropagation through time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bce_from_logits, init_uniform, sample_mask, LossTrack, NetParams, RmsProp, RmsPropConfig,
    TensorSpec,
};
use crate::math::{mix_seed, sigmoid};
use crate::model::ModelError;
use crate::pipeline::balanced_batches;

const GATES: [char; 4] = ['i', 'f', 'g', 'o'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub input_len: usize,
    /// Hidden widths of the two stacked layers.
    pub hidden_sizes: Vec<usize>,
    /// Dropout between layers and before the dense layer.
    pub dropout_rate: f64,
    /// Variational dropout on the recurrent hidden input.
    pub recurrent_dropout_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub rmsprop: RmsPropConfig,
    pub seed: u64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            input_len: crate::pipeline::WINDOW_WIDTH,
            hidden_sizes: vec![32, 32],
            dropout_rate: 0.3,
            recurrent_dropout_rate: 0.2,
            batch_size: 64,
            steps: 800,
            rmsprop: RmsPropConfig::default(),
            seed: 7,
        }
    }
}

impl LstmConfig {
    /// Full-size configuration matching the original two 200-unit layers.
    pub fn full_scale() -> Self {
        Self {
            hidden_sizes: vec![200, 200],
            steps: 3000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let field = |field: &'static str, reason: String| ModelError::Config { field, reason };
        if self.input_len == 0 {
            return Err(field("input_len", "must be positive".into()));
        }
        if self.hidden_sizes.len() != 2 || self.hidden_sizes.iter().any(|h| *h == 0) {
            return Err(field(
                "hidden_sizes",
                format!("need exactly two nonzero widths, got {:?}", self.hidden_sizes),
            ));
        }
        for (name, rate) in [
            ("dropout_rate", self.dropout_rate),
            ("recurrent_dropout_rate", self.recurrent_dropout_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(field(name, format!("must lie in [0, 1), got {rate}")));
            }
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
        let r = &self.rmsprop;
        if !(r.learning_rate.is_finite() && r.learning_rate >= 0.0) {
            return Err(field("rmsprop.learning_rate", "must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&r.rho) {
            return Err(field("rmsprop.rho", "must lie in [0, 1)".into()));
        }
        if !(r.epsilon > 0.0) {
            return Err(field("rmsprop.epsilon", "must be positive".into()));
        }
        Ok(())
    }

    fn in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.hidden_sizes[layer - 1]
        }
    }

    fn layout(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        for (l, h) in self.hidden_sizes.iter().enumerate() {
            let in_dim = self.in_dim(l);
            for gate in GATES {
                out.push(TensorSpec {
                    name: format!("lstm{l}.w_{gate}"),
                    shape: vec![*h, in_dim],
                    trainable: true,
                });
                out.push(TensorSpec {
                    name: format!("lstm{l}.u_{gate}"),
                    shape: vec![*h, *h],
                    trainable: true,
                });
                out.push(TensorSpec {
                    name: format!("lstm{l}.b_{gate}"),
                    shape: vec![*h],
                    trainable: true,
                });
            }
        }
        out.push(TensorSpec {
            name: "dense.weight".into(),
            shape: vec![self.hidden_sizes[1]],
            trainable: true,
        });
        out.push(TensorSpec {
            name: "dense.bias".into(),
            shape: vec![1],
            trainable: true,
        });
        out
    }
}

/// Fresh parameters: weights uniform in ±1/sqrt(fan_in), biases zero except
/// the forget-gate bias, which starts at one.
pub fn init_lstm_params(cfg: &LstmConfig, seed: u64) -> NetParams {
    let mut params = NetParams::zeros(cfg.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, h) in cfg.hidden_sizes.iter().enumerate() {
        let in_dim = cfg.in_dim(l);
        for gate in GATES {
            init_uniform(&mut rng, params.tensor_mut(&format!("lstm{l}.w_{gate}")), in_dim);
            init_uniform(&mut rng, params.tensor_mut(&format!("lstm{l}.u_{gate}")), *h);
        }
        params
            .tensor_mut(&format!("lstm{l}.b_f"))
            .iter_mut()
            .for_each(|v| *v = 1.0);
    }
    init_uniform(&mut rng, params.tensor_mut("dense.weight"), cfg.hidden_sizes[1]);
    params
}

/// Dropout masks for one training batch.
#[derive(Debug, Clone)]
pub struct LstmMasks {
    /// Per layer, `(batch, hidden)` — reused at every timestep.
    pub recurrent: [Vec<f64>; 2],
    /// Between the layers, `(batch, time, hidden_1)`.
    pub inter: Vec<f64>,
    /// Before the dense layer, `(batch, hidden_2)`.
    pub final_drop: Vec<f64>,
}

pub fn sample_lstm_masks(cfg: &LstmConfig, batch: usize, rng: &mut ChaCha8Rng) -> LstmMasks {
    let (h1, h2) = (cfg.hidden_sizes[0], cfg.hidden_sizes[1]);
    LstmMasks {
        recurrent: [
            sample_mask(rng, batch * h1, cfg.recurrent_dropout_rate),
            sample_mask(rng, batch * h2, cfg.recurrent_dropout_rate),
        ],
        inter: sample_mask(rng, batch * cfg.input_len * h1, cfg.dropout_rate),
        final_drop: sample_mask(rng, batch * h2, cfg.dropout_rate),
    }
}

/// Borrowed per-gate parameter slices for one layer.
struct LayerParams<'a> {
    w: [&'a [f64]; 4],
    u: [&'a [f64]; 4],
    b: [&'a [f64]; 4],
}

fn layer_params<'a>(params: &'a NetParams, l: usize) -> LayerParams<'a> {
    let get = |kind: char, gate: char| params.tensor(&format!("lstm{l}.{kind}_{gate}"));
    LayerParams {
        w: [get('w', 'i'), get('w', 'f'), get('w', 'g'), get('w', 'o')],
        u: [get('u', 'i'), get('u', 'f'), get('u', 'g'), get('u', 'o')],
        b: [get('b', 'i'), get('b', 'f'), get('b', 'g'), get('b', 'o')],
    }
}

/// Everything one layer's forward pass records for backpropagation through
/// time, indexed `[t]`, values flattened `(batch, hidden)`.
struct LayerCache {
    inputs: Vec<Vec<f64>>,
    h_masked: Vec<Vec<f64>>,
    c_prev: Vec<Vec<f64>>,
    gates: [Vec<Vec<f64>>; 4],
    tanh_c: Vec<Vec<f64>>,
    h_seq: Vec<Vec<f64>>,
}

pub struct LstmCache {
    batch: usize,
    layers: [LayerCache; 2],
    final_dropped: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Run one layer over the whole sequence. `rmask` is `None` at inference.
fn run_layer(
    lp: &LayerParams,
    inputs: Vec<Vec<f64>>,
    batch: usize,
    in_dim: usize,
    h_dim: usize,
    rmask: Option<&[f64]>,
) -> LayerCache {
    let t_len = inputs.len();
    let mut cache = LayerCache {
        inputs,
        h_masked: Vec::with_capacity(t_len),
        c_prev: Vec::with_capacity(t_len),
        gates: [
            Vec::with_capacity(t_len),
            Vec::with_capacity(t_len),
            Vec::with_capacity(t_len),
            Vec::with_capacity(t_len),
        ],
        tanh_c: Vec::with_capacity(t_len),
        h_seq: Vec::with_capacity(t_len),
    };
    let mut h = vec![0.0; batch * h_dim];
    let mut c = vec![0.0; batch * h_dim];
    for t in 0..t_len {
        let x_t = &cache.inputs[t];
        let h_masked: Vec<f64> = match rmask {
            Some(m) => h.iter().zip(m).map(|(v, m)| v * m).collect(),
            None => h.clone(),
        };
        let mut acts = [
            vec![0.0; batch * h_dim],
            vec![0.0; batch * h_dim],
            vec![0.0; batch * h_dim],
            vec![0.0; batch * h_dim],
        ];
        for b in 0..batch {
            let x_row = &x_t[b * in_dim..][..in_dim];
            let h_row = &h_masked[b * h_dim..][..h_dim];
            for gate in 0..4 {
                let out = &mut acts[gate][b * h_dim..][..h_dim];
                for hh in 0..h_dim {
                    out[hh] = lp.b[gate][hh]
                        + crate::math::dot(&lp.w[gate][hh * in_dim..][..in_dim], x_row)
                        + crate::math::dot(&lp.u[gate][hh * h_dim..][..h_dim], h_row);
                }
            }
        }
        let i: Vec<f64> = acts[0].iter().map(|a| sigmoid(*a)).collect();
        let f: Vec<f64> = acts[1].iter().map(|a| sigmoid(*a)).collect();
        let g: Vec<f64> = acts[2].iter().map(|a| a.tanh()).collect();
        let o: Vec<f64> = acts[3].iter().map(|a| sigmoid(*a)).collect();
        cache.c_prev.push(c.clone());
        let mut tanh_c = vec![0.0; batch * h_dim];
        for k in 0..batch * h_dim {
            c[k] = f[k] * c[k] + i[k] * g[k];
            tanh_c[k] = c[k].tanh();
            h[k] = o[k] * tanh_c[k];
        }
        cache.h_masked.push(h_masked);
        cache.gates[0].push(i);
        cache.gates[1].push(f);
        cache.gates[2].push(g);
        cache.gates[3].push(o);
        cache.tanh_c.push(tanh_c);
        cache.h_seq.push(h.clone());
    }
    cache
}

/// BPTT for one layer. `dh_out[t]` is the loss gradient arriving at `h_t`
/// from above; returns the gradient on the layer's input sequence and
/// accumulates parameter gradients into `grads`.
#[allow(clippy::too_many_arguments)]
fn layer_backward(
    lp: &LayerParams,
    cache: &LayerCache,
    dh_out: &[Vec<f64>],
    batch: usize,
    in_dim: usize,
    h_dim: usize,
    rmask: Option<&[f64]>,
    param_ranges: &LayerGradRanges,
    grads: &mut [f64],
) -> Vec<Vec<f64>> {
    let t_len = cache.inputs.len();
    let n = batch * h_dim;
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut dx_seq = vec![vec![0.0; batch * in_dim]; t_len];

    for t in (0..t_len).rev() {
        let (i, f, g, o) = (
            &cache.gates[0][t],
            &cache.gates[1][t],
            &cache.gates[2][t],
            &cache.gates[3][t],
        );
        let tanh_c = &cache.tanh_c[t];
        let c_prev = &cache.c_prev[t];
        let mut da = [
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        ];
        let mut dc_here = vec![0.0; n];
        for k in 0..n {
            let dh = dh_out[t][k] + dh_next[k];
            let dc = dc_next[k] + dh * o[k] * (1.0 - tanh_c[k] * tanh_c[k]);
            da[0][k] = dc * g[k] * i[k] * (1.0 - i[k]);
            da[1][k] = dc * c_prev[k] * f[k] * (1.0 - f[k]);
            da[2][k] = dc * i[k] * (1.0 - g[k] * g[k]);
            da[3][k] = dh * tanh_c[k] * o[k] * (1.0 - o[k]);
            dc_here[k] = dc * f[k];
        }
        dc_next = dc_here;

        let x_t = &cache.inputs[t];
        let h_masked = &cache.h_masked[t];
        let dx_t = &mut dx_seq[t];
        let mut dh_masked = vec![0.0; n];
        for gate in 0..4 {
            let dw = &mut grads[param_ranges.w[gate].clone()];
            for b in 0..batch {
                let da_row = &da[gate][b * h_dim..][..h_dim];
                let x_row = &x_t[b * in_dim..][..in_dim];
                for hh in 0..h_dim {
                    let a = da_row[hh];
                    if a == 0.0 {
                        continue;
                    }
                    let wrow = &mut dw[hh * in_dim..][..in_dim];
                    for (wv, xv) in wrow.iter_mut().zip(x_row) {
                        *wv += a * xv;
                    }
                }
            }
            let du = &mut grads[param_ranges.u[gate].clone()];
            for b in 0..batch {
                let da_row = &da[gate][b * h_dim..][..h_dim];
                let h_row = &h_masked[b * h_dim..][..h_dim];
                for hh in 0..h_dim {
                    let a = da_row[hh];
                    if a == 0.0 {
                        continue;
                    }
                    let urow = &mut du[hh * h_dim..][..h_dim];
                    for (uv, hv) in urow.iter_mut().zip(h_row) {
                        *uv += a * hv;
                    }
                }
            }
            let db = &mut grads[param_ranges.b[gate].clone()];
            for b in 0..batch {
                let da_row = &da[gate][b * h_dim..][..h_dim];
                for hh in 0..h_dim {
                    db[hh] += da_row[hh];
                }
            }
            // Input and recurrent gradients: W^T da and U^T da.
            for b in 0..batch {
                let da_row = &da[gate][b * h_dim..][..h_dim];
                let dx_row = &mut dx_t[b * in_dim..][..in_dim];
                let dhm_row = &mut dh_masked[b * h_dim..][..h_dim];
                for hh in 0..h_dim {
                    let a = da_row[hh];
                    if a == 0.0 {
                        continue;
                    }
                    let wrow = &lp.w[gate][hh * in_dim..][..in_dim];
                    for (dxv, wv) in dx_row.iter_mut().zip(wrow) {
                        *dxv += a * wv;
                    }
                    let urow = &lp.u[gate][hh * h_dim..][..h_dim];
                    for (dhv, uv) in dhm_row.iter_mut().zip(urow) {
                        *dhv += a * uv;
                    }
                }
            }
        }
        dh_next = match rmask {
            Some(m) => dh_masked.iter().zip(m).map(|(d, m)| d * m).collect(),
            None => dh_masked,
        };
    }
    dx_seq
}

/// Precomputed gradient-slice ranges for one layer's twelve tensors.
struct LayerGradRanges {
    w: [std::ops::Range<usize>; 4],
    u: [std::ops::Range<usize>; 4],
    b: [std::ops::Range<usize>; 4],
}

fn layer_grad_ranges(params: &NetParams, l: usize) -> LayerGradRanges {
    let get = |kind: char, gate: char| params.range_of(&format!("lstm{l}.{kind}_{gate}"));
    LayerGradRanges {
        w: [get('w', 'i'), get('w', 'f'), get('w', 'g'), get('w', 'o')],
        u: [get('u', 'i'), get('u', 'f'), get('u', 'g'), get('u', 'o')],
        b: [get('b', 'i'), get('b', 'f'), get('b', 'g'), get('b', 'o')],
    }
}

fn check_input(cfg: &LstmConfig, x: &[f64], batch: usize) -> Result<(), ModelError> {
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

fn check_layout(cfg: &LstmConfig, params: &NetParams) -> Result<(), ModelError> {
    if params.layout() != cfg.layout().as_slice() {
        return Err(ModelError::InvalidInput(
            "parameter layout does not match the network configuration".into(),
        ));
    }
    Ok(())
}

fn split_time_major(x: &[f64], batch: usize, t_len: usize) -> Vec<Vec<f64>> {
    // Input arrives as (batch, time); layers consume per-timestep (batch, 1).
    (0..t_len)
        .map(|t| (0..batch).map(|b| x[b * t_len + t]).collect())
        .collect()
}

fn forward_impl(
    params: &NetParams,
    cfg: &LstmConfig,
    x: &[f64],
    batch: usize,
    masks: Option<&LstmMasks>,
) -> Result<LstmCache, ModelError> {
    cfg.validate()?;
    check_layout(cfg, params)?;
    check_input(cfg, x, batch)?;
    if let Some(m) = masks {
        let (h1, h2) = (cfg.hidden_sizes[0], cfg.hidden_sizes[1]);
        let want = [
            (m.recurrent[0].len(), batch * h1, "recurrent mask 0"),
            (m.recurrent[1].len(), batch * h2, "recurrent mask 1"),
            (m.inter.len(), batch * cfg.input_len * h1, "inter-layer mask"),
            (m.final_drop.len(), batch * h2, "final mask"),
        ];
        for (got, need, name) in want {
            if got != need {
                return Err(ModelError::InvalidInput(format!(
                    "{name} has {got} entries, expected {need}"
                )));
            }
        }
    }

    let t_len = cfg.input_len;
    let (h1, h2) = (cfg.hidden_sizes[0], cfg.hidden_sizes[1]);
    let lp0 = layer_params(params, 0);
    let lp1 = layer_params(params, 1);

    let layer0 = run_layer(
        &lp0,
        split_time_major(x, batch, t_len),
        batch,
        1,
        h1,
        masks.map(|m| m.recurrent[0].as_slice()),
    );

    // Inter-layer dropout on the full hidden sequence.
    let layer1_inputs: Vec<Vec<f64>> = layer0
        .h_seq
        .iter()
        .enumerate()
        .map(|(t, h_t)| match masks {
            Some(m) => h_t
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let b = k / h1;
                    let hh = k % h1;
                    v * m.inter[(b * t_len + t) * h1 + hh]
                })
                .collect(),
            None => h_t.clone(),
        })
        .collect();

    let layer1 = run_layer(
        &lp1,
        layer1_inputs,
        batch,
        h1,
        h2,
        masks.map(|m| m.recurrent[1].as_slice()),
    );

    let h_final = layer1.h_seq.last().expect("input_len >= 1");
    let final_dropped: Vec<f64> = match masks {
        Some(m) => h_final.iter().zip(&m.final_drop).map(|(v, m)| v * m).collect(),
        None => h_final.clone(),
    };

    let w = params.tensor("dense.weight");
    let bias = params.tensor("dense.bias")[0];
    let logits: Vec<f64> = (0..batch)
        .map(|b| bias + crate::math::dot(w, &final_dropped[b * h2..][..h2]))
        .collect();

    Ok(LstmCache {
        batch,
        layers: [layer0, layer1],
        final_dropped,
        logits,
    })
}

/// Training-mode forward pass with explicit dropout masks; returns risks and
/// the cache needed by [`lstm_backward`].
pub fn lstm_forward_train(
    params: &NetParams,
    cfg: &LstmConfig,
    x: &[f64],
    batch: usize,
    masks: &LstmMasks,
) -> Result<(Vec<f64>, LstmCache), ModelError> {
    let cache = forward_impl(params, cfg, x, batch, Some(masks))?;
    let risks = cache.logits.iter().map(|z| sigmoid(*z)).collect();
    Ok((risks, cache))
}

/// Inference forward pass; every dropout site is inactive.
pub fn lstm_forward_infer(
    params: &NetParams,
    cfg: &LstmConfig,
    x: &[f64],
    batch: usize,
) -> Result<Vec<f64>, ModelError> {
    let cache = forward_impl(params, cfg, x, batch, None)?;
    Ok(cache.logits.iter().map(|z| sigmoid(*z)).collect())
}

/// Per-example gradient of the pre-sigmoid logit with respect to the input
/// window, in inference mode; returns `(logits, gradients)` with gradients
/// laid out `(batch, input_len)`. Used by attribution.
pub fn lstm_input_gradient(
    params: &NetParams,
    cfg: &LstmConfig,
    x: &[f64],
    batch: usize,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let cache = forward_impl(params, cfg, x, batch, None)?;
    let t_len = cfg.input_len;
    let (h1, h2) = (cfg.hidden_sizes[0], cfg.hidden_sizes[1]);
    let mut scratch = vec![0.0; params.len()];

    let w = params.tensor("dense.weight");
    let mut dh_out1 = vec![vec![0.0; batch * h2]; t_len];
    for b in 0..batch {
        dh_out1[t_len - 1][b * h2..][..h2].copy_from_slice(w);
    }

    let dh_out0 = layer_backward(
        &layer_params(params, 1),
        &cache.layers[1],
        &dh_out1,
        batch,
        h1,
        h2,
        None,
        &layer_grad_ranges(params, 1),
        &mut scratch,
    );
    let dx_seq = layer_backward(
        &layer_params(params, 0),
        &cache.layers[0],
        &dh_out0,
        batch,
        1,
        h1,
        None,
        &layer_grad_ranges(params, 0),
        &mut scratch,
    );

    let mut dx = vec![0.0; batch * t_len];
    for (t, d_t) in dx_seq.iter().enumerate() {
        for b in 0..batch {
            dx[b * t_len + t] = d_t[b];
        }
    }
    Ok((cache.logits, dx))
}

/// Gradient of the mean loss with respect to every parameter, given
/// dLoss/dlogit per example; aligned with `params.values()`.
pub fn lstm_backward(
    params: &NetParams,
    cfg: &LstmConfig,
    cache: &LstmCache,
    masks: &LstmMasks,
    dlogits: &[f64],
) -> Vec<f64> {
    let batch = cache.batch;
    let t_len = cfg.input_len;
    let (h1, h2) = (cfg.hidden_sizes[0], cfg.hidden_sizes[1]);
    let mut grads = vec![0.0; params.len()];

    // Dense layer.
    let w = params.tensor("dense.weight");
    let mut d_final_dropped = vec![0.0; batch * h2];
    {
        let rw = params.range_of("dense.weight");
        let rb = params.range_of("dense.bias");
        for b in 0..batch {
            let g = dlogits[b];
            grads[rb.start] += g;
            let row = &cache.final_dropped[b * h2..][..h2];
            for hh in 0..h2 {
                grads[rw.start + hh] += g * row[hh];
                d_final_dropped[b * h2 + hh] = g * w[hh];
            }
        }
    }

    // Through the final dropout into layer 1's last hidden state.
    let mut dh_out1 = vec![vec![0.0; batch * h2]; t_len];
    for (d, (g, m)) in dh_out1[t_len - 1]
        .iter_mut()
        .zip(d_final_dropped.iter().zip(&masks.final_drop))
    {
        *d = g * m;
    }

    let lp1 = layer_params(params, 1);
    let ranges1 = layer_grad_ranges(params, 1);
    let d_layer1_inputs = layer_backward(
        &lp1,
        &cache.layers[1],
        &dh_out1,
        batch,
        h1,
        h2,
        Some(masks.recurrent[1].as_slice()),
        &ranges1,
        &mut grads,
    );

    // Through the inter-layer dropout into layer 0's hidden sequence.
    let dh_out0: Vec<Vec<f64>> = d_layer1_inputs
        .iter()
        .enumerate()
        .map(|(t, d_t)| {
            d_t.iter()
                .enumerate()
                .map(|(k, d)| {
                    let b = k / h1;
                    let hh = k % h1;
                    d * masks.inter[(b * t_len + t) * h1 + hh]
                })
                .collect()
        })
        .collect();

    let lp0 = layer_params(params, 0);
    let ranges0 = layer_grad_ranges(params, 0);
    layer_backward(
        &lp0,
        &cache.layers[0],
        &dh_out0,
        batch,
        1,
        h1,
        Some(masks.recurrent[0].as_slice()),
        &ranges0,
        &mut grads,
    );

    grads
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub config: LstmConfig,
    pub params: NetParams,
}

impl LstmModel {
    /// Risk for one feature window; identical bit for bit to running the
    /// window through a batched inference pass.
    pub fn predict(&self, window: &[f64]) -> Result<f64, ModelError> {
        Ok(lstm_forward_infer(&self.params, &self.config, window, 1)?[0])
    }

    pub fn predict_batch(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        // Chunked so arbitrarily large inputs keep state buffers small;
        // inference is per-example, so chunking cannot change any output bit.
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(super::INFER_CHUNK.max(1)) {
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            out.extend(lstm_forward_infer(&self.params, &self.config, &flat, chunk.len())?);
        }
        Ok(out)
    }
}

/// Train the LSTM with RMSprop on class-balanced batches.
///
/// Returns the model and the exponentially smoothed per-step training loss.
/// `initial` resumes from existing parameters (layout must match).
pub fn train_lstm(
    features: &[Vec<f64>],
    labels: &[u8],
    cfg: &LstmConfig,
    initial: Option<NetParams>,
) -> Result<(LstmModel, Vec<f64>), ModelError> {
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
        None => init_lstm_params(cfg, mix_seed(cfg.seed, 0x11)),
    };
    let mut batches = balanced_batches(labels, cfg.batch_size, mix_seed(cfg.seed, 0x22))
        .map_err(|e| ModelError::InvalidInput(e.to_string()))?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x33));
    let mut opt = RmsProp::new(cfg.rmsprop, params.len());
    let trainable = params.trainable_mask();
    let mut track = LossTrack::new(cfg.steps);

    for step in 0..cfg.steps {
        let idx = batches.next().expect("balanced batch stream is infinite");
        let mut x = Vec::with_capacity(idx.len() * cfg.input_len);
        let mut y = Vec::with_capacity(idx.len());
        for i in &idx {
            x.extend_from_slice(&features[*i]);
            y.push(f64::from(labels[*i]));
        }
        let masks = sample_lstm_masks(cfg, idx.len(), &mut mask_rng);
        let (_, cache) = lstm_forward_train(&params, cfg, &x, idx.len(), &masks)?;
        let (loss, dlogits) = bce_from_logits(&cache.logits, &y);
        track.push(step, loss)?;
        let grads = lstm_backward(&params, cfg, &cache, &masks, &dlogits);
        opt.step(params.values_mut(), &grads, &trainable);
        if params.validate_finite().is_err() {
            return Err(ModelError::Diverged {
                step,
                reason: format!(
                    "parameters became non-finite after the update; last finite smoothed loss {}",
                    track.smoothed.last().copied().unwrap_or(f64::NAN)
                ),
            });
        }
    }

    Ok((
        LstmModel {
            config: cfg.clone(),
            params,
        },
        track.smoothed,
    ))
}
