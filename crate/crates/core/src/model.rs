//! Feed-forward conditional density estimator over sketches.
//!
//! The network maps a concatenated input sketch to `depth × width` logits.
//! Training minimizes the KL divergence between each L1-normalized target
//! depth slice and the softmax of the matching logit slice, averaged over
//! depth slices that carry target mass and then over the batch.
//!
//! Architecture: `hidden_layers` blocks of `Linear → [BatchNorm] → LeakyReLU`,
//! the first projecting the input to `hidden_width`; later blocks add an
//! identity skip when `residual` is set. A final linear layer produces the
//! logits. Batch norm normalizes the pre-activation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::format::{Reader, Writer};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

const CKPT_MAGIC: &[u8; 8] = b"EMDECKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub residual: bool,
    pub batch_norm: bool,
    pub leaky_slope: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_layers: 3,
            hidden_width: 3000,
            residual: true,
            batch_norm: true,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainPreset::Retail.train_config()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid("gamma must be in (0, 1]"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.gamma.powi(epoch.saturating_sub(1) as i32)
    }
}

/// Published per-dataset hyperparameters for the session-based setting, plus
/// the top-k setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPreset {
    Retail,
    RetailMd,
    Digi,
    Rsc15,
    Nowp,
    #[serde(rename = "30m")]
    ThirtyMusic,
    #[serde(rename = "30m-md")]
    ThirtyMusicMd,
    Aotm,
    Topk,
}

/// Values of one preset row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetValues {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Sketch depth `N`.
    pub depth: usize,
    /// Decay `alpha`.
    pub alpha: f64,
}

impl TrainPreset {
    pub const ALL: [TrainPreset; 9] = [
        TrainPreset::Retail,
        TrainPreset::RetailMd,
        TrainPreset::Digi,
        TrainPreset::Rsc15,
        TrainPreset::Nowp,
        TrainPreset::ThirtyMusic,
        TrainPreset::ThirtyMusicMd,
        TrainPreset::Aotm,
        TrainPreset::Topk,
    ];

    pub fn values(self) -> PresetValues {
        let v = |epochs, batch_size, learning_rate, gamma, depth, alpha| PresetValues {
            epochs,
            batch_size,
            learning_rate,
            gamma,
            depth,
            alpha,
        };
        match self {
            TrainPreset::Retail => v(5, 256, 0.004, 0.5, 10, 0.95),
            TrainPreset::RetailMd => v(5, 256, 0.004, 0.5, 10, 0.9),
            TrainPreset::Digi => v(5, 512, 0.004, 0.5, 10, 0.97),
            TrainPreset::Rsc15 => v(7, 512, 0.0005, 1.0, 10, 0.9),
            TrainPreset::Nowp => v(5, 256, 0.001, 0.75, 10, 0.9),
            TrainPreset::ThirtyMusic => v(50, 512, 0.0005, 1.0, 10, 0.9),
            TrainPreset::ThirtyMusicMd => v(50, 512, 0.0005, 1.0, 9, 0.9),
            TrainPreset::Aotm => v(9, 256, 0.0005, 0.9, 9, 0.9),
            // no epoch count or decay is published for top-k; keep lr constant
            TrainPreset::Topk => v(5, 256, 0.001, 1.0, 30, 1.0),
        }
    }

    pub fn train_config(self) -> TrainConfig {
        let p = self.values();
        TrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            gamma: p.gamma,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }

    /// Network shape used with the preset: three residual layers of 3000 for
    /// the session datasets, a single 12000-wide layer for top-k.
    pub fn model_spec(self) -> ModelSpec {
        match self {
            TrainPreset::Topk => ModelSpec {
                hidden_layers: 1,
                hidden_width: 12_000,
                residual: false,
                batch_norm: false,
                leaky_slope: DEFAULT_LEAKY_SLOPE,
            },
            _ => ModelSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization.
    Train,
    /// Running statistics; deterministic per input row.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `out × in`.
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let w = Array2::from_shape_simple_fn((output, input), &mut draw);
        let b = Array1::from_shape_simple_fn(output, &mut draw);
        Dense { w, b }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(n: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(n),
            beta: Array1::zeros(n),
            running_mean: Array1::zeros(n),
            running_var: Array1::ones(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Hidden {
    dense: Dense,
    bn: Option<BatchNorm>,
    residual: bool,
}

/// Trained (or freshly initialized) network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    input_len: usize,
    out_depth: usize,
    out_width: usize,
    hidden: Vec<Hidden>,
    output: Dense,
}

struct LayerCache {
    input: Array2<f64>,
    /// Pre-activation after optional normalization.
    pre: Array2<f64>,
    zhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
}

/// Running-statistic updates produced by a train-mode forward pass.
type StatUpdates = Vec<Option<(Array1<f64>, Array1<f64>)>>;

/// Numerically stable softmax over each `width`-long slice.
pub fn softmax_slices(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

fn log_softmax_slice(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

/// Depth-averaged width-wise KL(target ‖ softmax(logits)) for one example,
/// plus the number of slices with target mass. Slices whose target sums to
/// zero are skipped; if none carry mass the loss is 0.
pub fn kl_sketch_loss_counted(logits: &[f64], target: &[f64], width: usize) -> (f64, usize) {
    debug_assert_eq!(logits.len(), target.len());
    let mut total = 0.0;
    let mut active = 0;
    let mut logq = vec![0.0; width];
    for (l, t) in logits.chunks(width).zip(target.chunks(width)) {
        let mass: f64 = t.iter().sum();
        if mass <= 0.0 {
            continue;
        }
        active += 1;
        log_softmax_slice(l, &mut logq);
        total += t
            .iter()
            .zip(&logq)
            .filter(|(&tc, _)| tc > 0.0)
            .map(|(&tc, &lq)| {
                let p = tc / mass;
                p * (p.ln() - lq)
            })
            .sum::<f64>();
    }
    if active == 0 {
        (0.0, 0)
    } else {
        (total / active as f64, active)
    }
}

/// See [`kl_sketch_loss_counted`].
pub fn kl_sketch_loss(logits: &[f64], target: &[f64], width: usize) -> f64 {
    kl_sketch_loss_counted(logits, target, width).0
}

/// Gradient of [`kl_sketch_loss`] with respect to the logits, scaled by
/// `scale`: `(softmax − p) / active_slices` per slice with mass.
fn kl_grad_into(logits: &[f64], target: &[f64], width: usize, scale: f64, out: &mut [f64]) {
    let active = target.chunks(width).filter(|t| t.iter().sum::<f64>() > 0.0).count();
    out.iter_mut().for_each(|g| *g = 0.0);
    if active == 0 {
        return;
    }
    let q = softmax_slices(logits, width);
    let f = scale / active as f64;
    for ((g, t), qs) in out.chunks_mut(width).zip(target.chunks(width)).zip(q.chunks(width)) {
        let mass: f64 = t.iter().sum();
        if mass <= 0.0 {
            continue;
        }
        for ((gc, &tc), &qc) in g.iter_mut().zip(t).zip(qs) {
            *gc = f * (qc - tc / mass);
        }
    }
}

impl Model {
    /// Fresh network with seeded uniform `±1/sqrt(fan_in)` weights.
    pub fn new(spec: &ModelSpec, input_len: usize, out_depth: usize, out_width: usize, seed: u64) -> Result<Self> {
        if input_len == 0 || out_depth == 0 || out_width == 0 {
            return Err(Error::invalid("model input and output sizes must be >= 1"));
        }
        if spec.hidden_layers > 0 && spec.hidden_width == 0 {
            return Err(Error::invalid("hidden_width must be >= 1"));
        }
        if !(spec.leaky_slope.is_finite()) {
            return Err(Error::invalid("leaky_slope must be finite"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::with_capacity(spec.hidden_layers);
        let mut width_in = input_len;
        for i in 0..spec.hidden_layers {
            hidden.push(Hidden {
                dense: Dense::init(&mut rng, width_in, spec.hidden_width),
                bn: spec.batch_norm.then(|| BatchNorm::new(spec.hidden_width)),
                residual: spec.residual && i > 0 && width_in == spec.hidden_width,
            });
            width_in = spec.hidden_width;
        }
        let output = Dense::init(&mut rng, width_in, out_depth * out_width);
        Ok(Model {
            spec: spec.clone(),
            input_len,
            out_depth,
            out_width,
            hidden,
            output,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn out_depth(&self) -> usize {
        self.out_depth
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn output_len(&self) -> usize {
        self.out_depth * self.out_width
    }

    fn forward_cached(&self, x: ArrayView2<f64>, mode: Mode) -> (Array2<f64>, Vec<LayerCache>, StatUpdates) {
        let slope = self.spec.leaky_slope;
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut stats = Vec::with_capacity(self.hidden.len());
        let mut h = x.to_owned();
        for layer in &self.hidden {
            let z = layer.dense.forward(&h.view());
            let (pre, zhat, inv_std, stat) = match (&layer.bn, mode) {
                (None, _) => (z, None, None, None),
                (Some(bn), Mode::Eval) => {
                    let inv = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let zhat = (z - &bn.running_mean) * &inv;
                    (&zhat * &bn.gamma + &bn.beta, None, None, None)
                }
                (Some(bn), Mode::Train) => {
                    let n = z.nrows() as f64;
                    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                    let centered = &z - &mean;
                    let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / n;
                    let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let zhat = centered * &inv;
                    let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
                    let pre = &zhat * &bn.gamma + &bn.beta;
                    (pre, Some(zhat), Some(inv), Some((mean, unbiased)))
                }
            };
            let mut out = pre.mapv(|v| if v > 0.0 { v } else { slope * v });
            if layer.residual {
                out += &h;
            }
            caches.push(LayerCache {
                input: std::mem::replace(&mut h, out),
                pre,
                zhat,
                inv_std,
            });
            stats.push(stat);
        }
        let logits = self.output.forward(&h.view());
        caches.push(LayerCache {
            input: h,
            pre: Array2::zeros((0, 0)),
            zhat: None,
            inv_std: None,
        });
        (logits, caches, stats)
    }

    fn check_batch(&self, rows: usize, cols: usize) -> Result<()> {
        if cols != self.input_len {
            return Err(Error::shape(format!(
                "input length {cols} != model input {}",
                self.input_len
            )));
        }
        if rows == 0 {
            return Err(Error::Empty("batch"));
        }
        Ok(())
    }

    /// Logits for a batch of inputs (`rows × input_len`).
    pub fn forward_batch(&self, inputs: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        self.check_batch(inputs.nrows(), inputs.ncols())?;
        Ok(self.forward_cached(inputs, mode).0)
    }

    /// Logits for one input vector.
    pub fn forward(&self, input: &[f64], mode: Mode) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.forward_batch(x, mode)?.into_raw_vec_and_offset().0)
    }

    /// Per-slice probabilities (softmax across width) for one input, eval mode.
    pub fn predict_sketch(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax_slices(&self.forward(input, Mode::Eval)?, self.out_width))
    }

    /// Mean loss over the batch rows whose target has mass.
    pub fn batch_loss(&self, inputs: ArrayView2<f64>, targets: ArrayView2<f64>, mode: Mode) -> Result<f64> {
        let logits = self.forward_batch(inputs, mode)?;
        Ok(self.loss_of(&logits, &targets)?.0)
    }

    fn loss_of(&self, logits: &Array2<f64>, targets: &ArrayView2<f64>) -> Result<(f64, usize)> {
        if targets.dim() != logits.dim() {
            return Err(Error::shape(format!(
                "targets {:?} vs logits {:?}",
                targets.dim(),
                logits.dim()
            )));
        }
        let mut sum = 0.0;
        let mut rows = 0;
        for (l, t) in logits.rows().into_iter().zip(targets.rows()) {
            let (loss, active) = kl_sketch_loss_counted(&l.to_vec(), &t.to_vec(), self.out_width);
            if active > 0 {
                sum += loss;
                rows += 1;
            }
        }
        Ok((if rows > 0 { sum / rows as f64 } else { 0.0 }, rows))
    }

    /// Loss and analytic gradients for one batch in train mode. Gradients are
    /// ordered like [`Model::param_slices_mut`].
    pub fn loss_and_grads(&self, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, grads, _) = self.loss_grads_stats(inputs, targets)?;
        Ok((loss, grads))
    }

    fn loss_grads_stats(
        &self,
        inputs: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<(f64, Vec<Vec<f64>>, StatUpdates)> {
        self.check_batch(inputs.nrows(), inputs.ncols())?;
        let (logits, caches, stats) = self.forward_cached(inputs, Mode::Train);
        let (loss, rows) = self.loss_of(&logits, &targets)?;

        let mut dlogits = Array2::<f64>::zeros(logits.dim());
        if rows > 0 {
            let scale = 1.0 / rows as f64;
            for ((l, t), mut g) in logits.rows().into_iter().zip(targets.rows()).zip(dlogits.rows_mut()) {
                let mut buf = vec![0.0; l.len()];
                kl_grad_into(&l.to_vec(), &t.to_vec(), self.out_width, scale, &mut buf);
                g.assign(&Array1::from(buf));
            }
        }

        let slope = self.spec.leaky_slope;
        let mut grads_rev: Vec<Vec<f64>> = Vec::new();
        let out_cache = caches.last().expect("output cache");
        let dw = dlogits.t().dot(&out_cache.input);
        let db = dlogits.sum_axis(Axis(0));
        let mut dh = dlogits.dot(&self.output.w);
        grads_rev.push(db.to_vec());
        grads_rev.push(dw.into_raw_vec_and_offset().0);

        for (layer, cache) in self.hidden.iter().zip(&caches).rev() {
            let skip = layer.residual.then(|| dh.clone());
            let mut dpre = dh;
            dpre.zip_mut_with(&cache.pre, |d, &p| {
                if p <= 0.0 {
                    *d *= slope
                }
            });
            let dz = match &layer.bn {
                None => dpre,
                Some(bn) => {
                    let zhat = cache.zhat.as_ref().expect("train cache");
                    let inv = cache.inv_std.as_ref().expect("train cache");
                    let n = dpre.nrows() as f64;
                    let dgamma = (&dpre * zhat).sum_axis(Axis(0));
                    let dbeta = dpre.sum_axis(Axis(0));
                    let dzhat = &dpre * &bn.gamma;
                    let sum_dzhat = dzhat.sum_axis(Axis(0));
                    let sum_dzhat_zhat = (&dzhat * zhat).sum_axis(Axis(0));
                    let dz = ((&dzhat * n) - &sum_dzhat - &(zhat * &sum_dzhat_zhat)) * &(inv / n);
                    grads_rev.push(dbeta.to_vec());
                    grads_rev.push(dgamma.to_vec());
                    dz
                }
            };
            let dw = dz.t().dot(&cache.input);
            let db = dz.sum_axis(Axis(0));
            grads_rev.push(db.to_vec());
            grads_rev.push(dw.into_raw_vec_and_offset().0);
            dh = dz.dot(&layer.dense.w);
            if let Some(s) = skip {
                dh += &s;
            }
        }
        grads_rev.reverse();
        Ok((loss, grads_rev, stats))
    }

    /// Trainable parameters in a fixed order: per hidden layer `w, b,
    /// [gamma, beta]`, then output `w, b`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.hidden {
            out.push(layer.dense.w.as_slice_mut().expect("standard layout"));
            out.push(layer.dense.b.as_slice_mut().expect("standard layout"));
            if let Some(bn) = &mut layer.bn {
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.output.w.as_slice_mut().expect("standard layout"));
        out.push(self.output.b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn param_lens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.hidden {
            out.push(layer.dense.w.len());
            out.push(layer.dense.b.len());
            if let Some(bn) = &layer.bn {
                out.push(bn.gamma.len());
                out.push(bn.beta.len());
            }
        }
        out.push(self.output.w.len());
        out.push(self.output.b.len());
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut m = self.clone();
        m.param_slices_mut().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn apply_stats(&mut self, stats: StatUpdates) {
        for (layer, stat) in self.hidden.iter_mut().zip(stats) {
            if let (Some(bn), Some((mean, var))) = (&mut layer.bn, stat) {
                bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + &(mean * BN_MOMENTUM);
                bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + &(var * BN_MOMENTUM);
            }
        }
    }

    #[cfg(test)]
    fn set_identity_block(&mut self, layer: usize) {
        let l = &mut self.hidden[layer];
        l.dense.w.fill(0.0);
        l.dense.b.fill(0.0);
        if let Some(bn) = &mut l.bn {
            bn.gamma.fill(1.0);
            bn.beta.fill(0.0);
        }
    }
}

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let lens = model.param_lens();
        AdamState {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One optimizer step on a batch: train-mode forward, analytic backward,
/// Adam update at learning rate `lr`, running-statistics update. Returns the
/// batch loss. A non-finite loss leaves the model untouched.
pub fn backward_and_step(
    model: &mut Model,
    adam: &mut AdamState,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    config: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let (loss, grads, stats) = model.loss_grads_stats(inputs, targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss,
            epoch: 0,
            batch: adam.step as usize,
        });
    }
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in model
        .param_slices_mut()
        .into_iter()
        .zip(&grads)
        .zip(&mut adam.m)
        .zip(&mut adam.v)
    {
        for i in 0..p.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + config.adam_eps);
        }
    }
    model.apply_stats(stats);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    #[serde(skip)]
    pub steps: usize,
}

/// Trains a fresh model (initialized from `config.seed`) on `(input, target)`
/// rows. Rows are reshuffled each epoch with a seeded generator and the
/// learning rate is multiplied by `gamma` after every epoch.
pub fn train(
    spec: &ModelSpec,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    out_depth: usize,
    config: &TrainConfig,
) -> Result<(Model, Vec<EpochStats>)> {
    let input_len = inputs.first().map(Vec::len).ok_or(Error::Empty("training set"))?;
    let out_width = targets
        .first()
        .map(|t| t.len() / out_depth.max(1))
        .ok_or(Error::Empty("training set"))?;
    let mut model = Model::new(spec, input_len, out_depth, out_width, config.seed)?;
    let history = train_model(&mut model, inputs, targets, config)?;
    Ok((model, history))
}

/// Continues training `model` in place. See [`train`].
pub fn train_model(
    model: &mut Model,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::shape("one target per input"));
    }
    let (in_len, out_len) = (model.input_len(), model.output_len());
    if let Some(bad) = inputs.iter().find(|x| x.len() != in_len) {
        return Err(Error::shape(format!("input length {} != {in_len}", bad.len())));
    }
    if let Some(bad) = targets.iter().find(|t| t.len() != out_len) {
        return Err(Error::shape(format!("target length {} != {out_len}", bad.len())));
    }
    if targets.iter().flatten().any(|&t| t < 0.0) {
        return Err(Error::invalid("target sketches must be non-negative"));
    }

    let mut adam = AdamState::new(model);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4500);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = gather_rows(inputs, chunk, in_len);
            let y = gather_rows(targets, chunk, out_len);
            let loss = backward_and_step(model, &mut adam, x.view(), y.view(), config, lr).map_err(|e| match e {
                Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss { loss, epoch, batch: b },
                other => other,
            })?;
            loss_sum += loss;
            steps += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / steps as f64,
            lr,
            steps,
        };
        log::debug!("epoch {epoch}: loss {:.6} lr {lr}", stats.loss);
        history.push(stats);
    }
    Ok(history)
}

fn gather_rows(rows: &[Vec<f64>], idx: &[usize], len: usize) -> Array2<f64> {
    let mut flat = Vec::with_capacity(idx.len() * len);
    for &i in idx {
        flat.extend_from_slice(&rows[i]);
    }
    Array2::from_shape_vec((idx.len(), len), flat).expect("rows have equal length")
}

/// Writes `epoch,loss,lr` CSV.
pub fn write_loss_csv<W: Write>(history: &[EpochStats], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for h in history {
        wtr.serialize(h)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    input_len: usize,
    out_depth: usize,
    out_width: usize,
    /// Caller-defined description of the input layout.
    layout: serde_json::Value,
}

impl Model {
    /// Checkpoint: magic + version, a JSON header (spec, shapes, caller
    /// layout), then every tensor as raw little-endian f64 including batch
    /// norm running statistics.
    pub fn write_checkpoint<W: Write>(&self, w: W, layout: &serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            input_len: self.input_len,
            out_depth: self.out_depth,
            out_width: self.out_width,
            layout: layout.clone(),
        };
        let mut w = Writer::new(w, CKPT_MAGIC, CKPT_VERSION)?;
        w.str(&serde_json::to_string(&header)?)?;
        for layer in &self.hidden {
            w.f64s(layer.dense.w.as_slice().expect("standard layout"))?;
            w.f64s(layer.dense.b.as_slice().expect("standard layout"))?;
            if let Some(bn) = &layer.bn {
                for a in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    w.f64s(a.as_slice().expect("standard layout"))?;
                }
            }
        }
        w.f64s(self.output.w.as_slice().expect("standard layout"))?;
        w.f64s(self.output.b.as_slice().expect("standard layout"))?;
        w.finish()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<(Self, serde_json::Value)> {
        const WHAT: &str = "checkpoint";
        let (mut r, version) = Reader::open(r, CKPT_MAGIC, WHAT)?;
        Reader::<R>::expect_version(WHAT, version, CKPT_VERSION)?;
        let header: CheckpointHeader = serde_json::from_str(&r.str()?)?;
        let mut model = Model::new(&header.spec, header.input_len, header.out_depth, header.out_width, 0)?;
        let fill1 = |r: &mut Reader<R>, a: &mut Array1<f64>| -> Result<()> {
            let v = r.f64s_exact(a.len())?;
            a.assign(&Array1::from(v));
            Ok(())
        };
        let fill2 = |r: &mut Reader<R>, a: &mut Array2<f64>| -> Result<()> {
            let v = r.f64s_exact(a.len())?;
            a.as_slice_mut().expect("standard layout").copy_from_slice(&v);
            Ok(())
        };
        for layer in &mut model.hidden {
            fill2(&mut r, &mut layer.dense.w)?;
            fill1(&mut r, &mut layer.dense.b)?;
            if let Some(bn) = &mut layer.bn {
                fill1(&mut r, &mut bn.gamma)?;
                fill1(&mut r, &mut bn.beta)?;
                fill1(&mut r, &mut bn.running_mean)?;
                fill1(&mut r, &mut bn.running_var)?;
            }
        }
        fill2(&mut r, &mut model.output.w)?;
        fill1(&mut r, &mut model.output.b)?;
        r.end()?;
        Ok((model, header.layout))
    }

    pub fn save(&self, path: impl AsRef<Path>, layout: &serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(BufWriter::new(f), layout)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(BufReader::new(f))
    }
}
