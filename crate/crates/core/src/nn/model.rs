//! Dense MLP with optional batch normalization and a linear multi-label head.
//!
//! Hidden layer `l` computes `a = relu(bn(x W^T + b))`; the head computes
//! `logits = f H^T + c` where `f` is the last hidden activation. Sigmoid is
//! applied by the loss and by evaluation, never inside the trace.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ModelSpec, ParamVector, SegmentKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    /// Binary `{0, 1}` matrix `[n x P]`.
    pub labels: Array2<f64>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Shape("batch must hold at least one sample".into()));
        }
        if features.nrows() != labels.nrows() {
            return Err(Error::Shape(format!("{} feature rows but {} label rows", features.nrows(), labels.nrows())));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Contract("labels must be exactly 0 or 1".into()));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Gather the given rows into a new batch.
    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch { features: self.features.select(Axis(0), rows), labels: self.labels.select(Axis(0), rows) }
    }
}

#[derive(Debug, Clone)]
pub struct BnTrace {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub inv_std: Array1<f64>,
    pub normalized: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Linear output `x W^T + b`.
    pub pre_activation: Array2<f64>,
    pub bn: Option<BnTrace>,
    /// Input to the ReLU (BN output when BN is enabled).
    pub pre_relu: Array2<f64>,
    pub activation: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub input: Array2<f64>,
    pub layers: Vec<LayerTrace>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    /// Penultimate features: the input of the linear head.
    pub fn features(&self) -> ArrayView2<'_, f64> {
        match self.layers.last() {
            Some(layer) => layer.activation.view(),
            None => self.input.view(),
        }
    }

    pub fn probabilities(&self) -> Array2<f64> {
        self.logits.mapv(sigmoid)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Deterministic initialization: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases 0, BN gamma 1, beta 0, running mean 0, running var 1.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    let layout = spec.layout()?;
    let mut params = ParamVector::zeros(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = spec.input_dim;
    let mut widths = spec.hidden_dims.iter().copied().chain(std::iter::once(spec.num_classes));
    for seg in layout.segments() {
        match seg.kind {
            SegmentKind::Weight => {
                let out = widths.next().expect("one weight segment per layer");
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                for v in params.slice_mut(seg) {
                    *v = dist.sample(&mut rng);
                }
                fan_in = out;
            }
            SegmentKind::BnGamma | SegmentKind::BnRunningVar => params.slice_mut(seg).fill(1.0),
            SegmentKind::Bias | SegmentKind::BnBeta | SegmentKind::BnRunningMean => {}
        }
    }
    Ok(params)
}

fn expected_len(spec: &ModelSpec) -> usize {
    let mut len = 0;
    let mut fan_in = spec.input_dim;
    for (&w, &bn) in spec.hidden_dims.iter().zip(&spec.use_batch_norm) {
        len += w * fan_in + w + if bn { 4 * w } else { 0 };
        fan_in = w;
    }
    len + spec.num_classes * fan_in + spec.num_classes
}

fn check_params(params: &ParamVector, spec: &ModelSpec) -> Result<()> {
    if params.len() != expected_len(spec) {
        return Err(Error::Shape(format!(
            "parameter vector of length {} does not match the model spec (expected {})",
            params.len(),
            expected_len(spec)
        )));
    }
    Ok(())
}

/// Offsets of one hidden layer's segments inside the flat vector.
struct LayerOffsets {
    weight: usize,
    bias: usize,
    bn: Option<usize>,
}

fn layer_offsets(spec: &ModelSpec) -> (Vec<LayerOffsets>, usize, usize) {
    let mut offsets = Vec::with_capacity(spec.hidden_dims.len());
    let mut cursor = 0;
    let mut fan_in = spec.input_dim;
    for (&w, &bn) in spec.hidden_dims.iter().zip(&spec.use_batch_norm) {
        let weight = cursor;
        let bias = weight + w * fan_in;
        cursor = bias + w;
        let bn_off = bn.then_some(cursor);
        if bn {
            cursor += 4 * w;
        }
        offsets.push(LayerOffsets { weight, bias, bn: bn_off });
        fan_in = w;
    }
    let head_bias = cursor + spec.num_classes * fan_in;
    (offsets, cursor, head_bias)
}

fn matrix<'a>(values: &'a [f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &values[offset..offset + rows * cols]).expect("segment shape")
}

fn vector(values: &[f64], offset: usize, len: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&values[offset..offset + len])
}

pub fn forward(
    params: &ParamVector,
    spec: &ModelSpec,
    features: ArrayView2<'_, f64>,
    mode: Mode,
) -> Result<ForwardTrace> {
    check_params(params, spec)?;
    if features.ncols() != spec.input_dim {
        return Err(Error::Shape(format!("input has {} columns, model expects {}", features.ncols(), spec.input_dim)));
    }
    if features.nrows() == 0 {
        return Err(Error::Shape("cannot run the model on zero samples".into()));
    }
    let values = params.values();
    let (offsets, head_w, head_b) = layer_offsets(spec);
    let n = features.nrows() as f64;
    let mut layers = Vec::with_capacity(offsets.len());
    let mut fan_in = spec.input_dim;
    for (l, off) in offsets.iter().enumerate() {
        let width = spec.hidden_dims[l];
        let x = match layers.last() {
            Some(LayerTrace { activation, .. }) => activation.view(),
            None => features.view(),
        };
        let w = matrix(values, off.weight, width, fan_in);
        let b = vector(values, off.bias, width);
        let z = x.dot(&w.t()) + b;
        let (bn, pre_relu) = match off.bn {
            Some(bn_off) => {
                let gamma = vector(values, bn_off, width);
                let beta = vector(values, bn_off + width, width);
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
                        let var = (&z - &mean).mapv(|d| d * d).sum_axis(Axis(0)) / n;
                        (mean, var)
                    }
                    Mode::Eval => (
                        vector(values, bn_off + 2 * width, width).to_owned(),
                        vector(values, bn_off + 3 * width, width).to_owned(),
                    ),
                };
                let inv_std = var.mapv(|v| 1.0 / (v + spec.bn_eps).sqrt());
                let normalized = (&z - &mean) * &inv_std;
                let out = &normalized * &gamma + beta;
                (Some(BnTrace { mean, var, inv_std, normalized }), out)
            }
            None => (None, z.clone()),
        };
        let activation = pre_relu.mapv(|v| v.max(0.0));
        layers.push(LayerTrace { pre_activation: z, bn, pre_relu, activation });
        fan_in = width;
    }
    let f = match layers.last() {
        Some(layer) => layer.activation.view(),
        None => features.view(),
    };
    let h = matrix(values, head_w, spec.num_classes, fan_in);
    let c = vector(values, head_b, spec.num_classes);
    let logits = f.dot(&h.t()) + c;
    Ok(ForwardTrace { mode, input: features.to_owned(), layers, logits })
}

/// Fold the batch statistics of a train-mode trace into the running
/// statistics by exponential moving average (`momentum` weights the batch).
/// Running variance uses the unbiased batch estimate when `n > 1`.
pub fn commit_running_stats(params: &mut ParamVector, spec: &ModelSpec, trace: &ForwardTrace) -> Result<()> {
    if trace.mode != Mode::Train {
        return Err(Error::Contract("running statistics come from train-mode traces only".into()));
    }
    check_params(params, spec)?;
    let n = trace.input.nrows() as f64;
    let m = spec.bn_momentum;
    let (offsets, _, _) = layer_offsets(spec);
    let values = params.values_mut();
    for (l, (off, layer)) in offsets.iter().zip(&trace.layers).enumerate() {
        let (Some(bn_off), Some(bn)) = (off.bn, layer.bn.as_ref()) else {
            continue;
        };
        let width = spec.hidden_dims[l];
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for k in 0..width {
            let rm = &mut values[bn_off + 2 * width + k];
            *rm = (1.0 - m) * *rm + m * bn.mean[k];
            let rv = &mut values[bn_off + 3 * width + k];
            *rv = (1.0 - m) * *rv + m * bn.var[k] * correction;
        }
    }
    Ok(())
}

/// Analytic gradient of a loss whose derivative w.r.t. the logits is
/// `dlogits` and, optionally, w.r.t. the penultimate features is `dfeatures`.
/// Running-statistic segments always receive zero gradient.
pub fn backward(
    params: &ParamVector,
    spec: &ModelSpec,
    trace: &ForwardTrace,
    dlogits: ArrayView2<'_, f64>,
    dfeatures: Option<ArrayView2<'_, f64>>,
) -> Result<ParamVector> {
    if trace.mode != Mode::Train {
        return Err(Error::Contract("backward requires a train-mode trace".into()));
    }
    check_params(params, spec)?;
    if dlogits.dim() != trace.logits.dim() {
        return Err(Error::Shape("dlogits shape differs from the logits".into()));
    }
    let values = params.values();
    let mut grad = params.zeros_like();
    let (offsets, head_w, head_b) = layer_offsets(spec);
    let fan_last = spec.feature_dim();
    let n = trace.input.nrows() as f64;

    let f = trace.features();
    {
        let g = grad.values_mut();
        let dh = dlogits.t().dot(&f);
        g[head_w..head_w + dh.len()].copy_from_slice(dh.as_slice().expect("standard layout"));
        let dc = dlogits.sum_axis(Axis(0));
        g[head_b..head_b + dc.len()].copy_from_slice(dc.as_slice().expect("standard layout"));
    }
    let h = matrix(values, head_w, spec.num_classes, fan_last);
    let mut da = dlogits.dot(&h);
    if let Some(df) = dfeatures {
        if df.dim() != da.dim() {
            return Err(Error::Shape("dfeatures shape differs from the features".into()));
        }
        da += &df;
    }

    for l in (0..offsets.len()).rev() {
        let off = &offsets[l];
        let layer = &trace.layers[l];
        let width = spec.hidden_dims[l];
        let fan_in = if l == 0 { spec.input_dim } else { spec.hidden_dims[l - 1] };
        let mut dy = da;
        Zip::from(&mut dy).and(&layer.pre_relu).for_each(|d, &y| {
            if y <= 0.0 {
                *d = 0.0;
            }
        });
        let dz = match (off.bn, layer.bn.as_ref()) {
            (Some(bn_off), Some(bn)) => {
                let gamma = vector(values, bn_off, width);
                let dgamma = (&dy * &bn.normalized).sum_axis(Axis(0));
                let dbeta = dy.sum_axis(Axis(0));
                let g = grad.values_mut();
                g[bn_off..bn_off + width].copy_from_slice(dgamma.as_slice().expect("contiguous"));
                g[bn_off + width..bn_off + 2 * width].copy_from_slice(dbeta.as_slice().expect("contiguous"));
                let dxhat = &dy * &gamma;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &bn.normalized).sum_axis(Axis(0));
                let mut dz = dxhat * n - &sum_dxhat - &(&bn.normalized * &sum_dxhat_xhat);
                dz *= &(&bn.inv_std / n);
                dz
            }
            _ => dy,
        };
        let x = if l == 0 { trace.input.view() } else { trace.layers[l - 1].activation.view() };
        let dw = dz.t().dot(&x);
        let db = dz.sum_axis(Axis(0));
        {
            let g = grad.values_mut();
            g[off.weight..off.weight + dw.len()].copy_from_slice(dw.as_slice().expect("standard layout"));
            g[off.bias..off.bias + width].copy_from_slice(db.as_slice().expect("contiguous"));
        }
        let w = matrix(values, off.weight, width, fan_in);
        da = dz.dot(&w);
    }
    Ok(grad)
}
