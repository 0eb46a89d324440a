//! Per-client hypernetwork producing layer-wise aggregation weights.
//!
//! `alpha = softmax_rows(W2 relu(W1 t + b1) + b2)` reshaped to `[L x K]`:
//! one row per model segment ("layer"), one column per client. The embedding
//! `t` and the weights `W1, b1, W2, b2` all live in one [`ParamVector`].

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Layout, ParamVector, Segment, SegmentKind};

#[derive(Debug, Clone)]
pub struct Hypernetwork {
    params: ParamVector,
    embed_dim: usize,
    hidden: usize,
    layers: usize,
    clients: usize,
}

struct Offsets {
    embedding: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct HyperTrace {
    pre_hidden: Array1<f64>,
    hidden: Array1<f64>,
    alpha: Array2<f64>,
}

fn hyper_layout(embed_dim: usize, hidden: usize, outputs: usize) -> Result<Arc<Layout>> {
    let mut offset = 0;
    let mut segments = Vec::new();
    for (name, len, kind) in [
        ("embedding", embed_dim, SegmentKind::Weight),
        ("hyper.w1", hidden * embed_dim, SegmentKind::Weight),
        ("hyper.b1", hidden, SegmentKind::Bias),
        ("hyper.w2", outputs * hidden, SegmentKind::Weight),
        ("hyper.b2", outputs, SegmentKind::Bias),
    ] {
        segments.push(Segment { name: name.into(), offset, len, kind });
        offset += len;
    }
    Layout::new(segments).map(Arc::new)
}

impl Hypernetwork {
    /// Embedding starts at zero. The hidden layer is random with positive
    /// biases so its units are active at `t = 0`; the output layer is zero, so
    /// the initial weights are uniform `1/K`.
    pub fn new(embed_dim: usize, hidden: usize, layers: usize, clients: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 || layers == 0 || clients == 0 {
            return Err(Error::Config("hypernetwork dimensions must be >= 1".into()));
        }
        let layout = hyper_layout(embed_dim, hidden, layers * clients)?;
        let mut params = ParamVector::zeros(layout);
        let mut hn = Hypernetwork { params: params.clone(), embed_dim, hidden, layers, clients };
        let off = hn.offsets();
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let v = params.values_mut();
        for x in &mut v[off.w1..off.b1] {
            *x = rng.gen_range(-bound..=bound);
        }
        for x in &mut v[off.b1..off.w2] {
            *x = rng.gen_range(0.0..=1.0);
        }
        hn.params = params;
        Ok(hn)
    }

    pub fn from_params(
        params: ParamVector,
        embed_dim: usize,
        hidden: usize,
        layers: usize,
        clients: usize,
    ) -> Result<Self> {
        let expected = hyper_layout(embed_dim, hidden, layers * clients)?;
        if **params.layout() != *expected {
            return Err(Error::Shape("hypernetwork parameters do not match the declared sizes".into()));
        }
        Ok(Hypernetwork { params, embed_dim, hidden, layers, clients })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn embedding(&self) -> &[f64] {
        &self.params.values()[..self.embed_dim]
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    fn offsets(&self) -> Offsets {
        let embedding = 0;
        let w1 = embedding + self.embed_dim;
        let b1 = w1 + self.hidden * self.embed_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.layers * self.clients * self.hidden;
        Offsets { embedding, w1, b1, w2, b2 }
    }

    fn run(&self, params: &[f64]) -> HyperTrace {
        let off = self.offsets();
        let t = ArrayView1::from(&params[off.embedding..off.w1]);
        let w1 = ArrayView2::from_shape((self.hidden, self.embed_dim), &params[off.w1..off.b1]).expect("w1 shape");
        let b1 = ArrayView1::from(&params[off.b1..off.w2]);
        let outputs = self.layers * self.clients;
        let w2 = ArrayView2::from_shape((outputs, self.hidden), &params[off.w2..off.b2]).expect("w2 shape");
        let b2 = ArrayView1::from(&params[off.b2..off.b2 + outputs]);
        let pre_hidden = w1.dot(&t) + b1;
        let hidden = pre_hidden.mapv(|v| v.max(0.0));
        let logits = (w2.dot(&hidden) + b2).into_shape((self.layers, self.clients)).expect("alpha shape");
        let mut alpha = logits;
        for mut row in alpha.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        HyperTrace { pre_hidden, hidden, alpha }
    }

    /// Aggregation weights `[L x K]`; every row lies on the simplex.
    pub fn forward(&self) -> Array2<f64> {
        self.run(self.params.values()).alpha
    }

    /// Gradient over all hypernetwork parameters (embedding included) of a
    /// scalar whose derivative w.r.t. `alpha` is `dalpha`.
    pub fn backward(&self, dalpha: &Array2<f64>) -> Result<ParamVector> {
        if dalpha.dim() != (self.layers, self.clients) {
            return Err(Error::Shape("dalpha must be [layers x clients]".into()));
        }
        let values = self.params.values();
        let trace = self.run(values);
        let off = self.offsets();
        // softmax backward per row
        let mut dlogits = Array2::zeros(dalpha.dim());
        for l in 0..self.layers {
            let a = trace.alpha.row(l);
            let g = dalpha.row(l);
            let inner = a.dot(&g);
            for j in 0..self.clients {
                dlogits[[l, j]] = a[j] * (g[j] - inner);
            }
        }
        let dout = dlogits.into_shape(self.layers * self.clients).expect("flat");
        let outputs = dout.len();
        let w1 = ArrayView2::from_shape((self.hidden, self.embed_dim), &values[off.w1..off.b1]).expect("w1 shape");
        let w2 = ArrayView2::from_shape((outputs, self.hidden), &values[off.w2..off.b2]).expect("w2 shape");
        let t = ArrayView1::from(&values[off.embedding..off.w1]);

        let mut grad = self.params.zeros_like();
        let g = grad.values_mut();
        for (o, &d) in dout.iter().enumerate() {
            g[off.b2 + o] = d;
            for h in 0..self.hidden {
                g[off.w2 + o * self.hidden + h] = d * trace.hidden[h];
            }
        }
        let mut dhidden = w2.t().dot(&dout);
        for (dh, &z) in dhidden.iter_mut().zip(&trace.pre_hidden) {
            if z <= 0.0 {
                *dh = 0.0;
            }
        }
        for h in 0..self.hidden {
            g[off.b1 + h] = dhidden[h];
            for e in 0..self.embed_dim {
                g[off.w1 + h * self.embed_dim + e] = dhidden[h] * t[e];
            }
        }
        let dt = w1.t().dot(&dhidden);
        g[off.embedding..off.w1].copy_from_slice(dt.as_slice().expect("contiguous"));
        Ok(grad)
    }

    /// `d alpha[l][j] = <models[j] restricted to segment l, direction>`: the
    /// derivative of `<mix(alpha, models), direction>` w.r.t. `alpha`.
    pub fn mix_sensitivity(models: &[&ParamVector], direction: &ParamVector) -> Array2<f64> {
        let layout = direction.layout();
        let segs = layout.segments();
        let mut d = Array2::zeros((segs.len(), models.len()));
        for (l, seg) in segs.iter().enumerate() {
            let u = direction.slice(seg);
            for (j, m) in models.iter().enumerate() {
                d[[l, j]] = m.slice(seg).iter().zip(u).map(|(a, b)| a * b).sum();
            }
        }
        d
    }

    /// Gradient over hypernetwork parameters of `<mix(alpha, models), direction>`.
    pub fn grad_of_mix_dot(&self, models: &[&ParamVector], direction: &ParamVector) -> Result<ParamVector> {
        self.backward(&Self::mix_sensitivity(models, direction))
    }

    /// One SGD step on the surrogate `0.5 * ||mix - target||^2` at fixed
    /// `models`, i.e. along `J^T (served - trained)`.
    pub fn step_towards(
        &mut self,
        models: &[&ParamVector],
        served: &ParamVector,
        trained: &ParamVector,
        lr: f64,
    ) -> Result<()> {
        let residual = served.sub(trained);
        let grad = self.grad_of_mix_dot(models, &residual)?;
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite hypernetwork gradient".into()));
        }
        self.params.axpy(-lr, &grad);
        Ok(())
    }
}

/// `out[l] = sum_j alpha[l][j] * models[j][l]` for every segment `l`.
pub fn mix_models(alpha: &Array2<f64>, models: &[&ParamVector]) -> Result<ParamVector> {
    let first = models.first().ok_or_else(|| Error::Protocol("no client models to mix".into()))?;
    let layout = first.layout().clone();
    if alpha.dim() != (layout.segments().len(), models.len()) {
        return Err(Error::Shape(format!(
            "alpha is {:?}, expected [{} x {}]",
            alpha.dim(),
            layout.segments().len(),
            models.len()
        )));
    }
    let mut out = ParamVector::zeros(layout.clone());
    for (l, seg) in layout.segments().iter().enumerate() {
        let dst = &mut out.values_mut()[seg.range()];
        for (j, m) in models.iter().enumerate() {
            let a = alpha[[l, j]];
            for (o, &v) in dst.iter_mut().zip(m.slice(seg)) {
                *o += a * v;
            }
        }
    }
    Ok(out)
}
