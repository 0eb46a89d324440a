//! Binary cross-entropy, cosine similarity and the model-contrastive loss.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

const PROB_CLAMP: f64 = 1e-12;

fn check_labels(labels: ArrayView2<'_, f64>) -> Result<()> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract("labels must be exactly 0 or 1".into()));
    }
    Ok(())
}

/// Multi-label BCE on logits: summed over classes, averaged over samples.
///
/// Uses `max(z, 0) - z y + ln(1 + e^{-|z|})` per entry. The returned gradient
/// is `(sigmoid(z) - y) / n`.
pub fn bce_loss(logits: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != labels.dim() {
        return Err(Error::Shape(format!("logits {:?} vs labels {:?}", logits.dim(), labels.dim())));
    }
    check_labels(labels)?;
    let n = logits.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for ((z, y), g) in logits.iter().zip(labels.iter()).zip(grad.iter_mut()) {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = (super::model::sigmoid(*z) - y) / n;
    }
    Ok((loss / n, grad))
}

/// BCE from probabilities, clamped to `[1e-12, 1 - 1e-12]`. Same reduction as
/// [`bce_loss`].
pub fn bce_from_probabilities(probs: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<f64> {
    if probs.dim() != labels.dim() {
        return Err(Error::Shape("probabilities and labels differ in shape".into()));
    }
    check_labels(labels)?;
    let n = probs.nrows() as f64;
    let total: f64 = probs
        .iter()
        .zip(labels.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    cosine_with_grad(a, b).map(|(s, _)| s)
}

/// Cosine similarity and its gradient with respect to `a`.
pub fn cosine_with_grad(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero feature vector (dead feature extractor)".into()));
    }
    let s = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    let grad = &b / (na * nb) - &(&a * (s / (na * na)));
    Ok((s, grad))
}

/// Model-contrastive loss, averaged over the batch.
///
/// For each sample, with `a = cos(f, f_global) / tau` and
/// `b = cos(f, f_prev) / tau`, the loss is `-ln(e^a / (e^a + e^b))`.
/// Returns the loss and its gradient with respect to `local` features.
pub fn model_contrastive_loss(
    local: ArrayView2<'_, f64>,
    global: ArrayView2<'_, f64>,
    previous: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::Config("MOON temperature must be > 0".into()));
    }
    if local.dim() != global.dim() || local.dim() != previous.dim() {
        return Err(Error::Shape("feature matrices differ in shape".into()));
    }
    let n = local.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(local.dim());
    for (i, mut g) in grad.axis_iter_mut(Axis(0)).enumerate() {
        let f = local.row(i);
        let (s_pos, ds_pos) = cosine_with_grad(f, global.row(i))?;
        let (s_neg, ds_neg) = cosine_with_grad(f, previous.row(i))?;
        let a = s_pos / tau;
        let b = s_neg / tau;
        let hi = a.max(b);
        let lse = hi + ((a - hi).exp() + (b - hi).exp()).ln();
        loss += lse - a;
        // d/da = -q, d/db = q with q = softmax weight of the negative pair
        let q = (b - lse).exp();
        g.assign(&((&ds_neg - &ds_pos) * (q / (tau * n))));
    }
    Ok((loss / n, grad))
}
