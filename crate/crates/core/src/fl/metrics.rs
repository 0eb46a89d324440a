//! Multi-label F1 and learning-efficiency metrics.

use ndarray::ArrayView2;

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::nn::{forward, Mode, ModelSpec, ParamVector};

/// Per-class confusion counts at the 0.5 probability threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl Counts {
    /// `predicted` holds probabilities; a class is positive when p >= 0.5.
    pub fn from_predictions(predicted: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<Self> {
        if predicted.dim() != labels.dim() {
            return Err(Error::Shape("predictions and labels differ in shape".into()));
        }
        let p = labels.ncols();
        let mut c = Counts { tp: vec![0; p], fp: vec![0; p], fn_: vec![0; p] };
        for (pr, y) in predicted.rows().into_iter().zip(labels.rows()) {
            for j in 0..p {
                match (pr[j] >= 0.5, y[j] == 1.0) {
                    (true, true) => c.tp[j] += 1,
                    (true, false) => c.fp[j] += 1,
                    (false, true) => c.fn_[j] += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(c)
    }

    /// Pooled F1 in percent.
    pub fn micro_f1(&self) -> f64 {
        let sum = |v: &[u64]| v.iter().sum::<u64>();
        f1(sum(&self.tp), sum(&self.fp), sum(&self.fn_))
    }

    /// Unweighted mean of per-class F1 in percent; a class with no
    /// positives and no predictions scores 0.
    pub fn macro_f1(&self) -> f64 {
        let p = self.tp.len();
        if p == 0 {
            return 0.0;
        }
        (0..p).map(|j| f1(self.tp[j], self.fp[j], self.fn_[j])).sum::<f64>() / p as f64
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        100.0 * (2 * tp) as f64 / denom as f64
    }
}

/// `(micro, macro)` F1 in percent of one model on the test split. Uses
/// eval-mode BN and leaves the model untouched.
pub fn evaluate_model(params: &ParamVector, spec: &ModelSpec, test: &Samples) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let trace = forward(params, spec, test.features.view(), Mode::Eval)?;
    let counts = Counts::from_predictions(trace.probabilities().view(), test.labels.view())?;
    Ok((counts.micro_f1(), counts.macro_f1()))
}

/// Mean `(micro, macro)` F1 over one or more models.
pub fn evaluate(models: &[ParamVector], spec: &ModelSpec, test: &Samples) -> Result<(f64, f64)> {
    if models.is_empty() {
        return Err(Error::Config("no models to evaluate".into()));
    }
    let mut micro = 0.0;
    let mut macro_ = 0.0;
    for m in models {
        let (a, b) = evaluate_model(m, spec, test)?;
        micro += a;
        macro_ += b;
    }
    let k = models.len() as f64;
    Ok((micro / k, macro_ / k))
}

/// First round (1-based) whose micro-F1 reaches `theta`.
pub fn rounds_to_threshold(micro_f1: &[f64], theta: f64) -> Result<Option<u64>> {
    if !(theta > 0.0 && theta < 100.0) {
        return Err(Error::Config(format!("threshold {theta} is outside (0, 100)")));
    }
    Ok(micro_f1.iter().position(|&f| f >= theta).map(|i| i as u64 + 1))
}
