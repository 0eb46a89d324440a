//! Flat parameter storage with a named segment map.
//!
//! Every model quantity that travels between clients and the server (weights,
//! gradients, control variates, drift variables) is a [`ParamVector`] over the
//! same [`Layout`], so aggregation is plain index-wise arithmetic.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl SegmentKind {
    /// Running statistics are updated by the forward pass, never by gradients.
    pub fn is_trainable(self) -> bool {
        !matches!(self, SegmentKind::BnRunningMean | SegmentKind::BnRunningVar)
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(
            self,
            SegmentKind::BnGamma | SegmentKind::BnBeta | SegmentKind::BnRunningMean | SegmentKind::BnRunningVar
        )
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            SegmentKind::Weight => 0,
            SegmentKind::Bias => 1,
            SegmentKind::BnGamma => 2,
            SegmentKind::BnBeta => 3,
            SegmentKind::BnRunningMean => 4,
            SegmentKind::BnRunningVar => 5,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SegmentKind::Weight,
            1 => SegmentKind::Bias,
            2 => SegmentKind::BnGamma,
            3 => SegmentKind::BnBeta,
            4 => SegmentKind::BnRunningMean,
            5 => SegmentKind::BnRunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub kind: SegmentKind,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Architecture of the MLP: `input -> [linear -> (BN) -> ReLU]* -> linear head`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// One flag per hidden layer.
    pub use_batch_norm: Vec<bool>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 32,
            hidden_dims: vec![64, 32],
            num_classes: 8,
            use_batch_norm: vec![true, true],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize, batch_norm: bool) -> Self {
        let use_batch_norm = vec![batch_norm; hidden_dims.len()];
        ModelSpec { input_dim, hidden_dims, num_classes, use_batch_norm, ..ModelSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be >= 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("model.hidden_dims entries must be >= 1".into()));
        }
        if self.use_batch_norm.len() != self.hidden_dims.len() {
            return Err(Error::Config(format!(
                "model.use_batch_norm has {} entries for {} hidden layers",
                self.use_batch_norm.len(),
                self.hidden_dims.len()
            )));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("model.bn_eps must be > 0".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("model.bn_momentum must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Width of the penultimate feature vector fed to the head.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn layout(&self) -> Result<Arc<Layout>> {
        self.validate()?;
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, kind: SegmentKind| {
            segments.push(Segment { name, offset, len, kind });
            offset += len;
        };
        let mut fan_in = self.input_dim;
        for (l, (&width, &bn)) in self.hidden_dims.iter().zip(&self.use_batch_norm).enumerate() {
            push(format!("hidden{l}.weight"), width * fan_in, SegmentKind::Weight);
            push(format!("hidden{l}.bias"), width, SegmentKind::Bias);
            if bn {
                push(format!("hidden{l}.bn.gamma"), width, SegmentKind::BnGamma);
                push(format!("hidden{l}.bn.beta"), width, SegmentKind::BnBeta);
                push(format!("hidden{l}.bn.running_mean"), width, SegmentKind::BnRunningMean);
                push(format!("hidden{l}.bn.running_var"), width, SegmentKind::BnRunningVar);
            }
            fan_in = width;
        }
        push("head.weight".into(), self.num_classes * fan_in, SegmentKind::Weight);
        push("head.bias".into(), self.num_classes, SegmentKind::Bias);
        Layout::new(segments).map(Arc::new)
    }
}

/// Ordered, gap-free segment map over `[0, len)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for seg in &segments {
            if seg.offset != cursor {
                return Err(Error::Shape(format!(
                    "segment {} starts at {} but previous segment ended at {}",
                    seg.name, seg.offset, cursor
                )));
            }
            cursor += seg.len;
        }
        Ok(Layout { segments, len: cursor })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind.is_trainable())
    }

    pub fn count_where(&self, pred: impl Fn(SegmentKind) -> bool) -> usize {
        self.segments.iter().filter(|s| pred(s.kind)).map(|s| s.len).sum()
    }

    pub fn batch_norm_count(&self) -> usize {
        self.count_where(SegmentKind::is_batch_norm)
    }
}

#[derive(Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamVector")
            .field("len", &self.values.len())
            .field("segments", &self.layout.segments.len())
            .finish()
    }
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        ParamVector { values: vec![0.0; layout.len], layout }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len {
            return Err(Error::Shape(format!("{} values for a layout of length {}", values.len(), layout.len)));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(self.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn slice(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    pub fn slice_mut(&mut self, seg: &Segment) -> &mut [f64] {
        &mut self.values[seg.range()]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter vectors have different segment maps".into()))
        }
    }

    /// `self += alpha * other` over every coordinate.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert!(self.same_layout(other));
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        ParamVector { values, layout: self.layout.clone() }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Zero every non-trainable coordinate (BN running statistics).
    pub fn mask_non_trainable(&mut self) {
        let layout = self.layout.clone();
        for seg in layout.segments.iter().filter(|s| !s.kind.is_trainable()) {
            self.values[seg.range()].fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copy the segments selected by `pred` from `src`.
    pub fn copy_segments_from(&mut self, src: &ParamVector, pred: impl Fn(SegmentKind) -> bool) {
        debug_assert!(self.same_layout(src));
        let layout = self.layout.clone();
        for seg in layout.segments.iter().filter(|s| pred(s.kind)) {
            self.values[seg.range()].copy_from_slice(&src.values[seg.range()]);
        }
    }
}
