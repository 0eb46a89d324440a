//! Analytic per-client communication footprint, in transmitted floats.

use serde::{Deserialize, Serialize};

use super::StrategyKind;
use crate::nn::{Layout, SegmentKind};

/// Which part of a model vector goes over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMask {
    All,
    /// Every segment except BN parameters and statistics.
    ExcludeBatchNorm,
}

impl ModelMask {
    pub fn for_strategy(kind: StrategyKind) -> Self {
        match kind {
            StrategyKind::FedBn => ModelMask::ExcludeBatchNorm,
            _ => ModelMask::All,
        }
    }

    pub fn count(self, layout: &Layout) -> usize {
        match self {
            ModelMask::All => layout.len(),
            ModelMask::ExcludeBatchNorm => layout.count_where(|k: SegmentKind| !k.is_batch_norm()),
        }
    }

    pub fn includes(self, kind: SegmentKind) -> bool {
        match self {
            ModelMask::All => true,
            ModelMask::ExcludeBatchNorm => !kind.is_batch_norm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommFootprint {
    pub up: usize,
    pub down: usize,
}

/// Floats one client uploads and downloads in one round.
///
/// Uploads: the model (FedBN without BN segments); SCAFFOLD adds the control
/// variate delta, FedDC adds it and the drift variable; FedNova adds its
/// scalar step count. Downloads: the served model (personalized for pFedLA,
/// non-BN part for FedBN) plus the global control variate for SCAFFOLD/FedDC.
pub fn comm_footprint(kind: StrategyKind, layout: &Layout) -> CommFootprint {
    let model = ModelMask::for_strategy(kind).count(layout);
    let w = layout.len();
    let up = match kind {
        StrategyKind::Scaffold => 2 * w,
        StrategyKind::FedDc => 3 * w,
        StrategyKind::FedNova => w + 1,
        _ => model,
    };
    let down = if kind.uses_control_variates() { 2 * w } else { model };
    CommFootprint { up, down }
}
