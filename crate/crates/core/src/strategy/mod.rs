//! The eight federated algorithms as (local training, aggregation) pairs.
//!
//! Local-training-focused: FedProx, SCAFFOLD, MOON, FedDC. Aggregation-focused:
//! FedNova, FedBN, pFedLA. FedAvg is the shared baseline of both families.

mod client;
mod comm;
mod hypernet;
mod server;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use client::{local_train, objective, ClientState, ClientUpdate, LocalTrainConfig, LossTerms, Payload, Served};
pub use comm::{comm_footprint, CommFootprint, ModelMask};
pub use hypernet::{mix_models, Hypernetwork};
pub use server::{aggregate, weighted_sum, PfedlaState, ServerState};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    FedAvg,
    FedProx,
    Scaffold,
    Moon,
    FedDc,
    FedNova,
    FedBn,
    PFedLa,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::Scaffold,
        StrategyKind::Moon,
        StrategyKind::FedDc,
        StrategyKind::FedNova,
        StrategyKind::FedBn,
        StrategyKind::PFedLa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::Scaffold => "scaffold",
            StrategyKind::Moon => "moon",
            StrategyKind::FedDc => "feddc",
            StrategyKind::FedNova => "fednova",
            StrategyKind::FedBn => "fedbn",
            StrategyKind::PFedLa => "pfedla",
        }
    }

    /// Display name as the algorithms are usually written.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "FedAvg",
            StrategyKind::FedProx => "FedProx",
            StrategyKind::Scaffold => "SCAFFOLD",
            StrategyKind::Moon => "MOON",
            StrategyKind::FedDc => "FedDC",
            StrategyKind::FedNova => "FedNova",
            StrategyKind::FedBn => "FedBN",
            StrategyKind::PFedLa => "pFedLA",
        }
    }

    /// SCAFFOLD and FedDC carry control variates.
    pub fn uses_control_variates(self) -> bool {
        matches!(self, StrategyKind::Scaffold | StrategyKind::FedDc)
    }

    /// Strategies whose evaluation averages over per-client models.
    pub fn is_personalized(self) -> bool {
        matches!(self, StrategyKind::FedBn | StrategyKind::PFedLa)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyHyperparams {
    /// FedProx proximal weight.
    pub gamma: f64,
    /// MOON temperature.
    pub tau: f64,
    /// MOON contrastive-loss weight.
    pub mu: f64,
    pub feddc_penalty_weight: f64,
    pub pfedla_embed_dim: usize,
    pub pfedla_hidden: usize,
    /// Hypernetwork learning rate; the local learning rate when unset.
    pub pfedla_hyper_lr: Option<f64>,
    /// Keep every control variate at zero (SCAFFOLD/FedDC reduce to FedAvg
    /// updates). For ablations and identity checks.
    pub freeze_control_variates: bool,
    /// Add the drift variables to the FedDC aggregate.
    pub feddc_fold_drift: bool,
    /// Scale aggregated FedNova parameters (not deltas) by the inverse step
    /// count. Shrinks the model toward zero; kept for comparison.
    pub fednova_scale_parameters: bool,
}

impl Default for StrategyHyperparams {
    fn default() -> Self {
        StrategyHyperparams {
            gamma: 0.01,
            tau: 1.0,
            mu: 0.1,
            feddc_penalty_weight: 1.0,
            pfedla_embed_dim: 8,
            pfedla_hidden: 32,
            pfedla_hyper_lr: None,
            freeze_control_variates: false,
            feddc_fold_drift: true,
            fednova_scale_parameters: false,
        }
    }
}

impl StrategyHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("strategy.gamma must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("strategy.tau must be > 0".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config("strategy.mu must be >= 0".into()));
        }
        if !(self.feddc_penalty_weight >= 0.0) {
            return Err(Error::Config("strategy.feddc_penalty_weight must be >= 0".into()));
        }
        if self.pfedla_embed_dim == 0 || self.pfedla_hidden == 0 {
            return Err(Error::Config("pFedLA hypernetwork sizes must be >= 1".into()));
        }
        if let Some(lr) = self.pfedla_hyper_lr {
            if !(lr > 0.0) {
                return Err(Error::Config("strategy.pfedla_hyper_lr must be > 0".into()));
            }
        }
        Ok(())
    }
}
