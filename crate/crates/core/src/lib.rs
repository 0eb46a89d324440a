//! Federated learning simulator for multi-label classification.
//!
//! Eight algorithms (FedAvg, FedProx, SCAFFOLD, MOON, FedDC, FedNova, FedBN,
//! pFedLA) run over synthetic non-IID clients on a small MLP, with exact
//! communication ledgers and local-training timings.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fl;
pub mod nn;
pub mod report;
pub mod seed;
pub mod strategy;

pub use error::{Error, Result};
