//! Server state, serving and aggregation.

use rand_chacha::ChaCha8Rng;

use super::client::{ClientUpdate, Served};
use super::comm::ModelMask;
use super::hypernet::{mix_models, Hypernetwork};
use super::{StrategyHyperparams, StrategyKind};
use crate::error::{Error, Result};
use crate::nn::ParamVector;

#[derive(Debug, Clone)]
pub struct PfedlaState {
    pub hypernets: Vec<Hypernetwork>,
    /// Latest model received from each client.
    pub models: Vec<ParamVector>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub kind: StrategyKind,
    pub hp: StrategyHyperparams,
    pub num_clients: usize,
    pub global: ParamVector,
    /// Global control variate `v` (SCAFFOLD, FedDC).
    pub control: Option<ParamVector>,
    pub pfedla: Option<PfedlaState>,
    /// Index of the next round to run; starts at 1.
    pub round: u64,
}

impl ServerState {
    /// `eta` is the hypernetwork learning rate fallback for pFedLA.
    pub fn new(
        kind: StrategyKind,
        hp: StrategyHyperparams,
        init: ParamVector,
        num_clients: usize,
        eta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        hp.validate()?;
        if num_clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        let pfedla = if kind == StrategyKind::PFedLa {
            let layers = init.layout().segments().len();
            let hypernets = (0..num_clients)
                .map(|_| Hypernetwork::new(hp.pfedla_embed_dim, hp.pfedla_hidden, layers, num_clients, rng))
                .collect::<Result<Vec<_>>>()?;
            Some(PfedlaState {
                hypernets,
                models: vec![init.clone(); num_clients],
                lr: hp.pfedla_hyper_lr.unwrap_or(eta),
            })
        } else {
            None
        };
        Ok(ServerState {
            kind,
            num_clients,
            control: kind.uses_control_variates().then(|| init.zeros_like()),
            global: init,
            hp,
            pfedla,
            round: 1,
        })
    }

    /// Model and auxiliary state sent to `client_id` at the start of a round.
    pub fn serve(&self, client_id: usize) -> Result<Served> {
        if client_id >= self.num_clients {
            return Err(Error::Protocol(format!("unknown client {client_id}")));
        }
        let params = match &self.pfedla {
            Some(p) => personalized(p, client_id)?,
            None => self.global.clone(),
        };
        Ok(Served { params, mask: ModelMask::for_strategy(self.kind), control: self.control.clone() })
    }

    /// Models scored by evaluation: the global model, or one per client for
    /// FedBN (global non-BN segments + each client's BN) and pFedLA.
    pub fn eval_models(&self, client_models: &[&ParamVector]) -> Result<Vec<ParamVector>> {
        match self.kind {
            StrategyKind::FedBn => Ok(client_models
                .iter()
                .map(|local| {
                    let mut m = self.global.clone();
                    m.copy_segments_from(local, |k| k.is_batch_norm());
                    m
                })
                .collect()),
            StrategyKind::PFedLa => {
                let p = self.pfedla.as_ref().expect("pFedLA server state");
                (0..self.num_clients).map(|i| personalized(p, i)).collect()
            }
            _ => Ok(vec![self.global.clone()]),
        }
    }

    /// Aggregation weights `|D_i| / |D|`.
    pub fn data_weights(sizes: &[usize]) -> Vec<f64> {
        let total: usize = sizes.iter().sum();
        sizes.iter().map(|&n| n as f64 / total as f64).collect()
    }

    /// Combines a full round of updates, ordered by client id. `served` is
    /// what each client received this round.
    pub fn aggregate(&mut self, updates: &[ClientUpdate], served: &[Served]) -> Result<()> {
        if updates.len() != self.num_clients || served.len() != self.num_clients {
            return Err(Error::Protocol(format!(
                "expected {} client updates, got {}",
                self.num_clients,
                updates.len()
            )));
        }
        for (i, u) in updates.iter().enumerate() {
            if u.client_id != i as u64 {
                return Err(Error::Protocol(format!("update {i} comes from client {}", u.client_id)));
            }
            self.global.check_layout(&u.payload.model)?;
            if u.num_samples == 0 || u.num_steps == 0 {
                return Err(Error::Protocol(format!("client {i} reported no local work")));
            }
        }
        let sizes: Vec<usize> = updates.iter().map(|u| u.num_samples).collect();
        let p = Self::data_weights(&sizes);

        match self.kind {
            StrategyKind::FedAvg | StrategyKind::FedProx | StrategyKind::Moon | StrategyKind::Scaffold => {
                self.global = weighted_sum(updates.iter().map(|u| &u.payload.model).zip(p.iter().copied()))?;
            }
            StrategyKind::FedDc => {
                if self.hp.feddc_fold_drift {
                    let folded = updates
                        .iter()
                        .map(|u| {
                            let h = u.payload.drift.as_ref().ok_or_else(|| missing(u, "drift"))?;
                            let mut m = u.payload.model.clone();
                            m.axpy(1.0, h);
                            Ok(m)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    self.global = weighted_sum(folded.iter().zip(p.iter().copied()))?;
                } else {
                    self.global = weighted_sum(updates.iter().map(|u| &u.payload.model).zip(p.iter().copied()))?;
                }
            }
            StrategyKind::FedNova => self.aggregate_fednova(updates, &p)?,
            StrategyKind::FedBn => {
                let mixed = weighted_sum(updates.iter().map(|u| &u.payload.model).zip(p.iter().copied()))?;
                self.global.copy_segments_from(&mixed, |k| !k.is_batch_norm());
            }
            StrategyKind::PFedLa => {
                let state = self.pfedla.as_mut().expect("pFedLA server state");
                let lr = state.lr;
                let old: Vec<&ParamVector> = state.models.iter().collect();
                let mut stepped = state.hypernets.clone();
                for (i, hn) in stepped.iter_mut().enumerate() {
                    hn.step_towards(&old, &served[i].params, &updates[i].payload.model, lr)?;
                }
                state.hypernets = stepped;
                state.models = updates.iter().map(|u| u.payload.model.clone()).collect();
                // the global model is kept as the plain weighted mean for reference
                self.global = weighted_sum(state.models.iter().zip(p.iter().copied()))?;
            }
        }

        if self.kind.uses_control_variates() {
            let k = 1.0 / self.num_clients as f64;
            let deltas = updates
                .iter()
                .map(|u| u.payload.control_delta.as_ref().ok_or_else(|| missing(u, "control variate delta")))
                .collect::<Result<Vec<_>>>()?;
            let mean = weighted_sum(deltas.into_iter().map(|d| (d, k)))?;
            self.control.as_mut().expect("control variate state").axpy(1.0, &mean);
        }

        if !self.global.is_finite() {
            return Err(Error::Numeric(format!("aggregated model is non-finite after round {}", self.round)));
        }
        self.round += 1;
        Ok(())
    }

    fn aggregate_fednova(&mut self, updates: &[ClientUpdate], p: &[f64]) -> Result<()> {
        let steps = updates
            .iter()
            .map(|u| u.payload.step_count.ok_or_else(|| missing(u, "step count")))
            .collect::<Result<Vec<u64>>>()?;
        if self.hp.fednova_scale_parameters {
            // w = sum_i p_i w_i / U_i
            let coeffs = p.iter().zip(&steps).map(|(&pi, &u)| pi / u as f64);
            self.global = weighted_sum(updates.iter().map(|u| &u.payload.model).zip(coeffs))?;
            return Ok(());
        }
        // w = w_prev + tau_eff * sum_i p_i (w_i - w_prev) / U_i
        //   = (1 - sum_i c_i) w_prev + sum_i c_i w_i,  c_i = p_i tau_eff / U_i
        // c_i = n_i S / (N^2 U_i) with S = sum_j n_j U_j, reduced exactly so
        // that equal step counts give exactly the FedAvg weights.
        let n: Vec<u128> = updates.iter().map(|u| u.num_samples as u128).collect();
        let total: u128 = n.iter().sum();
        let s: u128 = n.iter().zip(&steps).map(|(&ni, &u)| ni * u as u128).sum();
        let coeffs: Vec<f64> = n
            .iter()
            .zip(&steps)
            .map(|(&ni, &u)| {
                let (num, den) = (ni * s, total * total * u as u128);
                let g = gcd(num, den);
                (num / g) as f64 / (den / g) as f64
            })
            .collect();
        let mut out = weighted_sum(updates.iter().map(|u| &u.payload.model).zip(coeffs.iter().copied()))?;
        if steps.iter().any(|&u| u != steps[0]) {
            let residual = 1.0 - coeffs.iter().sum::<f64>();
            out.axpy(residual, &self.global);
        }
        self.global = out;
        Ok(())
    }
}

fn personalized(state: &PfedlaState, client_id: usize) -> Result<ParamVector> {
    let models: Vec<&ParamVector> = state.models.iter().collect();
    mix_models(&state.hypernets[client_id].forward(), &models)
}

fn missing(u: &ClientUpdate, what: &str) -> Error {
    Error::Protocol(format!("client {} sent no {what}", u.client_id))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// `0 + sum_i c_i v_i`, accumulated in input order.
pub fn weighted_sum<'a>(terms: impl IntoIterator<Item = (&'a ParamVector, f64)>) -> Result<ParamVector> {
    let mut iter = terms.into_iter().peekable();
    let first = iter.peek().ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?.0;
    let mut out = first.zeros_like();
    for (v, c) in iter {
        out.check_layout(v)?;
        out.axpy(c, v);
    }
    Ok(out)
}

/// Free-function form of [`ServerState::aggregate`].
pub fn aggregate(server: &mut ServerState, updates: &[ClientUpdate], served: &[Served]) -> Result<()> {
    server.aggregate(updates, served)
}
