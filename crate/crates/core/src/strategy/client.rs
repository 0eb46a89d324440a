//! Client state and local training for every strategy.

use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use super::comm::ModelMask;
use super::{StrategyHyperparams, StrategyKind};
use crate::error::{Error, Result};
use crate::nn::{
    backward, bce_loss, commit_running_stats, forward, model_contrastive_loss, Batch, ForwardTrace, Mode, ModelSpec,
    OptimizerConfig, OptimizerKind, OptimizerState, ParamVector,
};
use crate::seed::{stream, STREAM_CLIENT};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u64,
    pub data: Arc<Batch>,
    /// Latest locally trained model `w_i`. FedBN keeps its BN segments here.
    pub local: ParamVector,
    /// Client control variate `v_i` (SCAFFOLD, FedDC).
    pub control: Option<ParamVector>,
    /// Local drift `h_i` (FedDC).
    pub drift: Option<ParamVector>,
    /// Model from the previous round (MOON).
    pub prev_local: Option<ParamVector>,
    optimizer: OptimizerState,
}

impl ClientState {
    /// Fresh state: `v_i = h_i = 0`, previous model = the initial global model.
    pub fn new(
        kind: StrategyKind,
        client_id: u64,
        data: Arc<Batch>,
        init: &ParamVector,
        optimizer: OptimizerConfig,
    ) -> Self {
        ClientState {
            client_id,
            data,
            local: init.clone(),
            control: kind.uses_control_variates().then(|| init.zeros_like()),
            drift: (kind == StrategyKind::FedDc).then(|| init.zeros_like()),
            prev_local: (kind == StrategyKind::Moon).then(|| init.clone()),
            optimizer: OptimizerState::new(optimizer),
        }
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    /// Round index, used only to derive the shuffling stream.
    pub round: u64,
    pub seed: u64,
}

/// What the server sends one client.
#[derive(Debug, Clone)]
pub struct Served {
    pub params: ParamVector,
    pub mask: ModelMask,
    /// Global control variate `v` (SCAFFOLD, FedDC).
    pub control: Option<ParamVector>,
}

impl Served {
    pub fn floats(&self) -> usize {
        self.mask.count(self.params.layout()) + self.control.as_ref().map_or(0, ParamVector::len)
    }
}

/// What one client sends back.
#[derive(Debug, Clone)]
pub struct Payload {
    pub model: ParamVector,
    pub mask: ModelMask,
    pub control_delta: Option<ParamVector>,
    pub drift: Option<ParamVector>,
    /// FedNova's local step count.
    pub step_count: Option<u64>,
}

impl Payload {
    pub fn floats(&self) -> usize {
        self.mask.count(self.model.layout())
            + self.control_delta.as_ref().map_or(0, ParamVector::len)
            + self.drift.as_ref().map_or(0, ParamVector::len)
            + usize::from(self.step_count.is_some())
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: u64,
    pub payload: Payload,
    pub num_steps: u64,
    pub num_samples: usize,
    /// Mean of the per-step local objective.
    pub mean_loss: f64,
    pub wall: Duration,
}

/// Strategy-specific pieces of the local objective that do not change within
/// a round.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'a> {
    pub kind: StrategyKind,
    pub hp: &'a StrategyHyperparams,
    pub served: &'a ParamVector,
    pub drift: Option<&'a ParamVector>,
    pub prev_local: Option<&'a ParamVector>,
}

/// Local objective on one batch: BCE plus the strategy's regularizer.
/// Returns the value, its gradient and the train-mode trace.
pub fn objective(
    terms: &LossTerms<'_>,
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(f64, ParamVector, ForwardTrace)> {
    let trace = forward(params, spec, batch.features.view(), Mode::Train)?;
    let (mut loss, dlogits) = bce_loss(trace.logits.view(), batch.labels.view())?;
    let mut dfeatures = None;
    if terms.kind == StrategyKind::Moon && terms.hp.mu != 0.0 {
        let prev = terms.prev_local.ok_or_else(|| Error::Contract("MOON needs the previous local model".into()))?;
        let global = forward(terms.served, spec, batch.features.view(), Mode::Eval)?;
        let previous = forward(prev, spec, batch.features.view(), Mode::Eval)?;
        let (l, g) = contrastive_term(trace.features(), global.features(), previous.features(), terms.hp.tau)?;
        loss += terms.hp.mu * l;
        dfeatures = Some(g * terms.hp.mu);
    }
    let mut grad = backward(params, spec, &trace, dlogits.view(), dfeatures.as_ref().map(|g| g.view()))?;
    match terms.kind {
        StrategyKind::FedProx if terms.hp.gamma != 0.0 => {
            let gamma = terms.hp.gamma;
            loss += 0.5 * gamma * trainable_sq_dist(params, terms.served, None);
            add_scaled_gap(&mut grad, gamma, params, terms.served, None);
        }
        StrategyKind::FedDc if terms.hp.feddc_penalty_weight != 0.0 => {
            let drift = terms.drift.ok_or_else(|| Error::Contract("FedDC needs its drift variable".into()))?;
            let lambda = terms.hp.feddc_penalty_weight;
            loss += lambda * trainable_sq_dist(params, terms.served, Some(drift));
            add_scaled_gap(&mut grad, 2.0 * lambda, params, terms.served, Some(drift));
        }
        _ => {}
    }
    Ok((loss, grad, trace))
}

/// MOON term over the rows whose three feature vectors are all nonzero,
/// rescaled to a mean over the whole batch. A dead ReLU layer can zero a
/// sample's features; such samples contribute nothing.
fn contrastive_term(
    local: ArrayView2<'_, f64>,
    global: ArrayView2<'_, f64>,
    previous: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let nonzero = |m: ArrayView2<'_, f64>, i: usize| m.row(i).iter().any(|&v| v != 0.0);
    let n = local.nrows();
    let keep: Vec<usize> =
        (0..n).filter(|&i| nonzero(local, i) && nonzero(global, i) && nonzero(previous, i)).collect();
    if keep.len() == n {
        return model_contrastive_loss(local, global, previous, tau);
    }
    let mut grad = Array2::zeros(local.dim());
    if keep.is_empty() {
        return Ok((0.0, grad));
    }
    let (l, g) = model_contrastive_loss(
        local.select(Axis(0), &keep).view(),
        global.select(Axis(0), &keep).view(),
        previous.select(Axis(0), &keep).view(),
        tau,
    )?;
    let scale = keep.len() as f64 / n as f64;
    for (k, &i) in keep.iter().enumerate() {
        grad.row_mut(i).assign(&(&g.row(k) * scale));
    }
    Ok((l * scale, grad))
}

/// `||w - anchor + extra||^2` over trainable segments.
fn trainable_sq_dist(w: &ParamVector, anchor: &ParamVector, extra: Option<&ParamVector>) -> f64 {
    let mut total = 0.0;
    for seg in w.layout().trainable() {
        let e = extra.map(|x| x.slice(seg));
        for (k, (a, b)) in w.slice(seg).iter().zip(anchor.slice(seg)).enumerate() {
            let d = a - b + e.map_or(0.0, |e| e[k]);
            total += d * d;
        }
    }
    total
}

/// `grad += c * (w - anchor + extra)` over trainable segments.
fn add_scaled_gap(grad: &mut ParamVector, c: f64, w: &ParamVector, anchor: &ParamVector, extra: Option<&ParamVector>) {
    let layout = w.layout().clone();
    for seg in layout.trainable() {
        let e = extra.map(|x| x.slice(seg));
        let (ws, an) = (w.slice(seg), anchor.slice(seg));
        for (k, g) in grad.slice_mut(seg).iter_mut().enumerate() {
            *g += c * (ws[k] - an[k] + e.map_or(0.0, |e| e[k]));
        }
    }
}

/// Runs `E` epochs of mini-batch training from the served model and returns
/// the client's upload. Client state (model, control variate, drift,
/// previous model) is updated in place.
pub fn local_train(
    kind: StrategyKind,
    hp: &StrategyHyperparams,
    client: &mut ClientState,
    served: &Served,
    spec: &ModelSpec,
    cfg: &LocalTrainConfig,
) -> Result<ClientUpdate> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    served.params.check_layout(&client.local)?;
    let start = Instant::now();
    let served_params = &served.params;

    let mut w = served_params.clone();
    if kind == StrategyKind::FedBn {
        w.copy_segments_from(&client.local, |k| k.is_batch_norm());
    }
    let w_start = w.clone();

    let correction =
        match (kind.uses_control_variates() && !hp.freeze_control_variates, &served.control, &client.control) {
            (true, Some(v), Some(vi)) => Some(v.sub(vi)),
            (true, _, _) => {
                return Err(Error::Protocol(format!("client {} is missing a control variate", client.client_id)))
            }
            _ => None,
        };

    let terms = LossTerms {
        kind,
        hp,
        served: served_params,
        drift: client.drift.as_ref(),
        prev_local: client.prev_local.as_ref(),
    };
    client.optimizer.reset();
    let mut rng = stream(cfg.seed, &[STREAM_CLIENT, client.client_id, cfg.round]);
    let n = client.data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0u64;
    let mut loss_sum = 0.0;
    // Under SGD, (w_served - w_end) / (U eta) is exactly the mean corrected
    // gradient; with Adam the displacement has a different scale, so the
    // mean is accumulated directly.
    let adaptive = client.optimizer.config().kind != OptimizerKind::Sgd;
    let mut grad_sum = (adaptive && correction.is_some()).then(|| w.zeros_like());
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let batch = client.data.select(rows);
            let (loss, mut grad, trace) = objective(&terms, &w, spec, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite local loss for client {} in round {} at step {}",
                    client.client_id,
                    cfg.round,
                    steps + 1
                )));
            }
            if let Some(c) = &correction {
                grad.axpy(1.0, c);
                grad.mask_non_trainable();
            }
            if let Some(sum) = grad_sum.as_mut() {
                sum.axpy(1.0, &grad);
            }
            commit_running_stats(&mut w, spec, &trace)?;
            client.optimizer.step(&mut w, &grad, cfg.eta).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("client {} round {}: {m}", client.client_id, cfg.round)),
                other => other,
            })?;
            steps += 1;
            loss_sum += loss;
        }
    }
    if !w.is_finite() {
        return Err(Error::Numeric(format!(
            "client {} produced non-finite parameters in round {}",
            client.client_id, cfg.round
        )));
    }

    let mut control_delta = None;
    if kind.uses_control_variates() {
        let vi = client.control.as_mut().expect("checked above");
        let mut delta = vi.zeros_like();
        if !hp.freeze_control_variates {
            let v = served.control.as_ref().expect("checked above");
            // v_i+ = v_i - v + (w_served - w_i) / (U eta)
            let mut fresh = vi.sub(v);
            match &grad_sum {
                Some(sum) => fresh.axpy(1.0 / steps as f64, sum),
                None => fresh.axpy(1.0 / (steps as f64 * cfg.eta), &served_params.sub(&w)),
            }
            fresh.mask_non_trainable();
            delta = fresh.sub(vi);
            *vi = fresh;
        }
        control_delta = Some(delta);
    }

    let mut drift = None;
    if kind == StrategyKind::FedDc {
        let h = client.drift.as_mut().expect("FedDC state has a drift variable");
        let mut dw = w.sub(&w_start);
        dw.mask_non_trainable();
        h.axpy(1.0, &dw);
        drift = Some(h.clone());
    }

    if kind == StrategyKind::Moon {
        client.prev_local = Some(w.clone());
    }
    client.local = w.clone();

    Ok(ClientUpdate {
        client_id: client.client_id,
        payload: Payload {
            model: w,
            mask: ModelMask::for_strategy(kind),
            control_delta,
            drift,
            step_count: (kind == StrategyKind::FedNova).then_some(steps),
        },
        num_steps: steps,
        num_samples: n,
        mean_loss: loss_sum / steps as f64,
        wall: start.elapsed(),
    })
}
