//! Analytic gradients of every local objective against central differences.

mod common;

use common::{batch, hypernet_gradient_error, objective_gradient_error, randomize, TOL};
use fbsim::nn::{backward, bce_loss, build_model, forward, Mode, ModelSpec};
use fbsim::strategy::{objective, LossTerms, StrategyHyperparams, StrategyKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(kind: StrategyKind, hp: StrategyHyperparams) {
    let worst = objective_gradient_error(kind, &hp);
    assert!(worst < TOL, "{kind}: worst relative error {worst:e}");
}

#[test]
fn bce_gradient() {
    check(StrategyKind::FedAvg, StrategyHyperparams::default());
}

#[test]
fn fedprox_gradient() {
    check(StrategyKind::FedProx, StrategyHyperparams::default());
    check(StrategyKind::FedProx, StrategyHyperparams { gamma: 0.7, ..Default::default() });
}

#[test]
fn moon_gradient() {
    check(StrategyKind::Moon, StrategyHyperparams::default());
    check(StrategyKind::Moon, StrategyHyperparams { mu: 2.0, tau: 0.5, ..Default::default() });
}

#[test]
fn feddc_gradient() {
    check(StrategyKind::FedDc, StrategyHyperparams::default());
    check(StrategyKind::FedDc, StrategyHyperparams { feddc_penalty_weight: 0.3, ..Default::default() });
}

#[test]
fn logistic_regression_closed_form() {
    let spec = ModelSpec::new(3, vec![], 2, false);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut w = build_model(&spec, 0).unwrap();
    randomize(&mut w, &mut rng, 1.0);
    let b = batch(&spec, 7, &mut rng);
    let trace = forward(&w, &spec, b.features.view(), Mode::Train).unwrap();
    let (_, dlogits) = bce_loss(trace.logits.view(), b.labels.view()).unwrap();
    let grad = backward(&w, &spec, &trace, dlogits.view(), None).unwrap();
    // head.weight is [P x d]: (sigma(z) - y)^T x / n
    let residual = trace.probabilities() - &b.labels;
    let expected = residual.t().dot(&b.features) / 7.0;
    let got = grad.segment("head.weight").unwrap();
    for (g, e) in got.iter().zip(expected.iter()) {
        assert!((g - e).abs() < 1e-14);
    }
}

#[test]
fn running_statistics_get_zero_gradient() {
    let spec = ModelSpec::new(3, vec![4], 2, true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = build_model(&spec, 0).unwrap();
    let b = batch(&spec, 5, &mut rng);
    let hp = StrategyHyperparams { gamma: 1.0, ..Default::default() };
    let mut served = w.clone();
    randomize(&mut served, &mut rng, 1.0);
    let terms = LossTerms { kind: StrategyKind::FedProx, hp: &hp, served: &served, drift: None, prev_local: None };
    let (_, g, _) = objective(&terms, &w, &spec, &b).unwrap();
    for seg in w.layout().segments().iter().filter(|s| !s.kind.is_trainable()) {
        assert!(g.slice(seg).iter().all(|&v| v == 0.0), "{}", seg.name);
    }
}

#[test]
fn pfedla_chain_gradient() {
    let worst = hypernet_gradient_error();
    assert!(worst < TOL, "worst relative error {worst:e}");
}
