#![allow(dead_code)]

use fbsim::data::ScenarioKind;
use fbsim::fl::{Experiment, ExperimentConfig};
use fbsim::nn::{
    build_model, finite_diff_grad, max_relative_error, Batch, ModelSpec, OptimizerConfig, ParamVector, SegmentKind,
};
use fbsim::strategy::{mix_models, objective, Hypernetwork, LossTerms, StrategyHyperparams, StrategyKind};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

pub fn randomize(p: &mut ParamVector, rng: &mut ChaCha8Rng, scale: f64) {
    let layout = p.layout().clone();
    for seg in layout.segments() {
        let (lo, hi) = match seg.kind {
            SegmentKind::BnRunningVar | SegmentKind::BnGamma => (0.5, 1.5),
            _ => (-scale, scale),
        };
        for v in p.slice_mut(seg) {
            *v = rng.gen_range(lo..hi);
        }
    }
}

pub fn batch(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let x = Array2::from_shape_fn((n, spec.input_dim), |_| rng.gen_range(-2.0..2.0));
    let y = Array2::from_shape_fn((n, spec.num_classes), |_| f64::from(rng.gen_bool(0.4)));
    Batch::new(x, y).unwrap()
}

pub fn spec_for(i: u64) -> ModelSpec {
    match i % 3 {
        0 => ModelSpec::new(3, vec![4], 2, true),
        1 => ModelSpec::new(4, vec![5, 3], 3, true),
        _ => ModelSpec::new(3, vec![4], 2, false),
    }
}

/// Worst relative error of the analytic local-objective gradient over
/// `INSTANCES` random models, batches and auxiliary vectors.
pub fn objective_gradient_error(kind: StrategyKind, hp: &StrategyHyperparams) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let spec = spec_for(i);
        let mut w = build_model(&spec, i).unwrap();
        randomize(&mut w, &mut rng, 0.8);
        let mut served = w.clone();
        randomize(&mut served, &mut rng, 0.8);
        let mut drift = w.zeros_like();
        randomize(&mut drift, &mut rng, 0.3);
        drift.mask_non_trainable();
        let mut prev = w.clone();
        randomize(&mut prev, &mut rng, 0.8);
        let b = batch(&spec, 6, &mut rng);
        let terms = LossTerms { kind, hp, served: &served, drift: Some(&drift), prev_local: Some(&prev) };
        let (_, analytic, _) = objective(&terms, &w, &spec, &b).unwrap();
        let numeric = finite_diff_grad(&w, |p| Ok(objective(&terms, p, &spec, &b)?.0), EPS).unwrap();
        worst = worst.max(max_relative_error(analytic.values(), numeric.values(), FLOOR));
    }
    worst
}

/// Worst relative error of the gradient of `mix(alpha(t)) . u` with respect
/// to the hypernetwork parameters.
pub fn hypernet_gradient_error() -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + i);
        let spec = spec_for(i);
        let k = 2 + (i as usize % 3);
        let models: Vec<ParamVector> = (0..k)
            .map(|j| {
                let mut m = build_model(&spec, j as u64).unwrap();
                randomize(&mut m, &mut rng, 1.0);
                m
            })
            .collect();
        let refs: Vec<&ParamVector> = models.iter().collect();
        let layers = models[0].layout().segments().len();
        let mut hn = Hypernetwork::new(4, 6, layers, k, &mut rng).unwrap();
        let mut hp = hn.params().clone();
        randomize(&mut hp, &mut rng, 1.0);
        *hn.params_mut() = hp;
        let mut u = models[0].zeros_like();
        randomize(&mut u, &mut rng, 1.0);
        let analytic = hn.grad_of_mix_dot(&refs, &u).unwrap();
        let template = hn.clone();
        let numeric = finite_diff_grad(
            hn.params(),
            |p| {
                let mut h = template.clone();
                *h.params_mut() = p.clone();
                Ok(mix_models(&h.forward(), &refs)?.dot(&u))
            },
            EPS,
        )
        .unwrap();
        worst = worst.max(max_relative_error(analytic.values(), numeric.values(), FLOOR));
    }
    worst
}

/// Small SGD experiment on equal-sized IID clients.
pub fn small_cfg(kind: StrategyKind, clients: usize, rounds: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run.strategy = kind;
    c.run.scenario = ScenarioKind::Ds1Iid;
    c.run.rounds = rounds;
    c.run.seed = 11;
    c.run.record_timing = false;
    c.train.epochs = 2;
    c.train.batch_size = 16;
    c.train.eta = 0.05;
    c.train.optimizer = OptimizerConfig::sgd();
    c.data.num_clients = clients;
    c.data.samples_per_client_mean = 48;
    c.data.input_dim = 8;
    c.data.num_classes = 4;
    c.data.seed = 5;
    c.model = ModelSpec::new(8, vec![12, 6], 4, true);
    c
}

/// Global model after every round.
pub fn trajectory(c: &ExperimentConfig) -> Vec<ParamVector> {
    let mut exp = Experiment::new(c).unwrap();
    (0..c.run.rounds)
        .map(|_| {
            exp.step().unwrap();
            exp.server().global.clone()
        })
        .collect()
}

/// First round at which `c` leaves the FedAvg trajectory, if any.
pub fn departs_from_fedavg(c: &ExperimentConfig) -> Option<usize> {
    let mut fedavg = c.clone();
    fedavg.run.strategy = StrategyKind::FedAvg;
    let base = trajectory(&fedavg);
    let other = trajectory(c);
    base.iter().zip(&other).position(|(a, b)| a != b).map(|r| r + 1)
}
