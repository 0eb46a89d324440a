//! Synthetic multi-label sample pool.
//!
//! Each class owns a prototype vector. A sample draws its label set from
//! per-class prevalences (at least one positive), and its features are the sum
//! of its positive prototypes plus isotropic Gaussian noise. Label noise flips
//! observed label bits after the features are drawn.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, STREAM_POOL};

const MAX_ATTEMPTS: u64 = 10;
/// Fraction of the pool held out as the shared, shift-free test split.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Uniform random split, no shift.
    #[serde(rename = "ds1", alias = "DS1_IID")]
    Ds1Iid,
    /// Dirichlet label skew plus power-law quantity skew.
    #[serde(rename = "ds2", alias = "DS2_LABEL_SKEW")]
    Ds2LabelSkew,
    /// Label skew plus a per-client affine feature transform.
    #[serde(rename = "ds3", alias = "DS3_LABEL_AND_CONCEPT_SHIFT")]
    Ds3LabelAndConceptShift,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] =
        [ScenarioKind::Ds1Iid, ScenarioKind::Ds2LabelSkew, ScenarioKind::Ds3LabelAndConceptShift];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Ds1Iid => "ds1",
            ScenarioKind::Ds2LabelSkew => "ds2",
            ScenarioKind::Ds3LabelAndConceptShift => "ds3",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ScenarioKind::Ds1Iid => 1,
            ScenarioKind::Ds2LabelSkew => 2,
            ScenarioKind::Ds3LabelAndConceptShift => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ScenarioKind::Ds1Iid),
            2 => Some(ScenarioKind::Ds2LabelSkew),
            3 => Some(ScenarioKind::Ds3LabelAndConceptShift),
            _ => None,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ds1" | "ds1_iid" => Ok(ScenarioKind::Ds1Iid),
            "ds2" | "ds2_label_skew" => Ok(ScenarioKind::Ds2LabelSkew),
            "ds3" | "ds3_label_and_concept_shift" => Ok(ScenarioKind::Ds3LabelAndConceptShift),
            other => Err(Error::Config(format!("unknown scenario {other:?} (expected ds1, ds2 or ds3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_clients: usize,
    pub samples_per_client_mean: usize,
    /// Client size weights are `u^exponent` with `u ~ U(0, 1)`; 0 gives equal sizes.
    pub quantity_skew_exponent: f64,
    pub dirichlet_beta: f64,
    pub concept_shift_strength: f64,
    pub label_noise_rate: f64,
    /// Standard deviation of the additive feature noise.
    pub feature_noise: f64,
    /// Standard deviation of the class prototype entries.
    pub prototype_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            input_dim: 32,
            num_classes: 8,
            num_clients: 7,
            samples_per_client_mean: 500,
            quantity_skew_exponent: 1.0,
            dirichlet_beta: 0.1,
            concept_shift_strength: 1.5,
            label_noise_rate: 0.05,
            feature_noise: 1.0,
            prototype_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 {
            return fail("data.input_dim must be >= 1");
        }
        if self.num_classes == 0 {
            return fail("data.num_classes must be >= 1");
        }
        if self.num_clients == 0 {
            return fail("data.num_clients must be >= 1");
        }
        if self.samples_per_client_mean == 0 {
            return fail("data.samples_per_client_mean must be >= 1");
        }
        if !(self.dirichlet_beta > 0.0) {
            return fail("data.dirichlet_beta must be > 0");
        }
        if !(self.quantity_skew_exponent >= 0.0) {
            return fail("data.quantity_skew_exponent must be >= 0");
        }
        if !(0.0..0.5).contains(&self.label_noise_rate) {
            return fail("data.label_noise_rate must lie in [0, 0.5)");
        }
        if !(self.concept_shift_strength >= 0.0) {
            return fail("data.concept_shift_strength must be >= 0");
        }
        if !(self.feature_noise >= 0.0) || !(self.prototype_scale > 0.0) {
            return fail("data.feature_noise must be >= 0 and data.prototype_scale > 0");
        }
        Ok(())
    }

    pub fn train_size(&self) -> usize {
        self.num_clients * self.samples_per_client_mean
    }

    pub fn test_size(&self) -> usize {
        // train : test = 80 : 20
        ((self.train_size() as f64) * TEST_FRACTION / (1.0 - TEST_FRACTION)).ceil() as usize
    }
}

/// Features and binary labels of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub features: Array2<f64>,
    pub labels: Array2<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    pub train: Samples,
    /// Shared global test split. Never transformed.
    pub test: Samples,
    pub prototypes: Array2<f64>,
    /// Labels before label noise, aligned with `train` then `test`.
    pub clean_labels: Array2<f64>,
    pub seed: u64,
}

pub fn generate_global_pool(cfg: &SyntheticConfig) -> Result<SamplePool> {
    cfg.validate()?;
    let mut last_missing = Vec::new();
    for attempt in 0..MAX_ATTEMPTS {
        let pool = draw_pool(cfg, attempt);
        let missing: Vec<usize> = (0..cfg.num_classes)
            .filter(|&c| pool.train.labels.column(c).iter().chain(pool.test.labels.column(c)).all(|&y| y == 0.0))
            .collect();
        if missing.is_empty() {
            return Ok(pool);
        }
        last_missing = missing;
    }
    Err(Error::Config(format!(
        "pool generation left classes {last_missing:?} without positives after {MAX_ATTEMPTS} attempts; \
         increase samples_per_client_mean or num_clients"
    )))
}

fn draw_pool(cfg: &SyntheticConfig, attempt: u64) -> SamplePool {
    let mut rng = seed::stream(cfg.seed, &[STREAM_POOL, attempt]);
    let (d, p) = (cfg.input_dim, cfg.num_classes);
    let prototypes = Array2::from_shape_fn((p, d), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * cfg.prototype_scale
    });
    let prevalence_dist = Uniform::new(0.1, 0.4);
    let prevalence: Array1<f64> = (0..p).map(|_| prevalence_dist.sample(&mut rng)).collect();
    let total_prev: f64 = prevalence.sum();

    let n = cfg.train_size() + cfg.test_size();
    let mut features = Array2::zeros((n, d));
    let mut clean = Array2::zeros((n, p));
    let mut observed = Array2::zeros((n, p));
    for i in 0..n {
        let mut any = false;
        for c in 0..p {
            if rng.gen::<f64>() < prevalence[c] {
                clean[[i, c]] = 1.0;
                any = true;
            }
        }
        if !any {
            let mut u = rng.gen::<f64>() * total_prev;
            let mut pick = p - 1;
            for c in 0..p {
                if u < prevalence[c] {
                    pick = c;
                    break;
                }
                u -= prevalence[c];
            }
            clean[[i, pick]] = 1.0;
        }
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut x = z * cfg.feature_noise;
            for c in 0..p {
                if clean[[i, c]] == 1.0 {
                    x += prototypes[[c, j]];
                }
            }
            features[[i, j]] = x;
        }
        let mut any = false;
        for c in 0..p {
            let flip = cfg.label_noise_rate > 0.0 && rng.gen::<f64>() < cfg.label_noise_rate;
            let y = if flip { 1.0 - clean[[i, c]] } else { clean[[i, c]] };
            observed[[i, c]] = y;
            any |= y == 1.0;
        }
        if !any {
            observed.row_mut(i).assign(&clean.row(i));
        }
    }
    let n_train = cfg.train_size();
    let split = |m: &Array2<f64>| {
        (m.slice(ndarray::s![..n_train, ..]).to_owned(), m.slice(ndarray::s![n_train.., ..]).to_owned())
    };
    let (train_x, test_x) = split(&features);
    let (train_y, test_y) = split(&observed);
    SamplePool {
        train: Samples { features: train_x, labels: train_y },
        test: Samples { features: test_x, labels: test_y },
        prototypes,
        clean_labels: clean,
        seed: cfg.seed,
    }
}
