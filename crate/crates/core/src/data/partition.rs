//! Splitting the training pool across clients.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Uniform};

use super::synth::{SamplePool, Samples, ScenarioKind, SyntheticConfig};
use crate::error::{Error, Result};
use crate::seed::{self, STREAM_PARTITION, STREAM_SHIFT};

const MAX_ATTEMPTS: u64 = 10;

/// Per-feature affine map `x -> x * scale + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTransform {
    pub scale: Array1<f64>,
    pub offset: Array1<f64>,
}

impl ShiftTransform {
    pub fn identity(dim: usize) -> Self {
        ShiftTransform { scale: Array1::ones(dim), offset: Array1::zeros(dim) }
    }

    /// Largest deviation from the identity over all coordinates.
    pub fn magnitude(&self) -> f64 {
        self.scale.iter().map(|s| (s - 1.0).abs()).chain(self.offset.iter().map(|o| o.abs())).fold(0.0, f64::max)
    }

    pub fn apply(&self, features: &mut Array2<f64>) {
        for mut row in features.axis_iter_mut(Axis(0)) {
            row *= &self.scale;
            row += &self.offset;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub scenario: ScenarioKind,
    pub seed: u64,
    /// Whether `shift` was applied to `features` (DS3 only).
    pub shift_applied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u64,
    pub features: Array2<f64>,
    pub labels: Array2<f64>,
    pub shift: ShiftTransform,
    pub provenance: Provenance,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Client datasets plus the shared test split they are evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientDataset>,
    pub test: Samples,
}

impl FederatedDataset {
    pub fn input_dim(&self) -> usize {
        self.test.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.test.labels.ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientDataset::len).collect()
    }
}

pub fn partition(pool: &SamplePool, cfg: &SyntheticConfig, scenario: ScenarioKind) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let n = pool.train.len();
    let k = cfg.num_clients;
    if n == 0 {
        return Err(Error::Config("cannot partition an empty pool".into()));
    }
    if k > n {
        return Err(Error::Config(format!("{k} clients for a pool of {n} samples")));
    }
    let mut rng = seed::stream(cfg.seed, &[STREAM_PARTITION]);
    let assignment = match scenario {
        ScenarioKind::Ds1Iid => iid_split(n, k, &mut rng),
        ScenarioKind::Ds2LabelSkew | ScenarioKind::Ds3LabelAndConceptShift => {
            let sizes = draw_sizes(n, k, cfg.quantity_skew_exponent, &mut rng)?;
            label_skew_split(&pool.train.labels, &sizes, cfg.dirichlet_beta, &mut rng)
        }
    };
    let dim = cfg.input_dim;
    let mut shift_rng = seed::stream(cfg.seed, &[STREAM_SHIFT]);
    let clients = assignment
        .into_iter()
        .enumerate()
        .map(|(i, rows)| {
            let mut features = pool.train.features.select(Axis(0), &rows);
            let labels = pool.train.labels.select(Axis(0), &rows);
            let shifted = scenario == ScenarioKind::Ds3LabelAndConceptShift;
            let shift = if shifted {
                let t = draw_shift(dim, cfg.concept_shift_strength, &mut shift_rng);
                t.apply(&mut features);
                t
            } else {
                ShiftTransform::identity(dim)
            };
            ClientDataset {
                client_id: i as u64,
                features,
                labels,
                shift,
                provenance: Provenance { scenario, seed: cfg.seed, shift_applied: shifted },
            }
        })
        .collect();
    Ok(clients)
}

/// Generate the pool and partition it: the full dataset for one scenario.
pub fn generate_dataset(cfg: &SyntheticConfig, scenario: ScenarioKind) -> Result<FederatedDataset> {
    let pool = super::synth::generate_global_pool(cfg)?;
    let clients = partition(&pool, cfg, scenario)?;
    Ok(FederatedDataset { clients, test: pool.test })
}

fn iid_split(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut cursor = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let mut rows = order[cursor..cursor + len].to_vec();
        rows.sort_unstable();
        out.push(rows);
        cursor += len;
    }
    out
}

/// Power-law client sizes summing to `n`, every client non-empty.
fn draw_sizes(n: usize, k: usize, exponent: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    for _ in 0..MAX_ATTEMPTS {
        let weights: Vec<f64> = (0..k).map(|_| (1.0 - rng.gen::<f64>()).powf(exponent)).collect();
        let sizes = apportion(n, &weights);
        if sizes.iter().all(|&s| s > 0) {
            return Ok(sizes);
        }
    }
    Err(Error::Config(format!(
        "a client received 0 samples in {MAX_ATTEMPTS} size draws (n = {n}, K = {k}, exponent = {exponent})"
    )))
}

/// Largest-remainder apportionment of `n` proportionally to `weights`.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    sizes
}

/// Assign every sample to a client with probability proportional to that
/// client's Dirichlet share of the sample's primary class, restricted to
/// clients with remaining capacity.
fn label_skew_split(labels: &Array2<f64>, sizes: &[usize], beta: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = sizes.len();
    let p = labels.ncols();
    let shares: Vec<Vec<f64>> = if k == 1 {
        vec![vec![1.0]; p]
    } else {
        let dir = Dirichlet::new_with_size(beta, k).expect("beta > 0 and K >= 2");
        (0..p).map(|_| dir.sample(rng)).collect()
    };
    let mut order: Vec<usize> = (0..labels.nrows()).collect();
    order.shuffle(rng);
    let mut capacity = sizes.to_vec();
    let mut out = vec![Vec::new(); k];
    let mut weights = vec![0.0; k];
    for &row in &order {
        let positives: Vec<usize> = (0..p).filter(|&c| labels[[row, c]] == 1.0).collect();
        let class = positives[rng.gen_range(0..positives.len())];
        for j in 0..k {
            let share = shares[class][j];
            weights[j] = if capacity[j] > 0 && share.is_finite() { share } else { 0.0 };
        }
        let mut total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            for j in 0..k {
                weights[j] = if capacity[j] > 0 { 1.0 } else { 0.0 };
            }
            total = weights.iter().sum();
        }
        let mut u = rng.gen::<f64>() * total;
        let mut pick = None;
        for (j, &wj) in weights.iter().enumerate() {
            if wj > 0.0 {
                pick = Some(j);
                if u < wj {
                    break;
                }
                u -= wj;
            }
        }
        let pick = pick.expect("total capacity equals pool size");
        capacity[pick] -= 1;
        out[pick].push(row);
    }
    for rows in &mut out {
        rows.sort_unstable();
    }
    out
}

fn draw_shift(dim: usize, strength: f64, rng: &mut ChaCha8Rng) -> ShiftTransform {
    if strength == 0.0 {
        return ShiftTransform::identity(dim);
    }
    let scale_dist = Uniform::new_inclusive(1.0 - strength, 1.0 + strength);
    let offset_dist = Uniform::new_inclusive(-strength, strength);
    let scale = (0..dim).map(|_| scale_dist.sample(rng)).collect();
    let offset = (0..dim).map(|_| offset_dist.sample(rng)).collect();
    ShiftTransform { scale, offset }
}
