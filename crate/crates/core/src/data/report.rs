use serde::{Deserialize, Serialize};

use super::partition::ClientDataset;
use crate::error::{Error, Result};

/// Label-distribution divergence across clients. JS divergences use natural
/// logarithms, so they lie in `[0, ln 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    /// Per-client label prevalence (fraction of samples carrying each class).
    pub prevalence: Vec<Vec<f64>>,
    pub js_divergence: Vec<Vec<f64>>,
    pub client_sizes: Vec<usize>,
    pub shift_magnitudes: Vec<f64>,
    pub mean_js: f64,
    pub max_js: f64,
}

pub fn heterogeneity_report(clients: &[ClientDataset]) -> Result<HeterogeneityReport> {
    if clients.is_empty() {
        return Err(Error::Config("heterogeneity report needs at least one client".into()));
    }
    let prevalence: Vec<Vec<f64>> = clients
        .iter()
        .map(|c| {
            let n = c.len().max(1) as f64;
            c.labels.columns().into_iter().map(|col| col.sum() / n).collect()
        })
        .collect();
    let dists: Vec<Vec<f64>> = prevalence.iter().map(|p| normalize(p)).collect();
    let k = clients.len();
    let mut js = vec![vec![0.0; k]; k];
    let (mut sum, mut max, mut pairs) = (0.0, 0.0f64, 0usize);
    for i in 0..k {
        for j in i + 1..k {
            let d = js_divergence(&dists[i], &dists[j]);
            js[i][j] = d;
            js[j][i] = d;
            sum += d;
            max = max.max(d);
            pairs += 1;
        }
    }
    Ok(HeterogeneityReport {
        prevalence,
        js_divergence: js,
        client_sizes: clients.iter().map(ClientDataset::len).collect(),
        shift_magnitudes: clients.iter().map(|c| c.shift.magnitude()).collect(),
        mean_js: if pairs > 0 { sum / pairs as f64 } else { 0.0 },
        max_js: max,
    })
}

fn normalize(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / p.len() as f64; p.len()]
    }
}

/// Jensen-Shannon divergence of two discrete distributions (natural log).
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mid = |a: &[f64]| -> f64 {
        a.iter()
            .zip(p.iter().zip(q))
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, (&pp, &qq))| x * (x / (0.5 * (pp + qq))).ln())
            .sum()
    };
    (0.5 * kl_to_mid(p) + 0.5 * kl_to_mid(q)).clamp(0.0, std::f64::consts::LN_2)
}

impl HeterogeneityReport {
    /// Plain-text summary for terminals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mean pairwise JS divergence: {:.6}\n", self.mean_js));
        out.push_str(&format!("max pairwise JS divergence:  {:.6}\n", self.max_js));
        out.push_str("client  size  shift  prevalence\n");
        for (i, p) in self.prevalence.iter().enumerate() {
            let prev: Vec<String> = p.iter().map(|v| format!("{v:.2}")).collect();
            out.push_str(&format!(
                "{:>6}  {:>4}  {:.3}  [{}]\n",
                i,
                self.client_sizes[i],
                self.shift_magnitudes[i],
                prev.join(", ")
            ));
        }
        out
    }
}
