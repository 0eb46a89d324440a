use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient. Zero by default.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, ..OptimizerConfig::default() }
    }
}

/// Per-client optimizer state. Only trainable segments are ever touched.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first_moment: Option<ParamVector>,
    second_moment: Option<ParamVector>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState { config, step: 0, first_moment: None, second_moment: None }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.first_moment = None;
        self.second_moment = None;
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, eta: f64) -> Result<()> {
        if !(eta > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {eta}")));
        }
        params.check_layout(grad)?;
        if !grad.is_finite() {
            let bad = grad.values().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {bad} on optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let layout = params.layout().clone();
        let wd = self.config.weight_decay;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for seg in layout.trainable() {
                    let g = grad.slice(seg);
                    for (p, &g) in params.slice_mut(seg).iter_mut().zip(g) {
                        let g = if wd != 0.0 { g + wd * *p } else { g };
                        *p -= eta * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig { beta1, beta2, eps, .. } = self.config;
                let m = self.first_moment.get_or_insert_with(|| grad.zeros_like());
                let v = self.second_moment.get_or_insert_with(|| grad.zeros_like());
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for seg in layout.trainable() {
                    let r = seg.range();
                    let g = &grad.values()[r.clone()];
                    let m = &mut m.values_mut()[r.clone()];
                    let v = &mut v.values_mut()[r.clone()];
                    let p = &mut params.values_mut()[r];
                    for k in 0..g.len() {
                        let gk = if wd != 0.0 { g[k] + wd * p[k] } else { g[k] };
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        p[k] -= eta * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite on optimizer step {}", self.step)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::{Layout, Segment, SegmentKind};

    fn layout(n: usize) -> Arc<Layout> {
        Arc::new(Layout::new(vec![Segment { name: "w".into(), offset: 0, len: n, kind: SegmentKind::Weight }]).unwrap())
    }

    #[test]
    fn sgd_exact() {
        let l = layout(1);
        let mut p = ParamVector::from_values(l.clone(), vec![1.0]).unwrap();
        let g = ParamVector::from_values(l.clone(), vec![2.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::sgd());
        opt.step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.values(), &[0.0]);

        let mut p = ParamVector::from_values(l.clone(), vec![1.25]).unwrap();
        opt.step(&mut p, &ParamVector::zeros(l), 0.5).unwrap();
        assert_eq!(p.values(), &[1.25]);
    }

    #[test]
    fn adam_first_step_moves_by_eta() {
        let l = layout(3);
        let mut p = ParamVector::from_values(l.clone(), vec![0.0, 0.0, 0.0]).unwrap();
        let g = ParamVector::from_values(l, vec![3.0, -0.01, 1e-3]).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::default());
        opt.step(&mut p, &g, 1e-3).unwrap();
        // first step: m_hat = g, v_hat = g^2, update = eta * g / (|g| + eps)
        for (&pk, &gk) in p.values().iter().zip(g.values()) {
            let expected = -1e-3 * gk / (gk.abs() + 1e-8);
            assert!((pk - expected).abs() < 1e-15, "{pk} vs {expected}");
            assert!((pk.abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_eta() {
        let l = layout(2);
        let mut p = ParamVector::zeros(l.clone());
        let g = ParamVector::from_values(l.clone(), vec![f64::NAN, 0.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::sgd());
        assert!(matches!(opt.step(&mut p, &g, 0.1), Err(Error::Numeric(_))));
        assert!(matches!(opt.step(&mut p, &ParamVector::zeros(l), 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn running_stats_untouched() {
        let l = Arc::new(
            Layout::new(vec![
                Segment { name: "g".into(), offset: 0, len: 1, kind: SegmentKind::BnGamma },
                Segment { name: "rv".into(), offset: 1, len: 1, kind: SegmentKind::BnRunningVar },
            ])
            .unwrap(),
        );
        let mut p = ParamVector::from_values(l.clone(), vec![1.0, 1.0]).unwrap();
        let g = ParamVector::from_values(l, vec![1.0, 1.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::default());
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.values()[1], 1.0);
        assert!(p.values()[0] < 1.0);
    }
}
