//! Rectified Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RAdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RAdam {
    pub config: RAdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(config: RAdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters whose gradient is `None` keep their value and
    /// moment estimates.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.m.len()],
                found: vec![params.len(), grads.len()],
            });
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let b2t = c.beta2.powi(t);
        let bias2 = 1.0 - b2t;
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let rho = rho_inf - 2.0 * self.step as f64 * b2t / bias2;
        // variance rectification once the second-moment estimate is tractable
        let rect = (rho > 5.0).then(|| {
            ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        });
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                *w -= match rect {
                    Some(r) => c.lr * r * m_hat / ((v[i] / bias2).sqrt() + c.eps),
                    None => c.lr * m_hat,
                };
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_steps_are_momentum_sgd() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = RAdam::new(RAdamConfig::default(), &p);
        let g = Tensor::scalar(2.0);
        opt.step(&mut p, &[Some(&g)]).unwrap();
        // m̂ = g on the first step
        assert!((p[0].item() - (1.0 - 1e-3 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rectified_phase_matches_hand_computation() {
        let cfg = RAdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = RAdam::new(cfg.clone(), &p);
        let g = Tensor::scalar(1.0);
        let mut w = 0.0;
        for t in 1..=10 {
            opt.step(&mut p, &[Some(&g)]).unwrap();
            let t = t as f64;
            let b2: f64 = cfg.beta2;
            // constant unit gradient: m̂ = v̂ = 1
            let (m_hat, v_hat) = (1.0, 1.0);
            let rho_inf = 2.0 / (1.0 - b2) - 1.0;
            let rho = rho_inf - 2.0 * t * b2.powf(t) / (1.0 - b2.powf(t));
            w -= if rho > 5.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                0.1 * r * m_hat / (f64::sqrt(v_hat) + 1e-8)
            } else {
                0.1 * m_hat
            };
            assert!((p[0].item() - w).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = RAdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut p = vec![Tensor::from_vec(vec![3.0, -2.0]).unwrap()];
        let mut opt = RAdam::new(cfg, &p);
        for _ in 0..2000 {
            let g = p[0].map(|x| 2.0 * (x - 1.0));
            opt.step(&mut p, &[Some(&g)]).unwrap();
        }
        for x in p[0].data() {
            assert!((x - 1.0).abs() < 1e-2, "{x}");
        }
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(5.0)];
        let mut opt = RAdam::new(RAdamConfig::default(), &p);
        let g = Tensor::scalar(1.0);
        opt.step(&mut p, &[Some(&g), None]).unwrap();
        assert_eq!(p[1].item(), 5.0);
        assert!(p[0].item() < 1.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(RAdamConfig {
            beta2: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
