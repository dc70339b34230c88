//! AdaBelief: adaptive step sizes from the belief in the gradient, i.e. the
//! variance of the gradient around its exponential moving average.
//!
//! Update per parameter:
//!   m <- b1*m + (1-b1)*g
//!   s <- b2*s + (1-b2)*(g - m)^2 + eps
//!   theta <- theta - lr * (m / (1-b1^t)) / (sqrt(s / (1-b2^t)) + eps)

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaBeliefConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        AdaBeliefConfig {
            learning_rate: 1e-3,
            beta1: 0.98,
            beta2: 0.98,
            epsilon: 1e-8,
        }
    }
}

impl AdaBeliefConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First/belief moments per parameter tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub belief: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        OptimizerState {
            first_moment: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            belief: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            step: 0,
        }
    }
}

pub struct AdaBelief {
    pub config: AdaBeliefConfig,
    pub state: OptimizerState,
}

impl AdaBelief {
    pub fn new(config: AdaBeliefConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        Ok(AdaBelief {
            config,
            state: OptimizerState::new(shapes),
        })
    }

    pub fn with_state(config: AdaBeliefConfig, state: OptimizerState) -> Result<Self> {
        config.validate()?;
        Ok(AdaBelief { config, state })
    }

    /// One update over all parameter tensors. Rejects non-finite gradients
    /// before any state is touched, so an aborted step leaves parameters and
    /// moments unchanged.
    pub fn step(&mut self, params: &mut [(&'static str, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.state.first_moment.len());
        for ((name, p), g) in params.iter().zip(grads) {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    tensor: (*name).to_string(),
                });
            }
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
        }

        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.config;
        let m_corr = 1.0 - c.beta1.powi(t);
        let s_corr = 1.0 - c.beta2.powi(t);

        for (idx, ((_, param), grad)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.state.first_moment[idx].data_mut();
            let s = self.state.belief[idx].data_mut();
            let p = param.data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                let diff = g - m[i];
                s[i] = c.beta2 * s[i] + (1.0 - c.beta2) * diff * diff + c.epsilon;
                let m_hat = m[i] / m_corr;
                let s_hat = s[i] / s_corr;
                p[i] -= c.learning_rate * m_hat / (s_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &[(1, 1)]).unwrap();
        let mut theta = single(1.25);
        opt.step(&mut [("theta", &mut theta)], &[single(0.0)]).unwrap();
        assert_eq!(theta.data()[0], 1.25);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // Scalar parameter, g = 1, t = 1, b1 = b2 = 0.98, lr = 1e-3,
        // eps = 1e-8. Hand evaluation of the update rule:
        //   m = 0.02, m_hat = 1
        //   s = 0.02 * 0.98^2 + eps, s_hat = 0.98^2 + eps/0.02
        //   step = lr / (sqrt(s_hat) + eps)
        let cfg = AdaBeliefConfig::default();
        let mut opt = AdaBelief::new(cfg, &[(1, 1)]).unwrap();
        let mut theta = single(0.0);
        opt.step(&mut [("theta", &mut theta)], &[single(1.0)]).unwrap();

        let s_hat: f64 = 0.98 * 0.98 + 1e-8 / 0.02;
        let expected = -1e-3 / (s_hat.sqrt() + 1e-8);
        assert!((theta.data()[0] - expected).abs() < 1e-15);
        assert!((theta.data()[0] + 1e-3 / 0.98).abs() < 1e-6);
    }

    #[test]
    fn trajectories_are_bit_identical() {
        let run = || {
            let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &[(2, 2)]).unwrap();
            let mut theta = Tensor::from_vec(2, 2, vec![0.1, -0.2, 0.3, -0.4]).unwrap();
            for step in 1..=50 {
                let grad = theta.map(|x| (x * step as f64).sin());
                opt.step(&mut [("theta", &mut theta)], &[grad]).unwrap();
            }
            theta
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts_without_touching_state() {
        let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &[(1, 1)]).unwrap();
        let mut theta = single(1.0);
        let err = opt
            .step(&mut [("theta", &mut theta)], &[single(f64::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(theta.data()[0], 1.0);
        assert_eq!(opt.state.step, 0);
    }

    #[test]
    fn config_validation() {
        let bad = AdaBeliefConfig {
            beta1: 1.0,
            ..AdaBeliefConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
