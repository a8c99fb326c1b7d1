use crate::error::{check_dim, Error, Result};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning rate ramps linearly from `lr / warmup` to `lr` over this many steps.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 3000,
        }
    }
}

/// AdamW with decoupled weight decay and linear warm-up.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        let ok = config.lr >= 0.0
            && (0.0..1.0).contains(&config.beta1)
            && (0.0..1.0).contains(&config.beta2)
            && config.eps > 0.0
            && config.weight_decay >= 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("bad optimizer settings {config:?}")));
        }
        Ok(OptimizerState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate applied at optimizer step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.config.warmup_steps;
        if warm == 0 || step >= warm {
            self.config.lr
        } else {
            self.config.lr * step as f64 / warm as f64
        }
    }

    /// Learning rate used by the most recent step.
    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step.max(1))
    }

    /// Applies one update. Non-finite gradients abort without touching the
    /// parameters or the moment buffers.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamSet + ?Sized,
        G: ParamSet + ?Sized,
    {
        let grad_slices = grads.param_slices();
        let mut param_slices = params.param_slices_mut();
        check_dim("optimizer blocks", param_slices.len(), grad_slices.len())?;
        for (p, g) in param_slices.iter().zip(&grad_slices) {
            check_dim("optimizer block", p.len(), g.len())?;
        }
        if grad_slices.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "gradient at optimizer step {} (training diverged)",
                self.step + 1
            )));
        }
        if self.first.is_empty() {
            self.first = grad_slices.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        } else {
            check_dim("optimizer state blocks", self.first.len(), grad_slices.len())?;
            for (m, g) in self.first.iter().zip(&grad_slices) {
                check_dim("optimizer state block", m.len(), g.len())?;
            }
        }

        self.step += 1;
        let c = self.config;
        let lr = self.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let decay = 1.0 - lr * c.weight_decay;

        for (block, p) in param_slices.iter_mut().enumerate() {
            let g = grad_slices[block];
            let m = &mut self.first[block];
            let v = &mut self.second[block];
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    struct Scalar(Vec<f64>);

    impl ParamSet for Scalar {
        fn param_slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = OptimizerState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        })
        .unwrap();
        let mut p = Scalar(vec![1.0, -2.0, 3.5]);
        for _ in 0..5 {
            opt.step(&mut p, &Scalar(vec![0.0; 3])).unwrap();
        }
        assert_eq!(p.0, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn warmup_first_step_uses_fraction_of_base_rate() {
        let opt = OptimizerState::new(AdamWConfig::default()).unwrap();
        assert_abs_diff_eq!(opt.lr_at(1), 1e-4 / 3000.0, epsilon = 1e-20);
        assert_abs_diff_eq!(opt.lr_at(1500), 0.5e-4, epsilon = 1e-18);
        assert_eq!(opt.lr_at(3000), 1e-4);
        assert_eq!(opt.lr_at(10_000), 1e-4);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
            warmup_steps: 0,
        };
        let mut opt = OptimizerState::new(cfg).unwrap();
        let mut p = Scalar(vec![2.0]);
        opt.step(&mut p, &Scalar(vec![0.4])).unwrap();
        // m = 0.04, v = 0.00016; bias-corrected m_hat = 0.4, v_hat = 0.16.
        // p = 2 (1 - 0.1 * 0.5) - 0.1 * 0.4 / (0.4 + 1e-8)
        let expected = 2.0 * 0.95 - 0.1 * 0.4 / (0.4 + 1e-8);
        assert_abs_diff_eq!(p.0[0], expected, epsilon = 1e-14);

        // Second step with a different gradient, still by hand.
        opt.step(&mut p, &Scalar(vec![-0.2])).unwrap();
        let m: f64 = 0.9 * 0.04 + 0.1 * -0.2;
        let v: f64 = 0.999 * 0.00016 + 0.001 * 0.04;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected2 = expected * 0.95 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert_abs_diff_eq!(p.0[0], expected2, epsilon = 1e-14);
    }

    #[test]
    fn non_finite_gradient_aborts_cleanly() {
        let mut opt = OptimizerState::new(AdamWConfig::default()).unwrap();
        let mut p = Scalar(vec![1.0]);
        let err = opt.step(&mut p, &Scalar(vec![f64::NAN])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p.0, vec![1.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = OptimizerState::new(AdamWConfig::default()).unwrap();
        let mut p = Scalar(vec![1.0, 2.0]);
        assert!(opt.step(&mut p, &Scalar(vec![1.0])).is_err());
    }
}
