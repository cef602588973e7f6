//! SGD and Adam over flat (parameter, gradient) slice pairs. The optimizer
//! keeps one moment buffer laid out in walk order, so the caller must yield
//! parameters in a fixed order across steps.

use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(NnError::Invalid(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self, NnError> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// One optimization step over all parameters. `pairs` must yield every
    /// (param, grad) slice pair in the same order on every call.
    pub fn step<'a>(
        &mut self,
        pairs: impl Iterator<Item = (&'a mut [f64], &'a [f64])>,
    ) -> Result<(), NnError> {
        self.step_count += 1;
        let mut offset = 0usize;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (params, grads) in pairs {
                    if params.len() != grads.len() {
                        return Err(NnError::Shape(format!(
                            "optimizer: {} params vs {} grads",
                            params.len(),
                            grads.len()
                        )));
                    }
                    for (p, &g) in params.iter_mut().zip(grads) {
                        *p -= self.cfg.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - self.cfg.beta1.powi(t);
                let bc2 = 1.0 - self.cfg.beta2.powi(t);
                for (params, grads) in pairs {
                    if params.len() != grads.len() {
                        return Err(NnError::Shape(format!(
                            "optimizer: {} params vs {} grads",
                            params.len(),
                            grads.len()
                        )));
                    }
                    let end = offset + params.len();
                    if self.m.len() < end {
                        self.m.resize(end, 0.0);
                        self.v.resize(end, 0.0);
                    }
                    for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                        let j = offset + i;
                        self.m[j] = self.cfg.beta1 * self.m[j] + (1.0 - self.cfg.beta1) * g;
                        self.v[j] = self.cfg.beta2 * self.v[j] + (1.0 - self.cfg.beta2) * g * g;
                        let m_hat = self.m[j] / bc1;
                        let v_hat = self.v[j] / bc2;
                        *p -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                    }
                    offset = end;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_hand_value() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        let mut p = [1.0f64];
        let g = [0.5f64];
        opt.step([(&mut p[..], &g[..])].into_iter()).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        for cfg in [OptimizerConfig::sgd(0.0), OptimizerConfig::adam(0.0)] {
            let mut opt = Optimizer::new(cfg).unwrap();
            let mut p = [1.25f64, -3.5];
            let g = [0.7f64, 0.1];
            for _ in 0..3 {
                opt.step([(&mut p[..], &g[..])].into_iter()).unwrap();
            }
            assert_eq!(p, [1.25, -3.5]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let lr = 0.01;
        let mut opt = Optimizer::new(OptimizerConfig::adam(lr)).unwrap();
        let mut p = [0.0f64];
        let g = [1.0f64];
        opt.step([(&mut p[..], &g[..])].into_iter()).unwrap();
        assert!(
            (p[0] + lr).abs() < 1e-6,
            "first adam step should be -lr, got {}",
            p[0]
        );
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        let mut p = [0.0f64; 2];
        let g = [1.0f64];
        assert!(opt.step([(&mut p[..], &g[..])].into_iter()).is_err());
    }
}
