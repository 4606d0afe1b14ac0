use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm bound on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adaptive moment estimation over an ordered list of parameters.
///
/// Moment buffers are bound to parameter position, so the same module must be
/// passed on every step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// in place; callers zero them.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer bound to {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = params
                    .iter()
                    .filter_map(|p| p.grad())
                    .flat_map(|g| g.iter())
                    .map(|&x| x.to_f64_lossy().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    T::lit(max / norm)
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(t));
        let bias2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            let Some(grad) = p.grad().map(<[T]>::to_vec) else {
                continue;
            };
            if grad.len() != m.len() {
                return Err(Error::dim("adam", &[m.len()], &[grad.len()]));
            }
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * clip;
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut w = Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap().into_param();
        w.accumulate_grad(&[0.5, -2.0]).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        opt.step(vec![&mut w]).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut w = Tensor::<f64>::new(&[1], vec![3.0]).unwrap().into_param();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let x = w.data()[0];
            w.zero_grad();
            w.accumulate_grad(&[2.0 * (x - 1.0)]).unwrap();
            opt.step(vec![&mut w]).unwrap();
        }
        assert!((w.data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_changed_parameter_list() {
        let mut a = Tensor::<f32>::zeros(&[1]).into_param();
        let mut b = Tensor::<f32>::zeros(&[1]).into_param();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut a]).unwrap();
        assert!(opt.step(vec![&mut a, &mut b]).is_err());
    }
}
