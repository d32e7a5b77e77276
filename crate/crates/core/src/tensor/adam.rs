use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias-corrected moment estimates.
///
/// Moment buffers are created lazily on the first step and must keep the
/// same shapes for the lifetime of the optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.numel() != g.len() || p.numel() != m.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_and_counts_step() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut opt = Adam::new(1e-3);
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g² on step one, so Δ = -lr·g/(|g|+ε)
        let mut p = Tensor::scalar(0.0);
        let mut opt = Adam::new(1e-3);
        opt.step(&mut [&mut p], &[&[2.0]]).unwrap();
        let expected = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-18);
        assert!((p.data()[0] + 1e-3).abs() < 1e-11);
    }

    #[test]
    fn equal_grads_equal_updates() {
        let mut a = Tensor::scalar(0.5);
        let mut b = Tensor::scalar(0.5);
        let mut opt = Adam::new(1e-2);
        for g in [0.3, -0.1, 0.7] {
            opt.step(&mut [&mut a, &mut b], &[&[g], &[g]]).unwrap();
        }
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut opt = Adam::new(1e-3);
        assert!(matches!(opt.step(&mut [&mut p], &[&[1.0]]), Err(Error::Shape { .. })));
    }
}
