use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Adam with bias correction over a fixed, ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape(format!(
                "Adam state tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(i));
            }
            if p.numel() != self.first[i].len() {
                return Err(Error::shape(format!(
                    "parameter {i} changed size from {} to {}",
                    self.first[i].len(),
                    p.numel()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::new(&[1], vec![v]).unwrap().with_grad();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = param(0.7, 0.0);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g| + eps).
        let mut p = param(1.0, 1.0);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut [&mut p]).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(p.grad(), Some(&[1.0][..]));
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut adam = AdamState::new(0.1);
        assert!(matches!(adam.step(&mut [&mut p]), Err(Error::MissingGrad(0))));
    }

    #[test]
    fn quadratic_descends() {
        let mut w = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut adam = AdamState::new(0.05);
        let mut trace = vec![1.0f64];
        for _ in 0..100 {
            w.zero_grad();
            let g = 2.0 * w.data()[0];
            w.accumulate_grad(&[g]).unwrap();
            adam.step(&mut [&mut w]).unwrap();
            trace.push(w.data()[0].abs());
        }
        // Adam approaches the minimum at roughly lr per step, so |w| shrinks
        // monotonically until it first gets within a step of zero.
        let warm = trace.iter().position(|&v| v < 0.05).unwrap();
        assert!(trace[..warm].windows(2).all(|p| p[1] < p[0]));
        assert!(trace.last().unwrap() < &0.1);
    }
}
