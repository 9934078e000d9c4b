//! SGD with momentum and L2 weight decay.
//!
//! The weight-decay term stands in for the `(1-p)/(2N)·‖ϑ‖²` regularizer of
//! the dropout variational objective; `N` is run-dependent, so the
//! coefficient is exposed directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", format!("must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", format!("must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`, then zeroes the gradients.
    ///
    /// Velocity buffers are created on the first call and are matched to
    /// parameters by position afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} velocity buffers for {} parameters", self.velocity.len(), params.len()),
            ));
        }
        for (i, (param, vel)) in params.iter().zip(&self.velocity).enumerate() {
            if param.grad().is_none() {
                return Err(Error::MissingGrad(i));
            }
            if param.len() != vel.len() {
                return Err(Error::shape("sgd_step", format!("velocity {i} has the wrong length")));
            }
        }
        for (param, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let (values, grad) = param.split_mut();
            let grad = grad.expect("checked above");
            for ((theta, g), v) in values.iter_mut().zip(grad.iter_mut()).zip(vel.iter_mut()) {
                *v = self.momentum * *v + *g + self.weight_decay * *theta;
                *theta -= self.learning_rate * *v;
                *g = 0.0;
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sgd_step"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap().with_grad()
    }

    fn set_grad(t: &mut Tensor, g: f64) {
        t.grad_mut().unwrap()[0] = g;
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0);
        set_grad(&mut p, 1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = param(0.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        for _ in 0..2 {
            set_grad(&mut p, 1.0);
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.item() + 0.29).abs() < 1e-12, "{}", p.item());
    }

    #[test]
    fn decay_only_step() {
        let mut p = param(2.0);
        let mut opt = Sgd::new(1.0, 0.0, 0.01).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.item() - 1.98).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::MissingGrad(0))));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.9, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 0.5, -1.0).is_err());
    }
}
