//! SGD with momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Param, Real, Tensor4};

/// Optimizer state: hyperparameters plus one velocity tensor per parameter.
#[derive(Debug, Clone)]
pub struct SgdState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor4<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor4<T>] {
        &self.velocity
    }

    /// One update over `params` (same order on every call):
    /// `v = momentum * v + (g + wd * theta)`, `theta -= lr * v`.
    ///
    /// All gradients are checked before anything is modified.
    pub fn step(&mut self, mut params: Vec<&mut Param<T>>) -> Result<()> {
        for p in &params {
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {} at index {i}",
                    p.name
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor4::zeros(p.dims())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} parameters, step got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let (lr, mom, wd) = (
            T::of(self.learning_rate),
            T::of(self.momentum),
            T::of(self.weight_decay),
        );
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if v.dims() != p.dims() {
                return Err(Error::Dimension(format!(
                    "velocity {} does not match parameter {} {}",
                    v.dims(),
                    p.name,
                    p.dims()
                )));
            }
            let Param { value, grad, .. } = &mut **p;
            for ((theta, &g), vel) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(v.data_mut())
            {
                *vel = mom * *vel + (g + wd * *theta);
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }
}
