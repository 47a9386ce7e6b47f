use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::he_uniform;
use crate::tensor::{gemm, Dims, MatRef, Module, Param, Real, Tensor4};

/// Dense layer over `(n, in, 1, 1)` vector batches; weight is `(out, in, 1, 1)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                he_uniform(Dims::new(outputs, inputs, 1, 1), inputs, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor4::zeros(Dims::new(outputs, 1, 1, 1)),
            ),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dims().c
    }

    pub fn outputs(&self) -> usize {
        self.weight.dims().n
    }

    fn check(&self, x: &Tensor4<T>) -> Result<usize> {
        let d = x.dims();
        if d.sample() != self.inputs() {
            return Err(Error::Dimension(format!(
                "linear layer {} expects {} inputs, got {d}",
                self.weight.name,
                self.inputs()
            )));
        }
        Ok(d.n)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let n = self.check(x)?;
        let (i, o) = (self.inputs(), self.outputs());
        let mut y = Tensor4::zeros(Dims::new(n, o, 1, 1));
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), n, i),
            MatRef::transposed(self.weight.value.data(), o, i),
            T::one(),
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let n = self.check(x)?;
        let (i, o) = (self.inputs(), self.outputs());
        if grad_out.dims() != Dims::new(n, o, 1, 1) {
            return Err(Error::Dimension(format!(
                "linear backward: grad {} for {n} samples of {o} outputs",
                grad_out.dims()
            )));
        }
        gemm(
            T::one(),
            MatRef::transposed(grad_out.data(), n, o),
            MatRef::new(x.data(), n, i),
            T::one(),
            self.weight.grad.data_mut(),
        );
        for row in grad_out.data().chunks(o) {
            for (b, &g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut gx = Tensor4::zeros(x.dims());
        gemm(
            T::one(),
            MatRef::new(grad_out.data(), n, o),
            MatRef::new(self.weight.value.data(), o, i),
            T::zero(),
            gx.data_mut(),
        );
        Ok(gx)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
