use crate::error::{Error, Result};
use crate::tensor::{Buffer, Dims, Module, Param, Real, Tensor4};

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved activations for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let dims = Dims::new(channels, 1, 1, 1);
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), Tensor4::full(dims, T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor4::zeros(dims)),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor4::zeros(dims),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor4::full(dims, T::one()),
            },
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.dims().n
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.dims().c != self.channels() {
            return Err(Error::Dimension(format!(
                "batch norm over {} channels got input {}",
                self.channels(),
                x.dims()
            )));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BnCache<T>)> {
        self.check(x)?;
        let d = x.dims();
        let m = d.n * d.plane();
        if m < 2 {
            return Err(Error::Numeric(format!(
                "batch norm in train mode needs at least 2 values per channel, input {d}"
            )));
        }
        let mut xhat = Tensor4::zeros(d);
        let mut y = Tensor4::zeros(d);
        let mut inv_std = Vec::with_capacity(d.c);
        for c in 0..d.c {
            let mut sum = 0.0;
            for n in 0..d.n {
                sum += x.plane(n, c).iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / m as f64;
            let mut ss = 0.0;
            for n in 0..d.n {
                ss += x
                    .plane(n, c)
                    .iter()
                    .map(|v| (v.f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = ss / m as f64;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std.push(istd);
            let (g, b) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
            let plane = d.plane();
            for n in 0..d.n {
                let off = (n * d.c + c) * plane;
                for i in off..off + plane {
                    let xh = T::of((x.data()[i].f64() - mean) * istd);
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + b;
                }
            }
            let mom = self.momentum;
            let rm = &mut self.running_mean.value.data_mut()[c];
            *rm = T::of((1.0 - mom) * rm.f64() + mom * mean);
            let unbiased = ss / (m - 1) as f64;
            let rv = &mut self.running_var.value.data_mut()[c];
            *rv = T::of((1.0 - mom) * rv.f64() + mom * unbiased);
        }
        Ok((y, BnCache { xhat, inv_std }))
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let d = x.dims();
        let mut y = x.clone();
        let plane = d.plane();
        for c in 0..d.c {
            let mean = self.running_mean.value.data()[c];
            let istd = T::of(1.0 / (self.running_var.value.data()[c].f64() + self.eps).sqrt());
            let scale = self.gamma.value.data()[c] * istd;
            let shift = self.beta.value.data()[c] - mean * scale;
            for n in 0..d.n {
                let off = (n * d.c + c) * plane;
                for v in &mut y.data_mut()[off..off + plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let d = grad_out.dims();
        if d != cache.xhat.dims() {
            return Err(Error::Dimension(format!(
                "batch norm backward: grad {d} vs cache {}",
                cache.xhat.dims()
            )));
        }
        let m = (d.n * d.plane()) as f64;
        let plane = d.plane();
        let mut gx = Tensor4::zeros(d);
        for c in 0..d.c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for n in 0..d.n {
                let off = (n * d.c + c) * plane;
                for i in off..off + plane {
                    let g = grad_out.data()[i].f64();
                    sum_g += g;
                    sum_gx += g * cache.xhat.data()[i].f64();
                }
            }
            self.gamma.grad.data_mut()[c] += T::of(sum_gx);
            self.beta.grad.data_mut()[c] += T::of(sum_g);
            let k = self.gamma.value.data()[c].f64() * cache.inv_std[c] / m;
            for n in 0..d.n {
                let off = (n * d.c + c) * plane;
                for i in off..off + plane {
                    let g = grad_out.data()[i].f64();
                    let xh = cache.xhat.data()[i].f64();
                    gx.data_mut()[i] = T::of(k * (m * g - sum_g - xh * sum_gx));
                }
            }
        }
        Ok(gx)
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}
