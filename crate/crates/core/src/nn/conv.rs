//! Same-padded convolution and 2x2 stride-2 transposed convolution.
//!
//! Both lower to GEMM per sample: convolution through an im2col buffer,
//! the transposed convolution through a single `(c_out*4) x c_in` product
//! followed by a scatter into non-overlapping 2x2 output tiles. Per-sample
//! weight gradients are reduced in sample order so results do not depend on
//! the number of worker threads.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::he_uniform;
use crate::nn::kernels::{conv3x3_forward, conv3x3_weight_grad, pack_weights, Padded};
use crate::tensor::{gemm, Dims, MatRef, Module, Param, Real, Tensor4};

/// Gradients produced by a convolution backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

fn check_kernel<T: Real>(input: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<usize> {
    let (d, wd) = (input.dims(), weight.dims());
    if wd.h != wd.w || wd.h % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv kernel must be square with odd size, got {wd}"
        )));
    }
    if wd.c != d.c {
        return Err(Error::Dimension(format!(
            "conv expects {} input channels, input is {d}",
            wd.c
        )));
    }
    if bias.len() != wd.n {
        return Err(Error::Dimension(format!(
            "conv bias has {} entries for {} output channels",
            bias.len(),
            wd.n
        )));
    }
    if d.h == 0 || d.w == 0 {
        return Err(Error::Dimension(format!(
            "input {d} is empty for a {}x{} kernel",
            wd.h, wd.w
        )));
    }
    Ok(wd.h)
}

/// Unfold one sample `(c, h, w)` into a `(c*k*k, h*w)` column matrix with zero padding.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - p as isize;
                let dx = kx as isize - p as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    if dx >= 0 {
                        let s = dx as usize;
                        drow[..w - s].copy_from_slice(&src[s..]);
                        drow[w - s..].fill(T::zero());
                    } else {
                        let s = (-dx) as usize;
                        drow[..s].fill(T::zero());
                        drow[s..].copy_from_slice(&src[..w - s]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a column matrix back onto a sample.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - p as isize;
                let dx = kx as isize - p as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w..(y + 1) * w];
                    let drow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    if dx >= 0 {
                        let s = dx as usize;
                        for (d, &v) in drow[s..].iter_mut().zip(&srow[..w - s]) {
                            *d += v;
                        }
                    } else {
                        let s = (-dx) as usize;
                        for (d, &v) in drow[..w - s].iter_mut().zip(&srow[s..]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Planes at least this wide use the direct 3x3 kernels instead of im2col + GEMM.
const DIRECT_MIN_WIDTH: usize = 24;

fn use_direct(k: usize, w: usize) -> bool {
    k == 3 && w >= DIRECT_MIN_WIDTH
}

/// Stride-1 "same" convolution; `weight` is `(c_out, c_in, k, k)` with odd `k`.
pub fn conv2d<T: Real>(input: &Tensor4<T>, weight: &Tensor4<T>, bias: &[T]) -> Result<Tensor4<T>> {
    let k = check_kernel(input, weight, bias)?;
    input.ensure_finite("conv2d input")?;
    let d = input.dims();
    let c_out = weight.dims().n;
    let kdim = d.c * k * k;
    let hw = d.plane();
    let mut out = Tensor4::zeros(Dims::new(d.n, c_out, d.h, d.w));
    if use_direct(k, d.w) {
        let packed = pack_weights(weight.data(), c_out, d.c, false);
        out.data_mut()
            .par_chunks_mut(c_out * hw)
            .enumerate()
            .for_each(|(n, y)| {
                let xp = Padded::new(input.sample(n), d.c, d.h, d.w);
                conv3x3_forward(&xp, d.c, &packed, bias, c_out, y);
            });
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(c_out * hw)
        .enumerate()
        .for_each(|(n, y)| {
            for (co, row) in y.chunks_mut(hw).enumerate() {
                row.fill(bias[co]);
            }
            let x = input.sample(n);
            let w = MatRef::new(weight.data(), c_out, kdim);
            if k == 1 {
                gemm(T::one(), w, MatRef::new(x, kdim, hw), T::one(), y);
            } else {
                let mut cols = vec![T::zero(); kdim * hw];
                im2col(x, d.c, d.h, d.w, k, &mut cols);
                gemm(T::one(), w, MatRef::new(&cols, kdim, hw), T::one(), y);
            }
        });
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let d = input.dims();
    let wd = weight.dims();
    let k = wd.h;
    let c_out = wd.n;
    if grad_out.dims() != Dims::new(d.n, c_out, d.h, d.w) {
        return Err(Error::Dimension(format!(
            "conv grad {} does not match output of {d} with {c_out} channels",
            grad_out.dims()
        )));
    }
    let kdim = d.c * k * k;
    let hw = d.plane();
    if use_direct(k, d.w) {
        let flipped = pack_weights(weight.data(), d.c, c_out, true);
        let zero_bias = vec![T::zero(); d.c];
        let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..d.n)
            .into_par_iter()
            .map(|n| {
                let gy = grad_out.sample(n);
                let xp = Padded::new(input.sample(n), d.c, d.h, d.w);
                let gp = Padded::new(gy, c_out, d.h, d.w);
                let mut gw = vec![T::zero(); wd.len()];
                conv3x3_weight_grad(&xp, d.c, &gp, c_out, &mut gw);
                let mut gx = vec![T::zero(); d.sample()];
                conv3x3_forward(&gp, c_out, &flipped, &zero_bias, d.c, &mut gx);
                let gb = gy.chunks(hw).map(|row| row.iter().copied().sum()).collect();
                (gx, gw, gb)
            })
            .collect();
        return reduce_grads(d, wd, c_out, per_sample);
    }
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..d.n)
        .into_par_iter()
        .map(|n| {
            let x = input.sample(n);
            let gy = grad_out.sample(n);
            let cols_owned;
            let cols: &[T] = if k == 1 {
                x
            } else {
                let mut c = vec![T::zero(); kdim * hw];
                im2col(x, d.c, d.h, d.w, k, &mut c);
                cols_owned = c;
                &cols_owned
            };
            // dW = dY * cols^T
            let mut gw = vec![T::zero(); c_out * kdim];
            gemm(
                T::one(),
                MatRef::new(gy, c_out, hw),
                MatRef::transposed(cols, kdim, hw),
                T::zero(),
                &mut gw,
            );
            // dcols = W^T * dY
            let mut gcols = vec![T::zero(); kdim * hw];
            gemm(
                T::one(),
                MatRef::transposed(weight.data(), c_out, kdim),
                MatRef::new(gy, c_out, hw),
                T::zero(),
                &mut gcols,
            );
            let gx = if k == 1 {
                gcols
            } else {
                let mut gx = vec![T::zero(); d.sample()];
                col2im(&gcols, d.c, d.h, d.w, k, &mut gx);
                gx
            };
            let gb = gy.chunks(hw).map(|row| row.iter().copied().sum()).collect();
            (gx, gw, gb)
        })
        .collect();
    reduce_grads(d, wd, c_out, per_sample)
}

fn reduce_grads<T: Real>(
    input_dims: Dims,
    weight_dims: Dims,
    c_out: usize,
    per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)>,
) -> Result<ConvGrads<T>> {
    let mut gx = Vec::with_capacity(input_dims.len());
    let mut gw = vec![T::zero(); weight_dims.len()];
    let mut gb = vec![T::zero(); c_out];
    for (x, w, b) in per_sample {
        gx.extend_from_slice(&x);
        for (a, v) in gw.iter_mut().zip(w) {
            *a += v;
        }
        for (a, v) in gb.iter_mut().zip(b) {
            *a += v;
        }
    }
    Ok(ConvGrads {
        input: Tensor4::from_vec(input_dims, gx)?,
        weight: Tensor4::from_vec(weight_dims, gw)?,
        bias: gb,
    })
}

/// 2x2 stride-2 transposed convolution; `weight` is `(c_in, c_out, 2, 2)`.
pub fn conv_transpose2x2<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
) -> Result<Tensor4<T>> {
    let d = input.dims();
    let wd = weight.dims();
    if wd.n != d.c || wd.h != 2 || wd.w != 2 {
        return Err(Error::Dimension(format!(
            "transposed conv weight {wd} does not fit input {d}"
        )));
    }
    if bias.len() != wd.c {
        return Err(Error::Dimension(format!(
            "transposed conv bias has {} entries for {} channels",
            bias.len(),
            wd.c
        )));
    }
    input.ensure_finite("conv_transpose2x2 input")?;
    let c_out = wd.c;
    let hw = d.plane();
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut out = Tensor4::zeros(Dims::new(d.n, c_out, oh, ow));
    out.data_mut()
        .par_chunks_mut(c_out * oh * ow)
        .enumerate()
        .for_each(|(n, y)| {
            let mut z = vec![T::zero(); c_out * 4 * hw];
            gemm(
                T::one(),
                MatRef::transposed(weight.data(), d.c, c_out * 4),
                MatRef::new(input.sample(n), d.c, hw),
                T::zero(),
                &mut z,
            );
            for co in 0..c_out {
                let plane = &mut y[co * oh * ow..(co + 1) * oh * ow];
                for tap in 0..4 {
                    let (a, b) = (tap / 2, tap % 2);
                    let zrow = &z[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for iy in 0..d.h {
                        let orow = &mut plane[(2 * iy + a) * ow..(2 * iy + a + 1) * ow];
                        for ix in 0..d.w {
                            orow[2 * ix + b] = zrow[iy * d.w + ix] + bias[co];
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn conv_transpose2x2_backward<T: Real>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let d = input.dims();
    let wd = weight.dims();
    let c_out = wd.c;
    let (oh, ow) = (2 * d.h, 2 * d.w);
    if grad_out.dims() != Dims::new(d.n, c_out, oh, ow) {
        return Err(Error::Dimension(format!(
            "transposed conv grad {} does not match output of {d}",
            grad_out.dims()
        )));
    }
    let hw = d.plane();
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..d.n)
        .into_par_iter()
        .map(|n| {
            let gy = grad_out.sample(n);
            let mut gz = vec![T::zero(); c_out * 4 * hw];
            let mut gb = vec![T::zero(); c_out];
            for co in 0..c_out {
                let plane = &gy[co * oh * ow..(co + 1) * oh * ow];
                gb[co] = plane.iter().copied().sum();
                for tap in 0..4 {
                    let (a, b) = (tap / 2, tap % 2);
                    let zrow = &mut gz[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for iy in 0..d.h {
                        let grow = &plane[(2 * iy + a) * ow..(2 * iy + a + 1) * ow];
                        for ix in 0..d.w {
                            zrow[iy * d.w + ix] = grow[2 * ix + b];
                        }
                    }
                }
            }
            let x = input.sample(n);
            // dW (c_in x c_out*4) = X * dZ^T
            let mut gw = vec![T::zero(); wd.len()];
            gemm(
                T::one(),
                MatRef::new(x, d.c, hw),
                MatRef::transposed(&gz, c_out * 4, hw),
                T::zero(),
                &mut gw,
            );
            // dX (c_in x hw) = W * dZ
            let mut gx = vec![T::zero(); d.sample()];
            gemm(
                T::one(),
                MatRef::new(weight.data(), d.c, c_out * 4),
                MatRef::new(&gz, c_out * 4, hw),
                T::zero(),
                &mut gx,
            );
            (gx, gw, gb)
        })
        .collect();
    reduce_grads(d, wd, c_out, per_sample)
}

/// Convolution layer holding its weight and bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        let dims = Dims::new(c_out, c_in, k, k);
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                he_uniform(dims, c_in * k * k, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor4::zeros(Dims::new(c_out, 1, 1, 1)),
            ),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims().n
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d(x, &self.weight.value, self.bias.value.data())
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = conv2d_backward(x, &self.weight.value, grad_out)?;
        accumulate(&mut self.weight, &mut self.bias, &g)?;
        Ok(g.input)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Learnable 2x upsampler.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> ConvTranspose2x2<T> {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let dims = Dims::new(c_in, c_out, 2, 2);
        ConvTranspose2x2 {
            weight: Param::new(format!("{name}.weight"), he_uniform(dims, c_in, rng)),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor4::zeros(Dims::new(c_out, 1, 1, 1)),
            ),
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv_transpose2x2(x, &self.weight.value, self.bias.value.data())
    }

    pub fn backward(&mut self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = conv_transpose2x2_backward(x, &self.weight.value, grad_out)?;
        accumulate(&mut self.weight, &mut self.bias, &g)?;
        Ok(g.input)
    }
}

impl<T: Real> Module<T> for ConvTranspose2x2<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

fn accumulate<T: Real>(weight: &mut Param<T>, bias: &mut Param<T>, g: &ConvGrads<T>) -> Result<()> {
    weight.grad.add_assign(&g.weight)?;
    for (a, &b) in bias.grad.data_mut().iter_mut().zip(&g.bias) {
        *a += b;
    }
    Ok(())
}
