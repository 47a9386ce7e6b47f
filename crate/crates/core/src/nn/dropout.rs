use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Real, Tensor4};

/// Survivor scale per element (`dropout`) or per (n, c) plane (`dropout2d`).
#[derive(Debug, Clone)]
pub struct DropoutMask<T> {
    scale: Vec<T>,
    per_plane: bool,
}

impl<T: Real> DropoutMask<T> {
    /// Fraction of mask entries that survived.
    pub fn survivor_fraction(&self) -> f64 {
        let kept = self.scale.iter().filter(|s| **s != T::zero()).count();
        kept as f64 / self.scale.len().max(1) as f64
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let mut y = x.clone();
        if self.per_plane {
            let plane = x.dims().plane();
            for (chunk, &s) in y.data_mut().chunks_mut(plane).zip(&self.scale) {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        } else {
            for (v, &s) in y.data_mut().iter_mut().zip(&self.scale) {
                *v *= s;
            }
        }
        y
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    Ok(())
}

fn draw_mask<T: Real>(count: usize, p: f64, per_plane: bool, rng: &mut impl Rng) -> DropoutMask<T> {
    let keep = T::of(1.0 / (1.0 - p));
    let scale = (0..count)
        .map(|_| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    DropoutMask { scale, per_plane }
}

/// Elementwise dropout. Returns `None` for the mask when the layer is an identity.
pub fn dropout<T: Real>(
    x: &Tensor4<T>,
    p: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor4<T>, Option<DropoutMask<T>>)> {
    check_p(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let mask = draw_mask(x.len(), p, false, rng);
    Ok((mask.apply(x), Some(mask)))
}

/// Channel dropout: zeroes whole (n, c) feature planes.
pub fn dropout2d<T: Real>(
    x: &Tensor4<T>,
    p: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<(Tensor4<T>, Option<DropoutMask<T>>)> {
    check_p(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let d = x.dims();
    let mask = draw_mask(d.n * d.c, p, true, rng);
    Ok((mask.apply(x), Some(mask)))
}

/// Backward of either dropout variant; the mask is reused unchanged.
pub fn dropout_backward<T: Real>(
    grad_out: &Tensor4<T>,
    mask: Option<&DropoutMask<T>>,
) -> Tensor4<T> {
    match mask {
        None => grad_out.clone(),
        Some(m) => m.apply(grad_out),
    }
}
