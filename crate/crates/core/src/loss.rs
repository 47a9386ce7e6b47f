//! Segmentation losses: class-weighted BCE on logits, soft Dice, and their
//! weighted sum. Values are accumulated in f64 regardless of `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Default Dice smoothing term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha_bce: f64,
    pub alpha_dice: f64,
    /// Foreground class weight. `None` means estimate it from the training masks.
    pub w_c: Option<f64>,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_bce: 0.25,
            alpha_dice: 1.0,
            w_c: None,
            dice_smooth: DICE_SMOOTH,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_bce", self.alpha_bce),
            ("alpha_dice", self.alpha_dice),
            ("dice_smooth", self.dice_smooth),
            ("w_c", self.w_c.unwrap_or(1.0)),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Background-to-foreground pixel ratio, clamped to [1, 100]. Returns 1 when
/// there is no foreground at all.
pub fn class_weight(foreground: f64, background: f64) -> f64 {
    if foreground <= 0.0 {
        return 1.0;
    }
    (background / foreground).clamp(1.0, 100.0)
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_pair<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, what: &str) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::Dimension(format!(
            "{what}: logits {} vs targets {}",
            x.dims(),
            y.dims()
        )));
    }
    if x.is_empty() {
        return Err(Error::Dimension(format!("{what}: empty input")));
    }
    Ok(())
}

/// Weighted binary cross-entropy on logits, averaged over every element.
pub fn bce_loss<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, w_c: f64) -> Result<f64> {
    check_pair(x, y, "bce")?;
    let mut sum = 0.0;
    for (&xi, &yi) in x.data().iter().zip(y.data()) {
        let (xi, yi) = (xi.f64(), yi.f64());
        // log sigma(x) = -softplus(-x), log(1 - sigma(x)) = -softplus(x)
        sum += w_c * yi * softplus(-xi) + (1.0 - yi) * softplus(xi);
    }
    Ok(sum / x.len() as f64)
}

pub fn bce_grad<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, w_c: f64) -> Result<Tensor4<T>> {
    check_pair(x, y, "bce")?;
    let scale = 1.0 / x.len() as f64;
    let mut g = Tensor4::zeros(x.dims());
    for ((gi, &xi), &yi) in g.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
        let (s, yi) = (sigmoid(xi.f64()), yi.f64());
        *gi = T::of(scale * (s * (w_c * yi + 1.0 - yi) - w_c * yi));
    }
    Ok(g)
}

/// Per-sample sums `(sum p*y, sum p + sum y)` with `p = sigmoid(x)`.
fn dice_terms<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>) -> Vec<(f64, f64)> {
    (0..x.dims().n)
        .map(|n| {
            let (mut inter, mut total) = (0.0, 0.0);
            for (&xi, &yi) in x.sample(n).iter().zip(y.sample(n)) {
                let p = sigmoid(xi.f64());
                inter += p * yi.f64();
                total += p + yi.f64();
            }
            (inter, total)
        })
        .collect()
}

/// Soft Dice coefficient of already-activated probabilities, per sample then
/// averaged over the batch.
pub fn dice_coefficient<T: Real>(probs: &Tensor4<T>, y: &Tensor4<T>, smooth: f64) -> Result<f64> {
    check_pair(probs, y, "dice")?;
    let n = probs.dims().n;
    let mut acc = 0.0;
    for s in 0..n {
        let (mut inter, mut total) = (0.0, 0.0);
        for (&p, &t) in probs.sample(s).iter().zip(y.sample(s)) {
            inter += p.f64() * t.f64();
            total += p.f64() + t.f64();
        }
        if total + smooth == 0.0 {
            return Err(Error::Numeric(
                "dice of two empty masks with zero smoothing".into(),
            ));
        }
        acc += (2.0 * inter + smooth) / (total + smooth);
    }
    Ok(acc / n as f64)
}

/// `1 - dice(sigmoid(x), y)`.
pub fn dice_loss<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, smooth: f64) -> Result<f64> {
    check_pair(x, y, "dice")?;
    let terms = dice_terms(x, y);
    let mut acc = 0.0;
    for &(inter, total) in &terms {
        if total + smooth == 0.0 {
            return Err(Error::Numeric(
                "dice of two empty masks with zero smoothing".into(),
            ));
        }
        acc += (2.0 * inter + smooth) / (total + smooth);
    }
    Ok(1.0 - acc / terms.len() as f64)
}

pub fn dice_grad<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>, smooth: f64) -> Result<Tensor4<T>> {
    check_pair(x, y, "dice")?;
    let terms = dice_terms(x, y);
    let n = terms.len() as f64;
    let mut g = Tensor4::zeros(x.dims());
    for (s, &(inter, total)) in terms.iter().enumerate() {
        let den = total + smooth;
        if den == 0.0 {
            return Err(Error::Numeric(
                "dice of two empty masks with zero smoothing".into(),
            ));
        }
        let num = 2.0 * inter + smooth;
        let gs = &mut g.sample_mut(s)[..];
        for ((gi, &xi), &yi) in gs.iter_mut().zip(x.sample(s)).zip(y.sample(s)) {
            let p = sigmoid(xi.f64());
            let d_dp = (2.0 * yi.f64() * den - num) / (den * den);
            *gi = T::of(-d_dp * p * (1.0 - p) / n);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

/// `alpha_bce * bce + alpha_dice * dice_loss` and its gradient w.r.t. the logits.
pub fn detection_loss<T: Real>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    weights: &LossWeights,
) -> Result<(LossParts, Tensor4<T>)> {
    let w_c = weights.w_c.unwrap_or(1.0);
    let bce = bce_loss(x, y, w_c)?;
    let dice = dice_loss(x, y, weights.dice_smooth)?;
    let total = weights.alpha_bce * bce + weights.alpha_dice * dice;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("detection loss is {total}")));
    }
    let mut grad = bce_grad(x, y, w_c)?;
    let gd = dice_grad(x, y, weights.dice_smooth)?;
    let (ab, ad) = (T::of(weights.alpha_bce), T::of(weights.alpha_dice));
    for (g, &d) in grad.data_mut().iter_mut().zip(gd.data()) {
        *g = ab * *g + ad * d;
    }
    Ok((LossParts { bce, dice, total }, grad))
}
