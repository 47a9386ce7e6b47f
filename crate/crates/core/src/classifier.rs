//! Presence classifier on the U-Net bridge features: GAP, a hidden dense
//! layer with ReLU and dropout, and a two-way softmax (index 1 = present).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    dropout, dropout_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    softmax, DropoutMask, Linear, Mode,
};
use crate::tensor::{Dims, Module, Param, Real, Tensor4};

pub const HIDDEN: usize = 256;
pub const DROPOUT_P: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ClassifierHead<T> {
    pub fc_hidden: Linear<T>,
    pub fc_out: Linear<T>,
    pub dropout_p: f64,
}

pub struct ClassifierCache<T> {
    bridge_dims: Dims,
    pooled: Tensor4<T>,
    hidden: Tensor4<T>,
    mask: Option<DropoutMask<T>>,
    dropped: Tensor4<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        ClassifierHead {
            fc_hidden: Linear::new("cls.hidden", channels, HIDDEN, rng),
            fc_out: Linear::new("cls.out", HIDDEN, 2, rng),
            dropout_p: DROPOUT_P,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc_hidden.inputs()
    }

    fn check(&self, bridge: &Tensor4<T>) -> Result<()> {
        if bridge.dims().c != self.channels() {
            return Err(Error::Dimension(format!(
                "classifier expects {} bridge channels, got {}",
                self.channels(),
                bridge.dims()
            )));
        }
        Ok(())
    }

    /// Training-mode forward. Returns the logits `(n, 2, 1, 1)`.
    pub fn forward_train(
        &self,
        bridge: &Tensor4<T>,
        rng: &mut impl Rng,
    ) -> Result<(Tensor4<T>, ClassifierCache<T>)> {
        self.check(bridge)?;
        let pooled = global_avg_pool(bridge);
        let hidden = relu(&self.fc_hidden.forward(&pooled)?);
        let (dropped, mask) = dropout(&hidden, self.dropout_p, Mode::Train, rng)?;
        let logits = self.fc_out.forward(&dropped)?;
        let cache = ClassifierCache {
            bridge_dims: bridge.dims(),
            pooled,
            hidden,
            mask,
            dropped,
        };
        Ok((logits, cache))
    }

    /// Eval-mode class probabilities `(n, 2, 1, 1)`.
    pub fn forward(&self, bridge: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(bridge)?;
        let pooled = global_avg_pool(bridge);
        let hidden = relu(&self.fc_hidden.forward(&pooled)?);
        Ok(softmax(&self.fc_out.forward(&hidden)?))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the bridge.
    pub fn backward(
        &mut self,
        cache: &ClassifierCache<T>,
        grad_logits: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let g = self.fc_out.backward(&cache.dropped, grad_logits)?;
        let g = dropout_backward(&g, cache.mask.as_ref());
        let g = relu_backward(&cache.hidden, &g)?;
        let g = self.fc_hidden.backward(&cache.pooled, &g)?;
        global_avg_pool_backward(&g, cache.bridge_dims)
    }
}

impl<T: Real> Module<T> for ClassifierHead<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.fc_hidden.params();
        p.extend(self.fc_out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.fc_hidden.params_mut();
        p.extend(self.fc_out.params_mut());
        p
    }
}

/// Per-class coefficients of `log p_absent` and `log p_present`. The BCE over
/// the two outputs uses `log(1 - p_c) = log p_other`.
fn class_coefficients(label: f64, w_c: f64) -> [f64; 2] {
    let t = [1.0 - label, label];
    [w_c * t[0] + (1.0 - t[1]), w_c * t[1] + (1.0 - t[0])]
}

fn check_labels<T: Real>(n: usize, labels: &[T]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if labels.iter().any(|l| !(0.0..=1.0).contains(&l.f64())) {
        return Err(Error::Numeric(
            "classifier labels must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// BCE averaged over both class outputs and the batch, from probabilities.
pub fn classifier_loss<T: Real>(probs: &Tensor4<T>, labels: &[T], w_c: f64) -> Result<f64> {
    let d = probs.dims();
    if d.sample() != 2 {
        return Err(Error::Dimension(format!(
            "classifier probabilities must be (n, 2, 1, 1), got {d}"
        )));
    }
    check_labels(d.n, labels)?;
    let mut sum = 0.0;
    for (p, &l) in probs.data().chunks(2).zip(labels) {
        let a = class_coefficients(l.f64(), w_c);
        for c in 0..2 {
            if a[c] != 0.0 {
                sum -= a[c] * p[c].f64().max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    Ok(sum / (2 * d.n) as f64)
}

/// Loss and gradient w.r.t. the logits, computed with a log-sum-exp softmax.
pub fn classifier_loss_from_logits<T: Real>(
    logits: &Tensor4<T>,
    labels: &[T],
    w_c: f64,
) -> Result<(f64, Tensor4<T>)> {
    let d = logits.dims();
    if d.sample() != 2 {
        return Err(Error::Dimension(format!(
            "classifier logits must be (n, 2, 1, 1), got {d}"
        )));
    }
    check_labels(d.n, labels)?;
    let scale = 1.0 / (2 * d.n) as f64;
    let mut grad = Tensor4::zeros(d);
    let mut sum = 0.0;
    for ((z, g), &l) in logits
        .data()
        .chunks(2)
        .zip(grad.data_mut().chunks_mut(2))
        .zip(labels)
    {
        let (z0, z1) = (z[0].f64(), z[1].f64());
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        let logp = [z0 - lse, z1 - lse];
        let a = class_coefficients(l.f64(), w_c);
        for c in 0..2 {
            sum -= a[c] * logp[c];
            g[c] = T::of(-scale * (a[c] - (a[0] + a[1]) * logp[c].exp()));
        }
    }
    Ok((sum * scale, grad))
}
