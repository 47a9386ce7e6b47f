//! Reduced-width U-Net backbone.
//!
//! Four encoder levels and a bridge, each two `conv3x3 -> batch norm -> ReLU`
//! blocks followed by channel dropout; four decoder levels that upsample with
//! a 2x2 transposed convolution, concatenate the matching encoder features and
//! apply two more conv blocks; a 1x1 convolution produces one logit per pixel.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::dropout::dropout_backward;
use crate::nn::{
    dropout2d, maxpool2, maxpool2_backward, BatchNorm2d, BnCache, Conv2d, ConvTranspose2x2,
    DropoutMask, Mode,
};
use crate::tensor::{Buffer, Dims, Module, Param, Real, Tensor4};

/// Base channel widths of levels 1-4 and the bridge at scale 1.
pub const BASE_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];

/// Spatial dims must be divisible by this (four 2x poolings).
pub const SPATIAL_MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    pub channel_scale: f64,
    pub in_channels: usize,
    pub dropout2d_p: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            channel_scale: 1.0,
            in_channels: 3,
            dropout2d_p: 0.15,
        }
    }
}

impl UNetConfig {
    pub fn with_scale(channel_scale: f64) -> Self {
        UNetConfig {
            channel_scale,
            ..Default::default()
        }
    }

    /// Feature widths `round(s * {32, 64, 128, 256, 512})`, at least 1.
    pub fn widths(&self) -> [usize; 5] {
        BASE_WIDTHS.map(|b| ((b as f64 * self.channel_scale).round() as usize).max(1))
    }

    pub fn bridge_channels(&self) -> usize {
        self.widths()[4]
    }

    /// Multiply-accumulate count of one forward pass on an `h x w` input.
    pub fn forward_macs(&self, h: usize, w: usize) -> u64 {
        let wd = self.widths();
        let mut macs = 0u64;
        let mut c_in = self.in_channels as u64;
        let mut px = (h * w) as u64;
        for &c in &wd[..4] {
            let c = c as u64;
            macs += px * 9 * (c_in * c + c * c);
            c_in = c;
            px /= 4;
        }
        let cb = wd[4] as u64;
        macs += px * 9 * (c_in * cb + cb * cb);
        let mut deeper = cb;
        for l in (0..4).rev() {
            let c = wd[l] as u64;
            // transposed conv: every input pixel feeds a 2x2 tile
            macs += px * deeper * c * 4;
            px *= 4;
            macs += px * 9 * (2 * c * c + c * c);
            deeper = c;
        }
        macs + px * deeper
    }
}

#[derive(Debug, Clone)]
struct ConvBnRelu<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

#[derive(Debug)]
struct CbrCache<T> {
    input: Tensor4<T>,
    bn: BnCache<T>,
    pre_relu: Tensor4<T>,
}

impl<T: Real> ConvBnRelu<T> {
    fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(&format!("{name}.conv"), c_in, c_out, 3, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out),
        }
    }

    fn forward_train(&mut self, x: Tensor4<T>) -> Result<(Tensor4<T>, CbrCache<T>)> {
        let z = self.conv.forward(&x)?;
        let (pre_relu, bn) = self.bn.forward_train(&z)?;
        let y = crate::nn::relu(&pre_relu);
        Ok((
            y,
            CbrCache {
                input: x,
                bn,
                pre_relu,
            },
        ))
    }

    fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let z = self.conv.forward(x)?;
        Ok(crate::nn::relu(&self.bn.forward_eval(&z)?))
    }

    fn backward(&mut self, cache: CbrCache<T>, grad_out: Tensor4<T>) -> Result<Tensor4<T>> {
        let g = crate::nn::relu_backward(&cache.pre_relu, &grad_out)?;
        let g = self.bn.backward(&cache.bn, &g)?;
        self.conv.backward(&cache.input, &g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
struct DoubleConv<T> {
    first: ConvBnRelu<T>,
    second: ConvBnRelu<T>,
}

type DoubleCache<T> = (CbrCache<T>, CbrCache<T>);

impl<T: Real> DoubleConv<T> {
    fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        DoubleConv {
            first: ConvBnRelu::new(&format!("{name}.0"), c_in, c_out, rng),
            second: ConvBnRelu::new(&format!("{name}.1"), c_out, c_out, rng),
        }
    }

    fn forward_train(&mut self, x: Tensor4<T>) -> Result<(Tensor4<T>, DoubleCache<T>)> {
        let (h, c1) = self.first.forward_train(x)?;
        let (y, c2) = self.second.forward_train(h)?;
        Ok((y, (c1, c2)))
    }

    fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.second.forward_eval(&self.first.forward_eval(x)?)
    }

    fn backward(&mut self, cache: DoubleCache<T>, grad_out: Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.second.backward(cache.1, grad_out)?;
        self.first.backward(cache.0, g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = self.first.bn.buffers();
        v.extend(self.second.bn.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = self.first.bn.buffers_mut();
        v.extend(self.second.bn.buffers_mut());
        v
    }
}

/// Backbone outputs: per-pixel logits and the bridge activation.
#[derive(Debug, Clone)]
pub struct UNetOutput<T> {
    pub logits: Tensor4<T>,
    pub bridge: Tensor4<T>,
}

/// Activations retained by a training-mode forward pass.
#[derive(Debug)]
pub struct UNetCache<T> {
    enc: Vec<EncoderCache<T>>,
    bridge: DoubleCache<T>,
    bridge_drop: Option<DropoutMask<T>>,
    up_inputs: Vec<Tensor4<T>>,
    up_channels: Vec<usize>,
    dec: Vec<Option<DoubleCache<T>>>,
    head_input: Tensor4<T>,
}

#[derive(Debug)]
struct EncoderCache<T> {
    block: DoubleCache<T>,
    drop: Option<DropoutMask<T>>,
    argmax: Vec<u32>,
    skip_dims: Dims,
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: UNetConfig,
    enc: Vec<DoubleConv<T>>,
    bridge: DoubleConv<T>,
    up: Vec<ConvTranspose2x2<T>>,
    dec: Vec<DoubleConv<T>>,
    head: Conv2d<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(config: UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        if !(config.channel_scale > 0.0 && config.channel_scale.is_finite()) {
            return Err(Error::Config(format!(
                "channel_scale must be positive, got {}",
                config.channel_scale
            )));
        }
        if !(0.0..1.0).contains(&config.dropout2d_p) {
            return Err(Error::Config(format!(
                "dropout2d_p must be in [0, 1), got {}",
                config.dropout2d_p
            )));
        }
        let w = config.widths();
        let mut c_in = config.in_channels;
        let mut enc = Vec::with_capacity(4);
        for (l, &c) in w[..4].iter().enumerate() {
            enc.push(DoubleConv::new(&format!("enc{}", l + 1), c_in, c, rng));
            c_in = c;
        }
        let bridge = DoubleConv::new("bridge", c_in, w[4], rng);
        let mut up = Vec::with_capacity(4);
        let mut dec = Vec::with_capacity(4);
        for l in 0..4 {
            up.push(ConvTranspose2x2::new(
                &format!("up{}", l + 1),
                w[l + 1],
                w[l],
                rng,
            ));
            dec.push(DoubleConv::new(
                &format!("dec{}", l + 1),
                2 * w[l],
                w[l],
                rng,
            ));
        }
        let head = Conv2d::new("head", w[0], 1, 1, rng);
        Ok(UNet {
            config,
            enc,
            bridge,
            up,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let d = x.dims();
        if d.c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "backbone expects {} input channels, got {d}",
                self.config.in_channels
            )));
        }
        if d.h == 0 || d.w == 0 || d.h % SPATIAL_MULTIPLE != 0 || d.w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Dimension(format!(
                "backbone input height and width must be positive multiples of {SPATIAL_MULTIPLE}, got {d}"
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass: batch statistics, channel dropout, caches.
    pub fn forward_train(
        &mut self,
        x: &Tensor4<T>,
        rng: &mut impl Rng,
    ) -> Result<(UNetOutput<T>, UNetCache<T>)> {
        self.check_input(x)?;
        let p = self.config.dropout2d_p;
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(4);
        let mut enc_caches = Vec::with_capacity(4);
        for block in &mut self.enc {
            let (h, bc) = block.forward_train(cur)?;
            let (h, drop) = dropout2d(&h, p, Mode::Train, rng)?;
            let (pooled, argmax) = maxpool2(&h)?;
            enc_caches.push(EncoderCache {
                block: bc,
                drop,
                argmax,
                skip_dims: h.dims(),
            });
            skips.push(h);
            cur = pooled;
        }
        let (b, bridge_cache) = self.bridge.forward_train(cur)?;
        let (bridge, bridge_drop) = dropout2d(&b, p, Mode::Train, rng)?;

        let mut cur = bridge.clone();
        let mut up_inputs = vec![Tensor4::zeros(Dims::new(0, 0, 0, 0)); 4];
        let mut up_channels = vec![0; 4];
        let mut dec_caches: Vec<Option<DoubleCache<T>>> = (0..4).map(|_| None).collect();
        for l in (0..4).rev() {
            let u = self.up[l].forward(&cur)?;
            up_channels[l] = u.dims().c;
            up_inputs[l] = cur;
            let cat = Tensor4::concat_channels(&u, &skips[l])?;
            let (h, dc) = self.dec[l].forward_train(cat)?;
            dec_caches[l] = Some(dc);
            cur = h;
        }
        let logits = self.head.forward(&cur)?;
        logits.ensure_finite("backbone logits")?;
        Ok((
            UNetOutput { logits, bridge },
            UNetCache {
                enc: enc_caches,
                bridge: bridge_cache,
                bridge_drop,
                up_inputs,
                up_channels,
                dec: dec_caches,
                head_input: cur,
            },
        ))
    }

    /// Backpropagates logit (and optionally bridge) gradients into the
    /// parameter gradient accumulators. Returns the input gradient.
    pub fn backward(
        &mut self,
        cache: UNetCache<T>,
        grad_logits: &Tensor4<T>,
        grad_bridge: Option<&Tensor4<T>>,
    ) -> Result<Tensor4<T>> {
        let UNetCache {
            enc,
            bridge,
            bridge_drop,
            up_inputs,
            up_channels,
            mut dec,
            head_input,
        } = cache;
        let mut g = self.head.backward(&head_input, grad_logits)?;
        let mut skip_grads: Vec<Option<Tensor4<T>>> = (0..4).map(|_| None).collect();
        for l in 0..4 {
            let dc = dec[l]
                .take()
                .ok_or_else(|| Error::Dimension("decoder cache missing".into()))?;
            let gcat = self.dec[l].backward(dc, g)?;
            let (gu, gs) = gcat.split_channels(up_channels[l])?;
            skip_grads[l] = Some(gs);
            g = self.up[l].backward(&up_inputs[l], &gu)?;
        }
        if let Some(gb) = grad_bridge {
            g.add_assign(gb)?;
        }
        let g = dropout_backward(&g, bridge_drop.as_ref());
        let mut g = self.bridge.backward(bridge, g)?;
        for (l, ec) in enc.into_iter().enumerate().rev() {
            let mut gh = maxpool2_backward(&g, &ec.argmax, ec.skip_dims)?;
            if let Some(gs) = skip_grads[l].take() {
                gh.add_assign(&gs)?;
            }
            let gh = dropout_backward(&gh, ec.drop.as_ref());
            g = self.enc[l].backward(ec.block, gh)?;
        }
        Ok(g)
    }

    /// Eval-mode forward pass; takes `&self`, so a frozen model can be
    /// shared across threads.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<UNetOutput<T>> {
        let (bridge, skips) = self.encode_with_skips(x)?;
        let mut cur = bridge.clone();
        for l in (0..4).rev() {
            let u = self.up[l].forward(&cur)?;
            let cat = Tensor4::concat_channels(&u, &skips[l])?;
            cur = self.dec[l].forward_eval(&cat)?;
        }
        let logits = self.head.forward(&cur)?;
        logits.ensure_finite("backbone logits")?;
        Ok(UNetOutput { logits, bridge })
    }

    /// Eval-mode encoder and bridge only.
    pub fn encode(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.encode_with_skips(x)?.0)
    }

    fn encode_with_skips(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<Tensor4<T>>)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(4);
        for block in &self.enc {
            let h = block.forward_eval(&cur)?;
            cur = maxpool2(&h)?.0;
            skips.push(h);
        }
        Ok((self.bridge.forward_eval(&cur)?, skips))
    }
}

impl<T: Real> Module<T> for UNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for b in &self.enc {
            v.extend(b.params());
        }
        v.extend(self.bridge.params());
        for (u, d) in self.up.iter().zip(&self.dec) {
            v.extend(u.params());
            v.extend(d.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for b in &mut self.enc {
            v.extend(b.params_mut());
        }
        v.extend(self.bridge.params_mut());
        for (u, d) in self.up.iter_mut().zip(&mut self.dec) {
            v.extend(u.params_mut());
            v.extend(d.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = Vec::new();
        for b in &self.enc {
            v.extend(b.buffers());
        }
        v.extend(self.bridge.buffers());
        for d in &self.dec {
            v.extend(d.buffers());
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = Vec::new();
        for b in &mut self.enc {
            v.extend(b.buffers_mut());
        }
        v.extend(self.bridge.buffers_mut());
        for d in &mut self.dec {
            v.extend(d.buffers_mut());
        }
        v
    }
}
