//! Frame stacking, normalization, mask rasterization and augmentation.
//!
//! A training [`Sample`] holds the three stacked frame planes, the box mask
//! and the presence label. Spatial transforms move all four planes with the
//! same coordinate map; intensity transforms touch the image only.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::BoundingBox;
use crate::tensor::{Dims, Tensor4};

/// Largest normalized intensity, `255 / 256`.
pub const MAX_INTENSITY: f32 = 255.0 / 256.0;

/// One 8-bit grayscale frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Data(format!(
                "frame of {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    Single,
    #[default]
    Three,
}

impl std::str::FromStr for FrameMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "1" => Ok(FrameMode::Single),
            "three" | "3" => Ok(FrameMode::Three),
            _ => Err(Error::Config(format!(
                "frame mode must be `single` or `three`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for FrameMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrameMode::Single => "single",
            FrameMode::Three => "three",
        })
    }
}

/// `v / 256`, so 255 maps strictly below 1.
pub fn normalize(frame: &Frame) -> Vec<f32> {
    frame.pixels.iter().map(|&v| v as f32 / 256.0).collect()
}

/// Indices of the frames feeding channels 0..3 (oldest first). Missing
/// predecessors at the start of a sequence repeat frame `t`.
pub fn stack_indices(t: usize, mode: FrameMode) -> [usize; 3] {
    match mode {
        FrameMode::Single => [t; 3],
        FrameMode::Three => [
            if t >= 2 { t - 2 } else { t },
            if t >= 1 { t - 1 } else { t },
            t,
        ],
    }
}

/// Normalized `(3, h, w)` planes for frame `t`, flattened.
pub fn stack_frames(sequence: &[Frame], t: usize, mode: FrameMode) -> Result<Vec<f32>> {
    if sequence.is_empty() {
        return Err(Error::Data(
            "cannot stack frames of an empty sequence".into(),
        ));
    }
    if t >= sequence.len() {
        return Err(Error::Data(format!(
            "frame index {t} out of range for a sequence of {}",
            sequence.len()
        )));
    }
    let (w, h) = (sequence[t].width, sequence[t].height);
    let mut out = Vec::with_capacity(3 * w * h);
    for i in stack_indices(t, mode) {
        let f = &sequence[i];
        if (f.width, f.height) != (w, h) {
            return Err(Error::Data(format!(
                "frame {i} is {}x{}, frame {t} is {w}x{h}",
                f.width, f.height
            )));
        }
        out.extend(normalize(f));
    }
    Ok(out)
}

/// Binary mask of pixels whose centre lies inside `bbox`.
pub fn rasterize_mask(bbox: &BoundingBox, w: usize, h: usize) -> Result<Vec<f32>> {
    let clipped = bbox.clip(w, h).ok_or_else(|| {
        Error::Annotation(format!("box {bbox:?} does not intersect the {w}x{h} image"))
    })?;
    let cols = pixel_span(clipped.x_min, clipped.x_max);
    let rows = pixel_span(clipped.y_min, clipped.y_max);
    if cols.is_empty() || rows.is_empty() {
        return Err(Error::Annotation(format!(
            "box {bbox:?} covers no pixel centre"
        )));
    }
    let mut mask = vec![0.0; w * h];
    for y in rows {
        mask[y * w + cols.start..y * w + cols.end].fill(1.0);
    }
    Ok(mask)
}

/// Pixel indices `i` with `lo <= i + 0.5 < hi`.
fn pixel_span(lo: f64, hi: f64) -> std::ops::Range<usize> {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = (hi - 0.5).ceil().max(0.0) as usize;
    a..b.max(a)
}

/// Bilinear resize of one plane; pixel centres are aligned, borders replicate.
pub fn resize_plane(src: &[f32], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f32> {
    if (w, h) == (nw, nh) {
        return src.to_vec();
    }
    let (sx, sy) = (w as f64 / nw as f64, h as f64 / nh as f64);
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for x in 0..nw {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let fy = (y as f64 + 0.5) * sy - 0.5;
            out.push(bilinear(src, w, h, fx, fy));
        }
    }
    out
}

/// Bilinear lookup with border replication.
fn bilinear(src: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Stacked image planes, mask and presence label of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub width: usize,
    pub height: usize,
    /// `3 * height * width` values in `[0, 1)`.
    pub image: Vec<f32>,
    /// `height * width` values in `[0, 1]`.
    pub mask: Vec<f32>,
    pub label: f32,
}

impl Sample {
    pub fn new(
        width: usize,
        height: usize,
        image: Vec<f32>,
        mask: Vec<f32>,
        label: f32,
    ) -> Result<Self> {
        let hw = width * height;
        if hw == 0 || image.len() != 3 * hw || mask.len() != hw {
            return Err(Error::Dimension(format!(
                "sample {width}x{height} with {} image and {} mask values",
                image.len(),
                mask.len()
            )));
        }
        Ok(Sample {
            width,
            height,
            image,
            mask,
            label,
        })
    }

    fn plane_len(&self) -> usize {
        self.width * self.height
    }

    /// Resamples all four planes through `map`, which takes an output pixel
    /// and returns the source coordinates to read.
    fn warp(&mut self, map: impl Fn(usize, usize) -> (f64, f64)) {
        let (w, h) = (self.width, self.height);
        let coords: Vec<(f64, f64)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| map(x, y))
            .collect();
        let hw = self.plane_len();
        for c in 0..3 {
            let src = self.image[c * hw..(c + 1) * hw].to_vec();
            for (dst, &(sx, sy)) in self.image[c * hw..(c + 1) * hw].iter_mut().zip(&coords) {
                *dst = bilinear(&src, w, h, sx, sy);
            }
        }
        let src = std::mem::take(&mut self.mask);
        self.mask = coords
            .iter()
            .map(|&(sx, sy)| bilinear(&src, w, h, sx, sy))
            .collect();
    }

    fn binarize_mask(&mut self) {
        for m in &mut self.mask {
            *m = if *m >= 0.5 { 1.0 } else { 0.0 };
        }
    }

    /// Stacks samples into `(n, 3, h, w)` inputs, `(n, 1, h, w)` masks and labels.
    pub fn batch(samples: &[Sample]) -> Result<(Tensor4<f32>, Tensor4<f32>, Vec<f32>)> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (w, h) = (first.width, first.height);
        let mut x = Vec::with_capacity(samples.len() * 3 * w * h);
        let mut y = Vec::with_capacity(samples.len() * w * h);
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            if (s.width, s.height) != (w, h) {
                return Err(Error::Dimension(format!(
                    "batch mixes {w}x{h} and {}x{} samples",
                    s.width, s.height
                )));
            }
            x.extend_from_slice(&s.image);
            y.extend_from_slice(&s.mask);
            labels.push(s.label);
        }
        let n = samples.len();
        Ok((
            Tensor4::from_vec(Dims::new(n, 3, h, w), x)?,
            Tensor4::from_vec(Dims::new(n, 1, h, w), y)?,
            labels,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    pub flip_prob: f64,
    pub rotate: bool,
    pub rotation_range_deg: f64,
    pub scale: bool,
    pub scale_range: (f64, f64),
    pub translate: bool,
    pub translate_frac: f64,
    pub intensity: bool,
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub elastic: bool,
    /// Chance of applying the elastic warp to a given sample.
    pub elastic_prob: f64,
    pub elastic_sigma_range_px: (f64, f64),
    pub elastic_alpha_range_px: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip: true,
            flip_prob: 0.5,
            rotate: true,
            rotation_range_deg: 10.0,
            scale: true,
            scale_range: (0.9, 1.1),
            translate: true,
            translate_frac: 0.1,
            intensity: true,
            brightness_delta: 0.2,
            contrast_range: (0.7, 1.3),
            elastic: true,
            elastic_prob: 0.5,
            elastic_sigma_range_px: (8.0, 16.0),
            elastic_alpha_range_px: (0.0, 20.0),
        }
    }
}

impl AugmentConfig {
    /// Everything switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("augment.{field} {why}")));
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("elastic_prob", self.elastic_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(name, format!("must be in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("rotation_range_deg", self.rotation_range_deg),
            ("translate_frac", self.translate_frac),
            ("brightness_delta", self.brightness_delta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        if self.translate_frac >= 1.0 {
            return bad(
                "translate_frac",
                format!("must be < 1, got {}", self.translate_frac),
            );
        }
        for (name, (lo, hi), min) in [
            ("scale_range", self.scale_range, f64::MIN_POSITIVE),
            ("contrast_range", self.contrast_range, 0.0),
            (
                "elastic_sigma_range_px",
                self.elastic_sigma_range_px,
                f64::MIN_POSITIVE,
            ),
            ("elastic_alpha_range_px", self.elastic_alpha_range_px, 0.0),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo >= min && lo <= hi) {
                return bad(
                    name,
                    format!("must be a finite range [lo, hi] with lo >= {min}, got [{lo}, {hi}]"),
                );
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Affine parameters drawn by [`geometric_augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub flip: bool,
    pub angle_rad: f64,
    pub scale: f64,
    pub shift: (f64, f64),
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        flip: false,
        angle_rad: 0.0,
        scale: 1.0,
        shift: (0.0, 0.0),
    };

    pub fn sample(config: &AugmentConfig, w: usize, h: usize, rng: &mut impl Rng) -> Affine {
        let mut a = Affine::IDENTITY;
        if config.flip {
            a.flip = rng.gen::<f64>() < config.flip_prob;
        }
        if config.rotate {
            let r = config.rotation_range_deg;
            a.angle_rad = uniform(rng, (-r, r)).to_radians();
        }
        if config.scale {
            a.scale = uniform(rng, config.scale_range);
        }
        if config.translate {
            let f = config.translate_frac;
            a.shift = (
                uniform(rng, (-f, f)) * w as f64,
                uniform(rng, (-f, f)) * h as f64,
            );
        }
        a
    }

    /// Applies flip, then rotation and scale about the image centre, then the
    /// shift.
    pub fn apply(&self, sample: &mut Sample) {
        if *self == Affine::IDENTITY {
            return;
        }
        let cx = (sample.width as f64 - 1.0) / 2.0;
        let cy = (sample.height as f64 - 1.0) / 2.0;
        let (sin, cos) = (-self.angle_rad).sin_cos();
        let inv_s = 1.0 / self.scale;
        let (flip, shift) = (self.flip, self.shift);
        sample.warp(|x, y| {
            let qx = x as f64 - cx - shift.0;
            let qy = y as f64 - cy - shift.1;
            let rx = (cos * qx - sin * qy) * inv_s;
            let ry = (sin * qx + cos * qy) * inv_s;
            (cx + if flip { -rx } else { rx }, cy + ry)
        });
    }
}

/// Brightness and pivot-0.5 contrast: `clamp(g * (v - 0.5) + 0.5 + b)`.
pub fn adjust_intensity(image: &mut [f32], gain: f64, brightness: f64) {
    for v in image {
        let out = gain * (*v as f64 - 0.5) + 0.5 + brightness;
        *v = (out as f32).clamp(0.0, MAX_INTENSITY);
    }
}

/// Flip/rotate/scale/translate on image and mask.
pub fn geometric_augment(sample: &mut Sample, config: &AugmentConfig, rng: &mut impl Rng) {
    let a = Affine::sample(config, sample.width, sample.height, rng);
    a.apply(sample);
    sample.binarize_mask();
}

/// Random brightness/contrast on the image only.
pub fn intensity_augment(sample: &mut Sample, config: &AugmentConfig, rng: &mut impl Rng) {
    if !config.intensity {
        return;
    }
    let gain = uniform(rng, config.contrast_range);
    let d = config.brightness_delta;
    let brightness = uniform(rng, (-d, d));
    adjust_intensity(&mut sample.image, gain, brightness);
}

/// Geometric transforms followed by the intensity change.
pub fn geometric_intensity_augment(
    sample: &mut Sample,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) {
    if !config.enabled {
        return;
    }
    geometric_augment(sample, config, rng);
    intensity_augment(sample, config, rng);
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * src[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Smooth random displacement field `(dx, dy)` with peak magnitude `alpha_px`.
pub fn displacement_field(
    w: usize,
    h: usize,
    sigma_px: f64,
    alpha_px: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma_px > 0.0 && sigma_px.is_finite()) {
        return Err(Error::Config(format!(
            "elastic sigma must be > 0, got {sigma_px}"
        )));
    }
    if !(alpha_px >= 0.0 && alpha_px.is_finite()) {
        return Err(Error::Config(format!(
            "elastic alpha must be >= 0, got {alpha_px}"
        )));
    }
    let mut axis = || {
        let noise: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut d = gaussian_blur(&noise, w, h, sigma_px);
        let peak = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let k = if peak > 0.0 { alpha_px / peak } else { 0.0 };
        d.iter_mut().for_each(|v| *v *= k);
        d
    };
    let dx = axis();
    let dy = axis();
    Ok((dx, dy))
}

/// Warps image and mask through one displacement field; the mask is
/// re-binarized at 0.5 unless `binarize` is false.
pub fn elastic_deform_with(sample: &mut Sample, dx: &[f64], dy: &[f64], binarize: bool) {
    let w = sample.width;
    if dx.iter().chain(dy).any(|&d| d != 0.0) {
        sample.warp(|x, y| (x as f64 + dx[y * w + x], y as f64 + dy[y * w + x]));
    }
    if binarize {
        sample.binarize_mask();
    }
}

pub fn elastic_deform(
    sample: &mut Sample,
    sigma_px: f64,
    alpha_px: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let (dx, dy) = displacement_field(sample.width, sample.height, sigma_px, alpha_px, rng)?;
    elastic_deform_with(sample, &dx, &dy, true);
    Ok(())
}

/// Full per-sample pipeline: geometric, elastic, intensity.
pub fn augment(sample: &mut Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<()> {
    if !config.enabled {
        return Ok(());
    }
    geometric_augment(sample, config, rng);
    if config.elastic && rng.gen::<f64>() < config.elastic_prob {
        let sigma = uniform(rng, config.elastic_sigma_range_px);
        let alpha = uniform(rng, config.elastic_alpha_range_px);
        elastic_deform(sample, sigma, alpha, rng)?;
    }
    intensity_augment(sample, config, rng);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupPolicy {
    pub enabled: bool,
    pub alpha: f64,
}

impl Default for MixupPolicy {
    fn default() -> Self {
        MixupPolicy {
            enabled: true,
            alpha: 0.1,
        }
    }
}

impl MixupPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup.alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Draws `lambda ~ Beta(alpha, alpha)`.
    pub fn sample_lambda(&self, rng: &mut impl Rng) -> Result<f64> {
        let beta = Beta::new(self.alpha, self.alpha)
            .map_err(|e| Error::Config(format!("mixup.alpha {}: {e}", self.alpha)))?;
        Ok(beta.sample(rng))
    }
}

/// `lambda * a + (1 - lambda) * b` on image, mask and label.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Dimension(format!(
            "mixup of {}x{} and {}x{} samples",
            a.width, a.height, b.width, b.height
        )));
    }
    let l = lambda as f32;
    let mix = |x: f32, y: f32| (l * x + (1.0 - l) * y).clamp(x.min(y), x.max(y));
    Ok(Sample {
        width: a.width,
        height: a.height,
        image: a
            .image
            .iter()
            .zip(&b.image)
            .map(|(&x, &y)| mix(x, y))
            .collect(),
        mask: a
            .mask
            .iter()
            .zip(&b.mask)
            .map(|(&x, &y)| mix(x, y))
            .collect(),
        label: mix(a.label, b.label),
    })
}
