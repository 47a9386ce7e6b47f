//! Synthetic ultrasound-like scan sequences with a known target box.
//!
//! Each subject gets its own background texture, a set of dark vessel-like
//! distractor ellipses and one target: a hypoechoic ellipse with a bright rim
//! and a honeycomb interior that drifts smoothly from frame to frame. Some
//! contiguous stretches of frames show no target. Multiplicative speckle is
//! applied last and the result is quantized to 8 bits.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, Dataset, Sequence};
use crate::error::{Error, Result};
use crate::postprocess::BoundingBox;
use crate::preprocess::Frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    pub frames_per_subject: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Target semi-major axis range in pixels.
    pub radius_range_px: (f64, f64),
    /// Target eccentricity range, each in `[0, 1)`.
    pub eccentricity_range: (f64, f64),
    /// Standard deviation of the speckle smoothing kernel in pixels.
    pub speckle_grain_px: f64,
    pub distractor_count: (usize, usize),
    /// Largest per-frame displacement of the target centre in pixels.
    pub motion_amplitude_px: f64,
    pub absent_fraction: f64,
    pub mm_per_pixel: f64,
    pub seed: u64,
}

impl PhantomConfig {
    /// Defaults for a given frame size; geometric quantities scale with it.
    pub fn new(
        n_subjects: usize,
        frames_per_subject: usize,
        image_h: usize,
        image_w: usize,
        seed: u64,
    ) -> Self {
        let side = image_h.min(image_w) as f64;
        PhantomConfig {
            n_subjects,
            frames_per_subject,
            image_h,
            image_w,
            radius_range_px: (0.10 * side, 0.15 * side),
            eccentricity_range: (0.0, 0.6),
            speckle_grain_px: (side / 96.0).max(0.75),
            distractor_count: (1, 3),
            motion_amplitude_px: (side / 96.0).max(0.5),
            absent_fraction: 0.2,
            mm_per_pixel: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 || self.frames_per_subject == 0 {
            return bad("phantom needs at least one subject and one frame".into());
        }
        if self.image_h == 0
            || self.image_w == 0
            || self.image_h % 16 != 0
            || self.image_w % 16 != 0
        {
            return bad(format!(
                "phantom size {}x{} must be positive multiples of 16",
                self.image_w, self.image_h
            ));
        }
        let (r0, r1) = self.radius_range_px;
        let side = self.image_h.min(self.image_w) as f64;
        if !(r0 >= 2.0 && r0 <= r1 && 2.0 * r1 + 4.0 < side) {
            return bad(format!(
                "phantom radius range [{r0}, {r1}] must be >= 2 px and fit the {side}-px frame"
            ));
        }
        let (e0, e1) = self.eccentricity_range;
        if !(0.0 <= e0 && e0 <= e1 && e1 < 1.0) {
            return bad(format!(
                "phantom eccentricity range [{e0}, {e1}] must lie in [0, 1)"
            ));
        }
        if !(self.speckle_grain_px > 0.0 && self.speckle_grain_px.is_finite()) {
            return bad(format!(
                "phantom speckle grain must be > 0, got {}",
                self.speckle_grain_px
            ));
        }
        if self.distractor_count.0 > self.distractor_count.1 {
            return bad("phantom distractor count range is reversed".into());
        }
        if !(self.motion_amplitude_px >= 0.0 && self.motion_amplitude_px.is_finite()) {
            return bad(format!(
                "phantom motion amplitude must be >= 0, got {}",
                self.motion_amplitude_px
            ));
        }
        if !(0.0..1.0).contains(&self.absent_fraction) {
            return bad(format!(
                "phantom absent fraction must be in [0, 1), got {}",
                self.absent_fraction
            ));
        }
        if !(self.mm_per_pixel > 0.0 && self.mm_per_pixel.is_finite()) {
            return bad(format!(
                "phantom mm_per_pixel must be > 0, got {}",
                self.mm_per_pixel
            ));
        }
        Ok(())
    }
}

/// Axis-aligned-after-rotation ellipse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Squared normalized radius of point `(x, y)`; `<= 1` is inside.
    pub fn rho2(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    /// Half extents of the bounding box.
    pub fn extent(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            (self.a * self.a * c * c + self.b * self.b * s * s).sqrt(),
            (self.a * self.a * s * s + self.b * self.b * c * c).sqrt(),
        )
    }

    /// Whether pixel `(x, y)` (centre at `x + 0.5`) is covered.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        self.rho2(x as f64 + 0.5, y as f64 + 0.5) <= 1.0
    }

    /// Tight integer box around every covered pixel centre, clipped to the
    /// image. `None` when no pixel centre is covered.
    pub fn pixel_box(&self, w: usize, h: usize) -> Option<BoundingBox> {
        let (ex, ey) = self.extent();
        let x0 = ((self.cx - ex - 0.5).ceil().max(0.0)) as usize;
        let x1 = ((self.cx + ex - 0.5).floor() + 1.0).clamp(0.0, w as f64) as usize;
        let y0 = ((self.cy - ey - 0.5).ceil().max(0.0)) as usize;
        let y1 = ((self.cy + ey - 0.5).floor() + 1.0).clamp(0.0, h as f64) as usize;
        // shrink to the pixels actually covered
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.covers_pixel(x, y) {
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        (bx1 > 0).then(|| BoundingBox {
            x_min: bx0 as f64,
            y_min: by0 as f64,
            x_max: bx1 as f64,
            y_max: by1 as f64,
        })
    }
}

/// Per-frame ground truth ellipse of the target (`None` when absent).
pub type TargetTrack = Vec<Option<Ellipse>>;

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let idx = |v: isize, n: usize| v.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * src[y * w + idx(x as isize + i as isize - r, w)];
            }
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[idx(y as isize + i as isize - r, h) * w + x];
            }
            out[y * w + x] = s / norm;
        }
    }
    out
}

/// Zero-mean, unit-peak smooth noise field.
fn smooth_field(w: usize, h: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..w * h).map(|_| rng.gen::<f64>() - 0.5).collect();
    let mut f = gaussian_blur(&noise, w, h, sigma);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let peak = f
        .iter()
        .fold(0.0f64, |m, v| m.max((v - mean).abs()))
        .max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / peak);
    f
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Absent-frame flags made of up to three contiguous runs.
fn absent_runs(n: usize, fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut absent = vec![false; n];
    let total = (fraction * n as f64).round() as usize;
    if total == 0 {
        return absent;
    }
    let runs = rng.gen_range(1..=3usize).min(total);
    let base = total / runs;
    let lens: Vec<usize> = (0..runs)
        .map(|i| base + usize::from(i < total % runs))
        .collect();
    let free = n - total;
    // cut points in the present frames, one gap before each run
    let mut cuts: Vec<usize> = (0..runs).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut pos = 0;
    let mut prev = 0;
    for (cut, len) in cuts.into_iter().zip(lens) {
        pos += cut - prev;
        prev = cut;
        absent[pos..pos + len].fill(true);
        pos += len;
    }
    absent
}

struct Subject {
    base: Vec<f64>,
    distractors: Vec<Ellipse>,
    target: Ellipse,
    target_level: f64,
    rim_level: f64,
    cell: f64,
}

fn render(
    cfg: &PhantomConfig,
    subj: &Subject,
    target: Option<&Ellipse>,
    drift: (f64, f64),
    rng: &mut impl Rng,
) -> Vec<u8> {
    let (w, h) = (cfg.image_w, cfg.image_h);
    let mut img = subj.base.clone();
    for d in &subj.distractors {
        let d = Ellipse {
            cx: d.cx + drift.0,
            cy: d.cy + drift.1,
            ..*d
        };
        for y in 0..h {
            for x in 0..w {
                let r2 = d.rho2(x as f64 + 0.5, y as f64 + 0.5);
                if r2 <= 1.0 {
                    // soft-edged anechoic lumen
                    let t = ((1.0 - r2) * 4.0).min(1.0);
                    img[y * w + x] = img[y * w + x] * (1.0 - t) + 0.06 * t;
                }
            }
        }
    }
    if let Some(t) = target {
        let (s, c) = t.theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let r2 = t.rho2(px, py);
                if r2 > 1.0 {
                    continue;
                }
                let r = r2.sqrt();
                let v = if r >= 0.8 {
                    subj.rim_level
                } else {
                    // honeycomb: bright fascicle walls around dark cells
                    let (dx, dy) = (px - t.cx, py - t.cy);
                    let u = (c * dx + s * dy) / subj.cell;
                    let v = (-s * dx + c * dy) / subj.cell;
                    let cellular = (u.sin() * (v + 0.5 * u).sin()).abs();
                    subj.target_level + 0.35 * (1.0 - cellular).powi(3)
                };
                img[y * w + x] = v;
            }
        }
    }
    let grain = smooth_field(w, h, cfg.speckle_grain_px, rng);
    img.iter()
        .zip(&grain)
        .map(|(&v, &g)| {
            let speckled = v * (1.0 + 0.45 * g);
            (speckled * 256.0).floor().clamp(0.0, 255.0) as u8
        })
        .collect()
}

fn generate_subject(cfg: &PhantomConfig, index: usize) -> (Sequence, TargetTrack) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (w, h) = (cfg.image_w, cfg.image_h);
    let side = w.min(h) as f64;

    let tissue = smooth_field(w, h, side / 12.0, &mut rng);
    let bands = smooth_field(w, h, side / 40.0, &mut rng);
    let level = uniform(&mut rng, (0.38, 0.5));
    let base: Vec<f64> = tissue
        .iter()
        .zip(&bands)
        .enumerate()
        .map(|(i, (&t, &b))| {
            let depth = (i / w) as f64 / h as f64;
            (level + 0.12 * t + 0.08 * b) * (1.0 - 0.3 * depth)
        })
        .collect();

    let a = uniform(&mut rng, cfg.radius_range_px);
    let e = uniform(&mut rng, cfg.eccentricity_range);
    let target = Ellipse {
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        a,
        b: a * (1.0 - e * e).sqrt(),
        theta: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let n_distractors = rng.gen_range(cfg.distractor_count.0..=cfg.distractor_count.1);
    let distractors = (0..n_distractors)
        .map(|_| {
            let r = uniform(&mut rng, (0.4 * a, 0.9 * a)).max(2.0);
            Ellipse {
                cx: rng.gen_range(0.0..w as f64),
                cy: rng.gen_range(0.0..h as f64),
                a: r,
                b: r * uniform(&mut rng, (0.5, 1.0)),
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();
    let subj = Subject {
        base,
        distractors,
        target,
        target_level: uniform(&mut rng, (0.12, 0.2)),
        rim_level: uniform(&mut rng, (0.8, 0.95)),
        cell: uniform(&mut rng, (0.06, 0.1)) * a,
    };

    let n = cfg.frames_per_subject;
    let absent = absent_runs(n, cfg.absent_fraction, &mut rng);
    let (ex, ey) = subj.target.extent();
    let (lo_x, hi_x) = (ex + 2.0, w as f64 - ex - 2.0);
    let (lo_y, hi_y) = (ey + 2.0, h as f64 - ey - 2.0);
    let mut pos = (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y));
    let mut vel = (0.0f64, 0.0f64);
    let amp = cfg.motion_amplitude_px;
    let mut drift = (0.0, 0.0);
    let mut frames = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    let mut track = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            vel.0 = 0.9 * vel.0 + 0.3 * amp * rng.gen_range(-1.0..=1.0);
            vel.1 = 0.9 * vel.1 + 0.3 * amp * rng.gen_range(-1.0..=1.0);
            let speed = vel.0.hypot(vel.1);
            if speed > amp {
                vel = (vel.0 * amp / speed, vel.1 * amp / speed);
            }
            // reflect off the margins, which keeps the step length unchanged
            let mut next = (pos.0 + vel.0, pos.1 + vel.1);
            if next.0 < lo_x || next.0 > hi_x {
                vel.0 = -vel.0;
                next.0 = pos.0 + vel.0;
            }
            if next.1 < lo_y || next.1 > hi_y {
                vel.1 = -vel.1;
                next.1 = pos.1 + vel.1;
            }
            pos = (next.0.clamp(lo_x, hi_x), next.1.clamp(lo_y, hi_y));
            drift = (drift.0 + 0.3 * vel.0, drift.1 + 0.3 * vel.1);
        }
        let ellipse = Ellipse {
            cx: pos.0,
            cy: pos.1,
            ..subj.target
        };
        let shown = (!absent[t]).then_some(ellipse);
        frames.push(Frame {
            width: w,
            height: h,
            pixels: render(cfg, &subj, shown.as_ref(), drift, &mut rng),
        });
        annotations.push(match shown.and_then(|e| e.pixel_box(w, h)) {
            Some(b) => Annotation::present(b),
            None => Annotation::ABSENT,
        });
        track.push(shown);
    }
    let seq = Sequence {
        id: format!("subject_{index:02}"),
        frames,
        annotations,
    };
    (seq, track)
}

/// Builds the dataset in memory together with the analytic target ellipses.
pub fn generate_in_memory(cfg: &PhantomConfig) -> Result<(Dataset, Vec<TargetTrack>)> {
    cfg.validate()?;
    let subjects: Vec<(Sequence, TargetTrack)> = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(cfg, i))
        .collect();
    let (sequences, tracks) = subjects.into_iter().unzip();
    Ok((
        Dataset {
            root: PathBuf::new(),
            mm_per_pixel: cfg.mm_per_pixel,
            width: cfg.image_w,
            height: cfg.image_h,
            sequences,
        },
        tracks,
    ))
}

/// Generates and writes a dataset; returns the manifest path.
pub fn generate(cfg: &PhantomConfig, root: &Path) -> Result<PathBuf> {
    let (mut ds, _) = generate_in_memory(cfg)?;
    ds.root = root.to_path_buf();
    ds.save(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_runs_hit_the_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 7, 50, 400] {
            let a = absent_runs(n, 0.2, &mut rng);
            assert_eq!(
                a.iter().filter(|&&v| v).count(),
                (0.2 * n as f64).round() as usize
            );
            let runs = a.windows(2).filter(|p| !p[0] && p[1]).count() + usize::from(a[0]);
            assert!(runs <= 3);
        }
        assert!(absent_runs(10, 0.0, &mut rng).iter().all(|&v| !v));
    }

    #[test]
    fn pixel_box_contains_every_covered_pixel() {
        let e = Ellipse {
            cx: 20.3,
            cy: 17.8,
            a: 9.0,
            b: 5.0,
            theta: 0.7,
        };
        let b = e.pixel_box(48, 48).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                if e.covers_pixel(x, y) {
                    assert!(b.contains(x as f64 + 0.5, y as f64 + 0.5));
                }
            }
        }
    }

    #[test]
    fn small_config_generates() {
        let mut cfg = PhantomConfig::new(2, 6, 32, 48, 5);
        cfg.absent_fraction = 0.0;
        let (ds, tracks) = generate_in_memory(&cfg).unwrap();
        assert_eq!(ds.sequences.len(), 2);
        assert!(ds
            .sequences
            .iter()
            .all(|s| s.annotations.iter().all(|a| a.present)));
        assert!(tracks.iter().all(|t| t.len() == 6));
        assert!(PhantomConfig::new(1, 1, 100, 96, 0).validate().is_err());
    }
}
