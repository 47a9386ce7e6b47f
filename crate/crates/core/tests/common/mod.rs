//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsdet::{Dims, Tensor4};

pub const STEP: f64 = 1e-3;
pub const SEEDS: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(dims: Dims, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks sit outside the probe step.
pub fn away_from_zero(dims: Dims, rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

/// Pointwise relative error with a small absolute floor for near-zero
/// gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-6)
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn central(x: &mut [f64], i: usize, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + STEP;
    let up = f(x);
    x[i] = orig - STEP;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * STEP)
}

/// Largest pointwise relative error between `analytic` and central
/// differences of `f` over `coords` (every coordinate when `None`).
pub fn max_rel_err(
    x: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut x = x.to_vec();
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    coords
        .iter()
        .map(|&i| rel_err(central(&mut x, i, &mut f), analytic[i]))
        .fold(0.0, f64::max)
}

/// `sum(y * r)`, the scalar probe used to reduce tensor outputs.
pub fn dot(y: &Tensor4<f64>, r: &Tensor4<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn with_data(t: &Tensor4<f64>, data: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(t.dims(), data.to_vec()).unwrap()
}

/// Central difference at step `h`, and whether it is free of ReLU and
/// max-pool kinks; `f0` is `f(x)`. Two detectors are combined: central
/// differences at `h` and `h / 2` disagree unless the kink is near the
/// center, and the second differences at the two steps stop scaling by 4
/// unless it sits near a third of the step. Both estimate the error a kink
/// adds; the allowance is relative to the derivative plus rounding noise.
pub fn central_smooth(
    x: &mut [f64],
    i: usize,
    h: f64,
    f0: f64,
    f: &mut impl FnMut(&[f64]) -> f64,
) -> (f64, bool) {
    let orig = x[i];
    let mut at = |d: f64, x: &mut [f64]| {
        x[i] = orig + d;
        let v = f(x);
        x[i] = orig;
        v
    };
    let (p1, m1, p2, m2) = (at(h, x), at(-h, x), at(h / 2.0, x), at(-h / 2.0, x));
    let full = (p1 - m1) / (2.0 * h);
    let half = (p2 - m2) / h;
    let allow = KINK_TOL * full.abs().max(half.abs()).max(1e-6)
        + 64.0 * f64::EPSILON * f0.abs().max(1.0) / h;
    let second = ((p1 - 2.0 * f0 + m1) - 4.0 * (p2 - 2.0 * f0 + m2)).abs() / (2.0 * h);
    (full, (full - half).abs() < allow && second < allow)
}

pub const KINK_TOL: f64 = 1e-5;

/// Smallest step tried when shrinking past kinks.
pub const MIN_STEP: f64 = 1e-7;

/// Sampled gradient comparison of a piecewise-smooth composite.
///
/// At `STEP`, coordinates with a kink inside the probe interval are skipped
/// and counted. Every coordinate is also checked at the first step in
/// `STEP, STEP/10, ..., MIN_STEP` that is kink-free.
#[derive(Debug, Default)]
pub struct SmoothCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub kinked: usize,
    /// Largest error over every coordinate at `STEP`, kinks included.
    pub raw_max_rel: f64,
    /// Largest error over every coordinate at its shrunken step.
    pub adaptive_max_rel: f64,
    /// Coordinates still kinked at `MIN_STEP`.
    pub unresolved: usize,
}

impl SmoothCheck {
    pub fn add(
        &mut self,
        x: &mut [f64],
        i: usize,
        analytic: f64,
        f: &mut impl FnMut(&[f64]) -> f64,
    ) {
        let f0 = f(x);
        let mut h = STEP;
        loop {
            let (num, smooth) = central_smooth(x, i, h, f0, f);
            let e = rel_err(num, analytic);
            if h == STEP {
                self.raw_max_rel = self.raw_max_rel.max(e);
            }
            if smooth {
                if h == STEP {
                    self.checked += 1;
                    self.max_rel = self.max_rel.max(e);
                }
                self.adaptive_max_rel = self.adaptive_max_rel.max(e);
                break;
            }
            if h == STEP {
                self.kinked += 1;
            }
            if h <= MIN_STEP * 1.5 {
                self.unresolved += 1;
                break;
            }
            h /= 10.0;
        }
    }

    pub fn usable_fraction(&self) -> f64 {
        self.checked as f64 / (self.checked + self.kinked).max(1) as f64
    }
}
pub mod constants;
pub mod gradients;
pub mod oracles;
pub mod props;
