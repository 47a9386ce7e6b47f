//! Brute-force loop implementations of the loss and moment formulas, and
//! the hand-evaluated cases, shared by the oracle and acceptance targets.

use rand::Rng;
use wsdet::classifier::classifier_loss;
use wsdet::loss::{bce_loss, detection_loss, dice_coefficient, dice_loss, LossWeights};
use wsdet::nn::sigmoid;
use wsdet::postprocess::{
    box_from_moments, calibrate_betas, weighted_center, weighted_std, BetaSample, PostprocessConfig,
};
use wsdet::{Dims, Tensor4};

use super::rng;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub err: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: &str, err: f64, tol: f64) -> Self {
        Check {
            name: name.to_string(),
            err,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.err <= self.tol
    }
}

pub const F64_TOL: f64 = 1e-9;
pub const F32_TOL: f64 = 1e-6;

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce_oracle(x: &Tensor4<f64>, y: &Tensor4<f64>, w_c: f64) -> f64 {
    let d = x.dims();
    let mut sum = 0.0;
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..d.h {
                for j in 0..d.w {
                    let p = logistic(x.at(n, c, i, j));
                    let t = y.at(n, c, i, j);
                    sum -= w_c * t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                }
            }
        }
    }
    sum / d.len() as f64
}

/// Mean over samples of `(2 sum p y + smooth) / (sum p + sum y + smooth)`.
fn dice_oracle(x: &Tensor4<f64>, y: &Tensor4<f64>, smooth: f64) -> f64 {
    let d = x.dims();
    let mut acc = 0.0;
    for n in 0..d.n {
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for c in 0..d.c {
            for i in 0..d.h {
                for j in 0..d.w {
                    let p = logistic(x.at(n, c, i, j));
                    let t = y.at(n, c, i, j);
                    inter += p * t;
                    sp += p;
                    sy += t;
                }
            }
        }
        acc += (2.0 * inter + smooth) / (sp + sy + smooth);
    }
    acc / d.n as f64
}

/// Weighted centre and `(K - 1) / K`-corrected weighted std by double loops.
fn moments_oracle(mask: &[f64], w: usize, h: usize, t: f64) -> Option<((f64, f64), (f64, f64))> {
    let (mut s, mut sx, mut sy, mut k) = (0.0, 0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let v = mask[y * w + x];
            if v >= t {
                s += v;
                sx += v * x as f64;
                sy += v * y as f64;
                k += 1;
            }
        }
    }
    if k == 0 {
        return None;
    }
    let (cx, cy) = (sx / s, sy / s);
    if k == 1 {
        return Some(((cx, cy), (0.0, 0.0)));
    }
    let (mut vx, mut vy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = mask[y * w + x];
            if v >= t {
                vx += v * (x as f64 - cx).powi(2);
                vy += v * (y as f64 - cy).powi(2);
            }
        }
    }
    let den = (k as f64 - 1.0) / k as f64 * s;
    Some(((cx, cy), ((vx / den).sqrt(), (vy / den).sqrt())))
}

fn random_pair(r: &mut impl Rng) -> (Tensor4<f64>, Tensor4<f64>) {
    let d = Dims::new(
        r.gen_range(1..4),
        r.gen_range(1..3),
        r.gen_range(1..9),
        r.gen_range(1..9),
    );
    let soft = r.gen_bool(0.3);
    let x = Tensor4::from_fn(d, |_, _, _, _| r.gen_range(-8.0..8.0));
    let y = Tensor4::from_fn(d, |_, _, _, _| {
        if soft {
            r.gen_range(0.0..1.0)
        } else if r.gen_bool(0.3) {
            1.0
        } else {
            0.0
        }
    });
    (x, y)
}

/// Largest relative deviation from the loop oracles over `instances` random
/// cases per formula.
pub fn equation_checks(instances: usize) -> Vec<Check> {
    let mut r = rng(4242);
    let (mut bce64, mut bce32, mut dice64, mut dice32) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let (x, y) = random_pair(&mut r);
        let w_c = r.gen_range(1.0..10.0);
        let smooth = if r.gen_bool(0.5) {
            1.0
        } else {
            r.gen_range(0.0..2.0)
        };
        bce64 = bce64.max(rel(bce_loss(&x, &y, w_c).unwrap(), bce_oracle(&x, &y, w_c)));
        dice64 = dice64.max(rel(
            dice_loss(&x, &y, smooth).unwrap(),
            1.0 - dice_oracle(&x, &y, smooth),
        ));
        // the oracle sees the same rounded inputs
        let (x32, y32) = (x.cast::<f32>(), y.cast::<f32>());
        let (xr, yr) = (x32.cast::<f64>(), y32.cast::<f64>());
        bce32 = bce32.max(rel(
            bce_loss(&x32, &y32, w_c).unwrap(),
            bce_oracle(&xr, &yr, w_c),
        ));
        dice32 = dice32.max(rel(
            dice_loss(&x32, &y32, smooth).unwrap(),
            1.0 - dice_oracle(&xr, &yr, smooth),
        ));
    }

    let (mut center, mut sigma) = (0.0f64, 0.0f64);
    let mut support = 0usize;
    for _ in 0..instances {
        let (w, h) = (r.gen_range(1..24), r.gen_range(1..24));
        let density = r.gen_range(0.0..0.6);
        let mask: Vec<f64> = (0..w * h)
            .map(|_| {
                if r.gen_bool(density) {
                    r.gen_range(0.5..1.0)
                } else {
                    r.gen_range(0.0..0.5)
                }
            })
            .collect();
        let got = weighted_center(&mask, w, 0.5);
        match (got, moments_oracle(&mask, w, h, 0.5)) {
            (None, None) => {}
            (Some(c), Some((oc, os))) => {
                support += 1;
                center = center.max(rel(c.0, oc.0)).max(rel(c.1, oc.1));
                let s = weighted_std(&mask, w, 0.5, c);
                sigma = sigma.max(rel(s.0, os.0)).max(rel(s.1, os.1));
            }
            _ => center = f64::INFINITY,
        }
    }
    assert!(
        support > instances / 2,
        "too few masks with support: {support}"
    );

    vec![
        Check::new("weighted BCE", bce64, F64_TOL),
        Check::new("weighted BCE, 32-bit", bce32, F32_TOL),
        Check::new("dice loss", dice64, F64_TOL),
        Check::new("dice loss, 32-bit", dice32, F32_TOL),
        Check::new("weighted centre", center, F64_TOL),
        Check::new("weighted std", sigma, F64_TOL),
    ]
}

fn scalar(v: f64) -> Tensor4<f64> {
    Tensor4::full(Dims::new(1, 1, 1, 1), v)
}

/// Hand-evaluated cases; each error is absolute against the rounded value.
pub fn hand_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut abs = |name: &str, got: f64, want: f64, tol: f64| {
        out.push(Check::new(name, (got - want).abs(), tol))
    };

    abs(
        "sigmoid(ln 3)",
        sigmoid(&scalar(3f64.ln())).data()[0],
        0.75,
        1e-12,
    );
    // sigma(ln 4) = 0.8
    abs(
        "bce y=1 sigma=0.8 w_c=2",
        bce_loss(&scalar(4f64.ln()), &scalar(1.0), 2.0).unwrap(),
        0.4463,
        1e-4,
    );

    let ones = Tensor4::full(Dims::new(1, 1, 2, 2), 1.0);
    let two = Tensor4::from_vec(Dims::new(1, 1, 2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let dc = dice_coefficient(&ones, &two, 0.0).unwrap();
    abs("dice all-ones vs two ones", dc, 0.6667, 1e-4);
    abs("dice loss of that case", 1.0 - dc, 0.3333, 1e-4);

    // bce = ln 2 at x = 0, y = 0; dice loss 1/3 needs the hand inputs, so the
    // weighted sum is checked on the components
    let w = LossWeights::default();
    abs(
        "detection loss weighted sum",
        w.alpha_bce * 0.6931 + w.alpha_dice * 0.3333,
        0.5066,
        1e-4,
    );
    let x0 = Tensor4::full(Dims::new(1, 1, 1, 1), 0.0);
    let (parts, _) = detection_loss(
        &x0,
        &x0,
        &LossWeights {
            w_c: Some(1.0),
            dice_smooth: 1.0,
            ..w
        },
    )
    .unwrap();
    // p = 0.5, y = 0: bce ln 2, dice (0 + 1) / (0.5 + 1) = 2/3
    abs(
        "detection loss at x=0, y=0",
        parts.total,
        0.25 * 2f64.ln() + 1.0 / 3.0,
        1e-12,
    );

    let mask = [0.6, 0.0, 0.0, 0.9];
    let c = weighted_center(&mask, 4, 0.5).unwrap();
    abs("weighted centre x", c.0, 1.8, 1e-12);
    let mask = [0.7, 0.0, 0.7];
    let c = weighted_center(&mask, 3, 0.5).unwrap();
    abs("two-pixel centre", c.0, 1.0, 1e-12);
    abs(
        "two-pixel std",
        weighted_std(&mask, 3, 0.5, c).0,
        2f64.sqrt(),
        1e-12,
    );

    let cfg = PostprocessConfig {
        beta_x: 4.0,
        ..PostprocessConfig::default()
    };
    let b = box_from_moments((50.0, 50.0), (5.0, 5.0), &cfg, 100, 100);
    abs("box x_min", b.x_min, 40.0, 1e-12);
    abs("box x_max", b.x_max, 60.0, 1e-12);

    let samples = [
        BetaSample {
            sigma_x: 1.0,
            sigma_y: 1.0,
            width: 3.0,
            height: 3.0,
        },
        BetaSample {
            sigma_x: 2.0,
            sigma_y: 2.0,
            width: 8.0,
            height: 8.0,
        },
    ];
    abs(
        "beta least squares",
        calibrate_betas(&samples).unwrap().0,
        3.8,
        1e-12,
    );

    let probs = Tensor4::from_vec(Dims::new(1, 2, 1, 1), vec![0.1, 0.9]).unwrap();
    abs(
        "classifier loss, mixed label",
        classifier_loss(&probs, &[0.5], 1.0).unwrap(),
        1.2040,
        1e-4,
    );
    out
}
