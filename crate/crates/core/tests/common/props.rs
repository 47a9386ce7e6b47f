//! Postprocess properties as plain predicates, driven by proptest in the
//! property target and by a seeded generator in the acceptance target.

use rand::Rng;
use wsdet::postprocess::{
    decide, detect, moments, weighted_center, weighted_std, DecisionLogic, PostprocessConfig,
};

pub type Outcome = std::result::Result<(), String>;

const EPS: f64 = 1e-9;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn config(threshold: f64, logic: DecisionLogic) -> PostprocessConfig {
    PostprocessConfig {
        sigmoid_threshold: threshold,
        decision_logic: logic,
        ..PostprocessConfig::default()
    }
}

/// Raising the threshold never adds supra-threshold pixels, and support at
/// the higher threshold implies support at the lower one.
pub fn threshold_monotone(mask: &[f64], w: usize, t1: f64, t2: f64) -> Outcome {
    let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let k = |t: f64| moments(mask, w, t).map_or(0, |m| m.k);
    ensure(k(hi) <= k(lo), || {
        format!("K({hi}) = {} > K({lo}) = {}", k(hi), k(lo))
    })?;
    let dl = detect(mask, w, false, &config(lo, DecisionLogic::And));
    let dh = detect(mask, w, false, &config(hi, DecisionLogic::And));
    ensure(!dh.center.is_some() || dl.center.is_some(), || {
        "support vanished at the lower threshold".into()
    })
}

/// The centre lies inside the hull of the supra-threshold pixels and inside
/// the emitted box.
pub fn center_contained(mask: &[f64], w: usize, t: f64) -> Outcome {
    let d = detect(mask, w, false, &config(t, DecisionLogic::Or));
    let Some((cx, cy)) = d.center else {
        return ensure(mask.iter().all(|&v| v < t), || {
            "no centre despite support".into()
        });
    };
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &v) in mask.iter().enumerate() {
        if v >= t {
            x0 = x0.min(i % w);
            x1 = x1.max(i % w);
            y0 = y0.min(i / w);
            y1 = y1.max(i / w);
        }
    }
    ensure(
        cx >= x0 as f64 && cx <= x1 as f64 + 1.0 && cy >= y0 as f64 && cy <= y1 as f64 + 1.0,
        || format!("centre ({cx}, {cy}) outside hull x {x0}..={x1}, y {y0}..={y1}"),
    )?;
    let b = d.bbox.ok_or("support without a box")?;
    ensure(b.contains(cx, cy), || {
        format!("centre ({cx}, {cy}) outside box {b:?}")
    })
}

fn embed(
    mask: &[f64],
    w: usize,
    canvas_w: usize,
    canvas_h: usize,
    ox: usize,
    oy: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; canvas_w * canvas_h];
    for (i, &v) in mask.iter().enumerate() {
        out[(oy + i / w) * canvas_w + ox + i % w] = v;
    }
    out
}

/// Moving the mask by `(dx, dy)` moves the centre and box by the same amount
/// and leaves the spread unchanged.
pub fn translation_equivariant(mask: &[f64], w: usize, t: f64, dx: i32, dy: i32) -> Outcome {
    let h = mask.len() / w;
    let pad = 16usize;
    let (cw, ch) = (w + 2 * pad, h + 2 * pad);
    let a = embed(mask, w, cw, ch, pad, pad);
    let b = embed(
        mask,
        w,
        cw,
        ch,
        (pad as i32 + dx) as usize,
        (pad as i32 + dy) as usize,
    );
    let (Some(ca), Some(cb)) = (weighted_center(&a, cw, t), weighted_center(&b, cw, t)) else {
        return ensure(
            weighted_center(&a, cw, t).is_none() && weighted_center(&b, cw, t).is_none(),
            || "support differs after translation".into(),
        );
    };
    ensure(
        (cb.0 - ca.0 - dx as f64).abs() < EPS && (cb.1 - ca.1 - dy as f64).abs() < EPS,
        || {
            format!(
                "centre moved by ({}, {}), not ({dx}, {dy})",
                cb.0 - ca.0,
                cb.1 - ca.1
            )
        },
    )?;
    let (sa, sb) = (weighted_std(&a, cw, t, ca), weighted_std(&b, cw, t, cb));
    ensure(
        (sa.0 - sb.0).abs() < EPS && (sa.1 - sb.1).abs() < EPS,
        || format!("spread {sa:?} became {sb:?}"),
    )?;
    let cfg = config(t, DecisionLogic::Or);
    let (ba, bb) = (
        detect(&a, cw, false, &cfg).bbox.unwrap(),
        detect(&b, cw, false, &cfg).bbox.unwrap(),
    );
    let interior = |bx: &wsdet::postprocess::BoundingBox| {
        bx.x_min > 0.0 && bx.y_min > 0.0 && bx.x_max < cw as f64 && bx.y_max < ch as f64
    };
    if interior(&ba) && interior(&bb) {
        ensure(
            (bb.x_min - ba.x_min - dx as f64).abs() < EPS
                && (bb.x_max - ba.x_max - dx as f64).abs() < EPS
                && (bb.y_min - ba.y_min - dy as f64).abs() < EPS
                && (bb.y_max - ba.y_max - dy as f64).abs() < EPS,
            || format!("box {ba:?} did not move by ({dx}, {dy}): {bb:?}"),
        )?;
    }
    Ok(())
}

/// Frames positive under AND are positive under OR, for the same masks and
/// classifier votes.
pub fn and_within_or(frames: &[(Vec<f64>, bool)], w: usize, t: f64) -> Outcome {
    for (i, (mask, vote)) in frames.iter().enumerate() {
        let and = detect(mask, w, *vote, &config(t, DecisionLogic::And)).present;
        let or = detect(mask, w, *vote, &config(t, DecisionLogic::Or)).present;
        ensure(!and || or, || format!("frame {i} positive under AND only"))?;
        let mask_present = mask.iter().any(|&v| v >= t);
        ensure(
            and == decide(mask_present, *vote, DecisionLogic::And),
            || format!("frame {i}: AND table"),
        )?;
        ensure(or == decide(mask_present, *vote, DecisionLogic::Or), || {
            format!("frame {i}: OR table")
        })?;
    }
    Ok(())
}

/// A single supra-threshold pixel gives zero spread and the minimum box
/// around the pixel centre.
pub fn single_pixel(w: usize, h: usize, px: usize, py: usize, below: &[f64], peak: f64) -> Outcome {
    let mut mask = below.to_vec();
    mask[py * w + px] = peak;
    let cfg = PostprocessConfig::default();
    let d = detect(&mask, w, false, &cfg);
    ensure(d.k == 1, || format!("K = {}", d.k))?;
    let c = weighted_center(&mask, w, cfg.sigmoid_threshold).unwrap();
    ensure(
        weighted_std(&mask, w, cfg.sigmoid_threshold, c) == (0.0, 0.0),
        || "nonzero spread".into(),
    )?;
    let (cx, cy) = d.center.unwrap();
    ensure(
        (cx - px as f64 - 0.5).abs() < EPS && (cy - py as f64 - 0.5).abs() < EPS,
        || format!("centre ({cx}, {cy})"),
    )?;
    let b = d.bbox.unwrap();
    let m = cfg.min_box_px as f64;
    let full = b.clip(w, h) == Some(b)
        && b.x_min > 0.0
        && b.y_min > 0.0
        && b.x_max < w as f64
        && b.y_max < h as f64;
    if full {
        ensure(
            (b.width() - m).abs() < EPS && (b.height() - m).abs() < EPS,
            || format!("box {b:?} is not {m} px"),
        )?;
    } else {
        ensure(
            b.width() <= m + EPS && b.height() <= m + EPS && b.contains(cx, cy),
            || format!("edge box {b:?}"),
        )?;
    }
    Ok(())
}

/// Mask of a noisy blob, with values in `[0, 1]`.
pub fn random_mask<R: Rng + ?Sized>(r: &mut R, w: usize, h: usize) -> Vec<f64> {
    let (cx, cy) = (r.gen_range(0.0..w as f64), r.gen_range(0.0..h as f64));
    let (sx, sy) = (
        r.gen_range(0.5..w as f64 / 2.0 + 1.0),
        r.gen_range(0.5..h as f64 / 2.0 + 1.0),
    );
    let noise = r.gen_range(0.0..0.4);
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let g = (-0.5 * (((x - cx) / sx).powi(2) + ((y - cy) / sy).powi(2))).exp();
            (g + noise * (r.gen::<f64>() - 0.5)).clamp(0.0, 1.0)
        })
        .collect()
}

/// Runs every property `cases` times on seeded random inputs; returns
/// `(property, passed, total, first failure)`.
pub fn run_all(
    r: &mut impl Rng,
    cases: usize,
) -> Vec<(&'static str, usize, usize, Option<String>)> {
    let mut rows = Vec::new();
    let mut tally = |name: &'static str,
                     f: &mut dyn FnMut(&mut dyn rand::RngCore) -> Outcome,
                     r: &mut dyn rand::RngCore| {
        let (mut ok, mut first) = (0, None);
        for _ in 0..cases {
            match f(r) {
                Ok(()) => ok += 1,
                Err(e) => {
                    first.get_or_insert(e);
                }
            }
        }
        rows.push((name, ok, cases, first));
    };
    let dims = |r: &mut dyn rand::RngCore| (r.gen_range(1..32usize), r.gen_range(1..32usize));
    tally(
        "threshold monotonicity",
        &mut |r| {
            let (w, h) = dims(r);
            let m = random_mask(r, w, h);
            threshold_monotone(&m, w, r.gen_range(0.01..0.99), r.gen_range(0.01..0.99))
        },
        r,
    );
    tally(
        "centre containment",
        &mut |r| {
            let (w, h) = dims(r);
            let m = random_mask(r, w, h);
            center_contained(&m, w, r.gen_range(0.05..0.95))
        },
        r,
    );
    tally(
        "translation equivariance",
        &mut |r| {
            let (w, h) = dims(r);
            let m = random_mask(r, w, h);
            translation_equivariant(
                &m,
                w,
                r.gen_range(0.05..0.95),
                r.gen_range(-16..=16),
                r.gen_range(-16..=16),
            )
        },
        r,
    );
    tally(
        "AND within OR",
        &mut |r| {
            let (w, h) = dims(r);
            let t = r.gen_range(0.05..0.95);
            let frames: Vec<_> = (0..8)
                .map(|_| (random_mask(r, w, h), r.gen_bool(0.5)))
                .collect();
            and_within_or(&frames, w, t)
        },
        r,
    );
    tally(
        "K = 1 convention",
        &mut |r| {
            let (w, h) = dims(r);
            let below: Vec<f64> = (0..w * h).map(|_| r.gen_range(0.0..0.5)).collect();
            single_pixel(
                w,
                h,
                r.gen_range(0..w),
                r.gen_range(0..h),
                &below,
                r.gen_range(0.5..=1.0),
            )
        },
        r,
    );
    rows
}
