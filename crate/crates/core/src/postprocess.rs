//! Box recovery from a confidence mask: confidence-weighted centre and
//! spread of the supra-threshold pixels, scaled by calibrated beta factors.
//!
//! Pixel `(x, y)` of the mask has index coordinates `x`, `y`. Boxes live in
//! continuous image coordinates where pixel `x` covers `[x, x + 1)`, so a
//! mask centre maps to `x_c + 0.5` when a box is built from it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Half-open axis-aligned box, `x_min <= x < x_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let all_finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !all_finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::Annotation(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// Intersection with `[0, w) x [0, h)`, or `None` if empty.
    pub fn clip(&self, w: usize, h: usize) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(w as f64),
            y_max: self.y_max.min(h as f64),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionLogic {
    And,
    #[default]
    Or,
}

impl FromStr for DecisionLogic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(DecisionLogic::And),
            "or" => Ok(DecisionLogic::Or),
            _ => Err(Error::Config(format!(
                "decision logic must be `and` or `or`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for DecisionLogic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionLogic::And => "and",
            DecisionLogic::Or => "or",
        })
    }
}

/// Width/height of a uniform box relative to its standard deviation, used
/// until the betas are calibrated.
pub const UNCALIBRATED_BETA: f64 = 3.464_101_615_137_754_6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    pub sigmoid_threshold: f64,
    pub beta_x: f64,
    pub beta_y: f64,
    pub decision_logic: DecisionLogic,
    pub min_box_px: u32,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            sigmoid_threshold: 0.5,
            beta_x: UNCALIBRATED_BETA,
            beta_y: UNCALIBRATED_BETA,
            decision_logic: DecisionLogic::Or,
            min_box_px: 2,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.sigmoid_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!(
                "postprocess.sigmoid_threshold must be in (0, 1), got {t}"
            )));
        }
        for (name, b) in [("beta_x", self.beta_x), ("beta_y", self.beta_y)] {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!(
                    "postprocess.{name} must be > 0, got {b}"
                )));
            }
        }
        if self.min_box_px == 0 {
            return Err(Error::Config("postprocess.min_box_px must be >= 1".into()));
        }
        Ok(())
    }
}

/// Supra-threshold pixel statistics of one mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub k: usize,
    pub weight_sum: f64,
    pub center: (f64, f64),
    pub sigma: (f64, f64),
}

fn check_mask<T: Real>(mask: &[T], w: usize) -> usize {
    assert!(
        w > 0 && mask.len() % w == 0,
        "mask length {} is not a multiple of width {w}",
        mask.len()
    );
    mask.len() / w
}

/// Confidence-weighted centre `(x_c, y_c)` of pixels with `mask >= threshold`,
/// in index coordinates. `None` when no pixel qualifies.
pub fn weighted_center<T: Real>(mask: &[T], w: usize, threshold: f64) -> Option<(f64, f64)> {
    check_mask(mask, w);
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    let mut k = 0usize;
    for (i, &v) in mask.iter().enumerate() {
        let v = v.f64();
        if v >= threshold {
            k += 1;
            s += v;
            sx += v * (i % w) as f64;
            sy += v * (i / w) as f64;
        }
    }
    if k == 0 || s <= 0.0 {
        return None;
    }
    Some((sx / s, sy / s))
}

/// Weighted standard deviation with the `(K - 1) / K` correction. A single
/// qualifying pixel gives `(0, 0)`.
pub fn weighted_std<T: Real>(
    mask: &[T],
    w: usize,
    threshold: f64,
    center: (f64, f64),
) -> (f64, f64) {
    check_mask(mask, w);
    let (mut s, mut vx, mut vy) = (0.0, 0.0, 0.0);
    let mut k = 0usize;
    for (i, &v) in mask.iter().enumerate() {
        let v = v.f64();
        if v >= threshold {
            k += 1;
            s += v;
            let dx = (i % w) as f64 - center.0;
            let dy = (i / w) as f64 - center.1;
            vx += v * dx * dx;
            vy += v * dy * dy;
        }
    }
    if k < 2 || s <= 0.0 {
        return (0.0, 0.0);
    }
    let den = (k - 1) as f64 / k as f64 * s;
    ((vx / den).sqrt(), (vy / den).sqrt())
}

pub fn moments<T: Real>(mask: &[T], w: usize, threshold: f64) -> Option<Moments> {
    let center = weighted_center(mask, w, threshold)?;
    let sigma = weighted_std(mask, w, threshold, center);
    let (mut k, mut weight_sum) = (0, 0.0);
    for &v in mask {
        if v.f64() >= threshold {
            k += 1;
            weight_sum += v.f64();
        }
    }
    Some(Moments {
        k,
        weight_sum,
        center,
        sigma,
    })
}

/// Box of size `beta * sigma` (floored at `min_box_px`) centred on `center`,
/// clipped to a `w x h` image. `center` is in continuous coordinates.
pub fn box_from_moments(
    center: (f64, f64),
    sigma: (f64, f64),
    config: &PostprocessConfig,
    w: usize,
    h: usize,
) -> BoundingBox {
    let floor = config.min_box_px as f64;
    let bw = (config.beta_x * sigma.0).max(floor);
    let bh = (config.beta_y * sigma.1).max(floor);
    let b = BoundingBox {
        x_min: center.0 - 0.5 * bw,
        y_min: center.1 - 0.5 * bh,
        x_max: center.0 + 0.5 * bw,
        y_max: center.1 + 0.5 * bh,
    };
    // the centre is always on the image, so clipping cannot empty the box
    b.clip(w, h).unwrap_or(BoundingBox {
        x_min: center.0.clamp(0.0, w as f64 - 1.0).floor(),
        y_min: center.1.clamp(0.0, h as f64 - 1.0).floor(),
        x_max: center.0.clamp(0.0, w as f64 - 1.0).floor() + 1.0,
        y_max: center.1.clamp(0.0, h as f64 - 1.0).floor() + 1.0,
    })
}

/// One `(sigma, ground-truth extent)` observation per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSample {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub width: f64,
    pub height: f64,
}

/// Least squares through the origin: `beta = sum(extent * sigma) / sum(sigma^2)`.
pub fn calibrate_betas(samples: &[BetaSample]) -> Result<(f64, f64)> {
    let fit = |pairs: &mut dyn Iterator<Item = (f64, f64)>, axis: &str| -> Result<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (s, e) in pairs {
            num += e * s;
            den += s * s;
        }
        let beta = num / den;
        if den <= 0.0 || !(beta.is_finite() && beta > 0.0) {
            return Err(Error::Calibration(format!(
                "no usable {axis} samples (sum sigma^2 = {den}, fit = {beta})"
            )));
        }
        Ok(beta)
    };
    if samples.is_empty() {
        return Err(Error::Calibration(
            "no frames with a present target and K >= 2".into(),
        ));
    }
    let bx = fit(&mut samples.iter().map(|s| (s.sigma_x, s.width)), "x")?;
    let by = fit(&mut samples.iter().map(|s| (s.sigma_y, s.height)), "y")?;
    Ok((bx, by))
}

pub fn decide(mask_present: bool, classifier_present: bool, logic: DecisionLogic) -> bool {
    match logic {
        DecisionLogic::And => mask_present && classifier_present,
        DecisionLogic::Or => mask_present || classifier_present,
    }
}

/// Per-frame pipeline output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Final decision after combining mask and classifier.
    pub present: bool,
    /// Centre in continuous image coordinates, when the mask had support.
    pub center: Option<(f64, f64)>,
    pub bbox: Option<BoundingBox>,
    /// Mean confidence of the supra-threshold pixels, 0 when there are none.
    pub mean_confidence: f64,
    pub k: usize,
    pub classifier_present: bool,
}

/// Turns a sigmoid confidence map (`h x w`, row-major) and the classifier's
/// vote into a detection.
pub fn detect<T: Real>(
    mask: &[T],
    w: usize,
    classifier_present: bool,
    config: &PostprocessConfig,
) -> Detection {
    let h = check_mask(mask, w);
    match moments(mask, w, config.sigmoid_threshold) {
        None => Detection {
            present: decide(false, classifier_present, config.decision_logic),
            center: None,
            bbox: None,
            mean_confidence: 0.0,
            k: 0,
            classifier_present,
        },
        Some(m) => {
            let center = (m.center.0 + 0.5, m.center.1 + 0.5);
            Detection {
                present: decide(true, classifier_present, config.decision_logic),
                center: Some(center),
                bbox: Some(box_from_moments(center, m.sigma, config, w, h)),
                mean_confidence: m.weight_sum / m.k as f64,
                k: m.k,
                classifier_present,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(w: usize, h: usize, pts: &[(usize, usize, f64)]) -> Vec<f64> {
        let mut m = vec![0.0; w * h];
        for &(x, y, v) in pts {
            m[y * w + x] = v;
        }
        m
    }

    #[test]
    fn center_hand_values() {
        let m = grid(32, 32, &[(10, 20, 0.9)]);
        assert_eq!(weighted_center(&m, 32, 0.5), Some((10.0, 20.0)));
        assert_eq!(weighted_std(&m, 32, 0.5, (10.0, 20.0)), (0.0, 0.0));

        let m = grid(4, 1, &[(0, 0, 0.6), (3, 0, 0.9)]);
        let (xc, _) = weighted_center(&m, 4, 0.5).unwrap();
        assert_abs_diff_eq!(xc, 1.8, epsilon = 1e-12);

        let m = grid(8, 8, &[]);
        assert_eq!(weighted_center(&m, 8, 0.5), None);
    }

    #[test]
    fn rectangle_center_and_std() {
        let mut m = vec![0.0; 10 * 10];
        for y in 2..6 {
            for x in 3..8 {
                m[y * 10 + x] = 0.7;
            }
        }
        let c = weighted_center(&m, 10, 0.5).unwrap();
        assert_abs_diff_eq!(c.0, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.1, 3.5, epsilon = 1e-12);

        let m = grid(3, 1, &[(0, 0, 0.8), (2, 0, 0.8)]);
        let (sx, sy) = weighted_std(&m, 3, 0.5, (1.0, 0.0));
        assert_abs_diff_eq!(sx, 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(sy, 0.0);
    }

    #[test]
    fn box_hand_values() {
        let cfg = PostprocessConfig {
            beta_x: 4.0,
            beta_y: 4.0,
            ..Default::default()
        };
        let b = box_from_moments((50.0, 50.0), (5.0, 2.5), &cfg, 100, 100);
        assert_eq!((b.x_min, b.x_max), (40.0, 60.0));
        assert_eq!((b.y_min, b.y_max), (45.0, 55.0));

        let b = box_from_moments((20.0, 30.0), (0.0, 0.0), &cfg, 100, 100);
        assert_eq!((b.width(), b.height()), (2.0, 2.0));
        assert!(b.contains(20.0, 30.0));

        let b = box_from_moments((0.5, 99.5), (10.0, 10.0), &cfg, 100, 100);
        assert!(b.x_min == 0.0 && b.x_min < b.x_max && b.y_max == 100.0 && b.y_min < b.y_max);
    }

    #[test]
    fn calibration() {
        let exact: Vec<_> = (1..6)
            .map(|i| BetaSample {
                sigma_x: i as f64,
                sigma_y: 2.0 * i as f64,
                width: 4.0 * i as f64,
                height: 6.0 * i as f64,
            })
            .collect();
        let (bx, by) = calibrate_betas(&exact).unwrap();
        assert_abs_diff_eq!(bx, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(by, 3.0, epsilon = 1e-12);

        let pairs = [(1.0, 3.0), (2.0, 8.0)].map(|(s, w)| BetaSample {
            sigma_x: s,
            sigma_y: s,
            width: w,
            height: w,
        });
        assert_abs_diff_eq!(calibrate_betas(&pairs).unwrap().0, 3.8, epsilon = 1e-12);
        assert!(matches!(calibrate_betas(&[]), Err(Error::Calibration(_))));
        let flat = [BetaSample {
            sigma_x: 0.0,
            sigma_y: 1.0,
            width: 3.0,
            height: 3.0,
        }];
        assert!(matches!(calibrate_betas(&flat), Err(Error::Calibration(_))));
    }

    #[test]
    fn decision_table() {
        use DecisionLogic::*;
        for logic in [And, Or] {
            assert!(decide(true, true, logic));
            assert!(!decide(false, false, logic));
        }
        assert!(decide(true, false, Or) && !decide(true, false, And));
        assert!(decide(false, true, Or) && !decide(false, true, And));
        assert_eq!("AND".parse::<DecisionLogic>().unwrap(), And);
        assert!("xor".parse::<DecisionLogic>().is_err());
    }

    #[test]
    fn detect_builds_box_around_center() {
        let mut m = vec![0.0f32; 16 * 16];
        for y in 4..10 {
            for x in 6..12 {
                m[y * 16 + x] = 0.9;
            }
        }
        let d = detect(&m, 16, false, &PostprocessConfig::default());
        assert!(d.present);
        assert_eq!(d.k, 36);
        let (cx, cy) = d.center.unwrap();
        assert_abs_diff_eq!(cx, 9.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cy, 7.0, epsilon = 1e-9);
        let b = d.bbox.unwrap();
        assert!(b.contains(cx, cy));
        // uniform 6-wide block: sigma^2 = (36/35) * 35/12, so beta*sigma is close to 6
        assert!((b.width() - 6.0).abs() < 0.2, "{b:?}");
        assert_abs_diff_eq!(d.mean_confidence, 0.9, epsilon = 1e-6);

        let empty = vec![0.1f32; 16 * 16];
        let d = detect(&empty, 16, true, &PostprocessConfig::default());
        assert!(d.present && d.bbox.is_none());
        let cfg = PostprocessConfig {
            decision_logic: DecisionLogic::And,
            ..Default::default()
        };
        assert!(!detect(&empty, 16, true, &cfg).present);
    }

    #[test]
    fn config_validation() {
        assert!(PostprocessConfig::default().validate().is_ok());
        let bad = PostprocessConfig {
            sigmoid_threshold: 1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("sigmoid_threshold")));
    }
}
