//! Localization metrics: IoU or centre-distance matching, precision/recall,
//! and offset statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::error::{Error, Result};
use crate::pgm;
use crate::postprocess::{BoundingBox, Detection};
use crate::preprocess::Frame;

/// Offsets at or below this distance count as "close" in the report.
pub const CLOSE_MM: f64 = 1.5;
pub const DEFAULT_BIN_MM: f64 = 0.25;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionKind {
    #[default]
    Iou,
    Distance,
}

impl std::str::FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(CriterionKind::Iou),
            "distance" => Ok(CriterionKind::Distance),
            _ => Err(Error::Config(format!(
                "criterion must be `iou` or `distance`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchCriterion {
    pub kind: CriterionKind,
    pub iou_threshold: f64,
    pub distance_mm: f64,
}

impl Default for MatchCriterion {
    fn default() -> Self {
        MatchCriterion {
            kind: CriterionKind::Iou,
            iou_threshold: 0.5,
            distance_mm: 2.5,
        }
    }
}

impl MatchCriterion {
    pub fn iou(threshold: f64) -> Self {
        MatchCriterion {
            kind: CriterionKind::Iou,
            iou_threshold: threshold,
            ..Default::default()
        }
    }

    pub fn distance(mm: f64) -> Self {
        MatchCriterion {
            kind: CriterionKind::Distance,
            distance_mm: mm,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "criterion.iou_threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if !(self.distance_mm > 0.0 && self.distance_mm.is_finite()) {
            return Err(Error::Config(format!(
                "criterion.distance_mm must be > 0, got {}",
                self.distance_mm
            )));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match self.kind {
            CriterionKind::Iou => format!("iou>={}", self.iou_threshold),
            CriterionKind::Distance => format!("distance<={}mm", self.distance_mm),
        }
    }
}

/// What the pipeline reported for one frame, as needed for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub sequence_id: String,
    pub frame_index: usize,
    pub present: bool,
    pub center: Option<(f64, f64)>,
    pub bbox: Option<BoundingBox>,
    pub mean_confidence: f64,
}

impl DetectionRecord {
    pub fn from_detection(sequence_id: &str, frame_index: usize, d: &Detection) -> Self {
        DetectionRecord {
            sequence_id: sequence_id.to_string(),
            frame_index,
            present: d.present,
            center: d.center,
            bbox: d.bbox,
            mean_confidence: d.mean_confidence,
        }
    }
}

/// Labeling of a single frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameOutcome {
    pub tp: bool,
    pub fp: bool,
    pub fn_: bool,
    /// `(dx, dy)` in mm, predicted minus ground truth, for true positives.
    pub offset_mm: Option<(f64, f64)>,
}

/// Labels one frame. A present detection without a usable box on a present
/// frame counts as a false positive and a miss.
pub fn match_frame(
    det_present: bool,
    det_box: Option<&BoundingBox>,
    gt: &Annotation,
    criterion: &MatchCriterion,
    mm_per_pixel: Option<f64>,
) -> Result<FrameOutcome> {
    let mm = match (criterion.kind, mm_per_pixel) {
        (_, Some(mm)) if mm > 0.0 && mm.is_finite() => Some(mm),
        (CriterionKind::Distance, _) => {
            return Err(Error::Config(
                "distance matching needs a positive mm_per_pixel".into(),
            ))
        }
        _ => None,
    };
    let gt_box = if gt.present { gt.bbox.as_ref() } else { None };
    let mut out = FrameOutcome::default();
    match (det_present, gt_box) {
        (false, None) => {}
        (false, Some(_)) => out.fn_ = true,
        (true, None) => out.fp = true,
        (true, Some(g)) => {
            let hit = det_box.map(|d| {
                let (dc, gc) = (d.center(), g.center());
                let ok = match criterion.kind {
                    CriterionKind::Iou => iou(d, g) >= criterion.iou_threshold,
                    CriterionKind::Distance => {
                        let scale = mm.unwrap_or(1.0);
                        (dc.0 - gc.0).hypot(dc.1 - gc.1) * scale <= criterion.distance_mm
                    }
                };
                (ok, (dc.0 - gc.0, dc.1 - gc.1))
            });
            match hit {
                Some((true, (dx, dy))) => {
                    out.tp = true;
                    let scale = mm.unwrap_or(1.0);
                    out.offset_mm = Some((dx * scale, dy * scale));
                }
                _ => {
                    out.fp = true;
                    out.fn_ = true;
                }
            }
        }
    }
    Ok(out)
}

/// Labels every `(detection, ground truth)` pair in order.
pub fn match_detections(
    pairs: &[(&DetectionRecord, &Annotation)],
    criterion: &MatchCriterion,
    mm_per_pixel: Option<f64>,
) -> Result<Vec<FrameOutcome>> {
    pairs
        .iter()
        .map(|(d, g)| match_frame(d.present, d.bbox.as_ref(), g, criterion, mm_per_pixel))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub criterion: String,
    pub frames: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` when there were no positive detections.
    pub precision: Option<f64>,
    /// `None` when there were no present ground-truth frames.
    pub recall: Option<f64>,
    pub fraction_within_1_5mm: Option<f64>,
    pub mean_abs_offset_x_mm: Option<f64>,
    pub mean_abs_offset_y_mm: Option<f64>,
    #[serde(skip)]
    pub offsets_mm: Vec<(f64, f64)>,
}

pub fn aggregate(outcomes: &[FrameOutcome], criterion: &MatchCriterion) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::Data(
            "cannot aggregate an empty set of frames".into(),
        ));
    }
    let count = |f: fn(&FrameOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let (tp, fp, fn_) = (count(|o| o.tp), count(|o| o.fp), count(|o| o.fn_));
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let offsets_mm: Vec<(f64, f64)> = outcomes.iter().filter_map(|o| o.offset_mm).collect();
    let n_off = offsets_mm.len();
    let close = offsets_mm
        .iter()
        .filter(|(dx, dy)| dx.hypot(*dy) <= CLOSE_MM)
        .count();
    let mean = |f: fn(&(f64, f64)) -> f64| {
        (n_off > 0).then(|| offsets_mm.iter().map(f).sum::<f64>() / n_off as f64)
    };
    Ok(EvalReport {
        criterion: criterion.describe(),
        frames: outcomes.len(),
        tp,
        fp,
        fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        fraction_within_1_5mm: ratio(close, n_off),
        mean_abs_offset_x_mm: mean(|o| o.0.abs()),
        mean_abs_offset_y_mm: mean(|o| o.1.abs()),
        offsets_mm,
    })
}

impl EvalReport {
    /// Structured text (TOML) summary.
    pub fn summary(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

/// 2-D offset histogram with bins centred on multiples of `bin_mm`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetHistogram {
    pub bin_mm: f64,
    /// Bins run from `-half` to `half` on each axis.
    pub half: usize,
    /// Row-major `(2 * half + 1)^2` counts, rows are y.
    pub counts: Vec<usize>,
    pub x_marginal: Vec<usize>,
    pub y_marginal: Vec<usize>,
    /// Offsets that fell outside the grid; zero by construction.
    pub overflow: usize,
}

impl OffsetHistogram {
    pub fn side(&self) -> usize {
        2 * self.half + 1
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        (i as f64 - self.half as f64) * self.bin_mm
    }

    pub fn at(&self, ix: usize, iy: usize) -> usize {
        self.counts[iy * self.side() + ix]
    }
}

pub fn offset_histogram(offsets: &[(f64, f64)], bin_mm: f64) -> Result<OffsetHistogram> {
    if !(bin_mm > 0.0 && bin_mm.is_finite()) {
        return Err(Error::Config(format!(
            "offset bin width must be > 0, got {bin_mm}"
        )));
    }
    if offsets
        .iter()
        .any(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(Error::Numeric("non-finite offset".into()));
    }
    let max = offsets
        .iter()
        .fold(0.0f64, |m, (x, y)| m.max(x.abs()).max(y.abs()));
    let half = (max / bin_mm).round() as usize + 1;
    let side = 2 * half + 1;
    let mut h = OffsetHistogram {
        bin_mm,
        half,
        counts: vec![0; side * side],
        x_marginal: vec![0; side],
        y_marginal: vec![0; side],
        overflow: 0,
    };
    for &(dx, dy) in offsets {
        let ix = (dx / bin_mm).round() as i64 + half as i64;
        let iy = (dy / bin_mm).round() as i64 + half as i64;
        if ix < 0 || iy < 0 || ix >= side as i64 || iy >= side as i64 {
            h.overflow += 1;
            continue;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        h.counts[iy * side + ix] += 1;
        h.x_marginal[ix] += 1;
        h.y_marginal[iy] += 1;
    }
    Ok(h)
}

/// Writes `offsets.csv`, `offset_heatmap.csv`, `offset_hist_x.csv`,
/// `offset_hist_y.csv` and `offset_heatmap.pgm` into `dir`.
pub fn export_offsets(report: &EvalReport, dir: &Path, bin_mm: f64) -> Result<OffsetHistogram> {
    if report.offsets_mm.is_empty() {
        return Err(Error::Data("no true positives, nothing to export".into()));
    }
    let h = offset_histogram(&report.offsets_mm, bin_mm)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    let mut raw = String::from("dx_mm,dy_mm\n");
    for (dx, dy) in &report.offsets_mm {
        raw.push_str(&format!("{dx},{dy}\n"));
    }
    write("offsets.csv", raw)?;
    let mut grid = String::from("dx_mm,dy_mm,count\n");
    for iy in 0..h.side() {
        for ix in 0..h.side() {
            grid.push_str(&format!(
                "{},{},{}\n",
                h.bin_center(ix),
                h.bin_center(iy),
                h.at(ix, iy)
            ));
        }
    }
    write("offset_heatmap.csv", grid)?;
    for (name, marg) in [
        ("offset_hist_x.csv", &h.x_marginal),
        ("offset_hist_y.csv", &h.y_marginal),
    ] {
        let mut s = String::from("offset_mm,count\n");
        for (i, c) in marg.iter().enumerate() {
            s.push_str(&format!("{},{c}\n", h.bin_center(i)));
        }
        write(name, s)?;
    }
    let peak = h.counts.iter().copied().max().unwrap_or(1).max(1);
    let pixels = h.counts.iter().map(|&c| (c * 255 / peak) as u8).collect();
    pgm::write(
        &dir.join("offset_heatmap.pgm"),
        &Frame::new(h.side(), h.side(), pixels)?,
    )?;
    Ok(h)
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    sequence_id: String,
    frame_index: usize,
    present: u8,
    x_c: Option<f64>,
    y_c: Option<f64>,
    width: Option<f64>,
    height: Option<f64>,
    mean_confidence: f64,
}

/// `sequence_id,frame_index,present,x_c,y_c,width,height,mean_confidence`
pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        let b = r.bbox;
        let center = b.map(|b| b.center());
        w.serialize(DetectionRow {
            sequence_id: r.sequence_id.clone(),
            frame_index: r.frame_index,
            present: r.present as u8,
            x_c: center.map(|c| c.0),
            y_c: center.map(|c| c.1),
            width: b.map(|b| b.width()),
            height: b.map(|b| b.height()),
            mean_confidence: r.mean_confidence,
        })
        .map_err(|e| Error::Data(format!("writing detections: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("writing detections: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<DetectionRow>().enumerate() {
        let row =
            row.map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 2)))?;
        let bbox = match (row.x_c, row.y_c, row.width, row.height) {
            (Some(x), Some(y), Some(w), Some(h)) => Some(BoundingBox::new(
                x - w / 2.0,
                y - h / 2.0,
                x + w / 2.0,
                y + h / 2.0,
            )?),
            (None, None, None, None) => None,
            _ => {
                return Err(Error::Data(format!(
                    "{} line {}: box fields must be all set or all empty",
                    path.display(),
                    i + 2
                )))
            }
        };
        out.push(DetectionRecord {
            sequence_id: row.sequence_id,
            frame_index: row.frame_index,
            present: row.present != 0,
            center: bbox.map(|b| b.center()),
            bbox,
            mean_confidence: row.mean_confidence,
        });
    }
    Ok(out)
}
