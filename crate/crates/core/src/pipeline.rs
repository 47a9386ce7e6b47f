//! Evaluation, inference, benchmarking and ablation drivers built on a
//! trained [`Detector`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::HIDDEN;
use crate::config::RunConfig;
use crate::dataset::{leave_one_subject_out, Annotation, Dataset, FrameRef, Split, MANIFEST};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, match_detections, DetectionRecord, EvalReport, MatchCriterion};
use crate::model::Detector;
use crate::pgm;
use crate::postprocess::{BoundingBox, DecisionLogic, Detection};
use crate::preprocess::{stack_frames, Frame, FrameMode};
use crate::tensor::{Dims, Tensor4};
use crate::train::{self, PreparedData};

/// Frames per network call during evaluation.
pub const EVAL_BATCH: usize = 16;

/// Overlay intensity of predicted box borders.
pub const PRED_INTENSITY: u8 = 255;
/// Overlay intensity of ground-truth box borders.
pub const GT_INTENSITY: u8 = 0;

fn scale_detection(d: &Detection, data: &PreparedData) -> Detection {
    Detection {
        center: d.center.map(|(x, y)| (x * data.scale.0, y * data.scale.1)),
        bbox: d.bbox.map(|b| data.to_frame(&b)),
        ..*d
    }
}

fn check_compatible(det: &Detector, ds: &Dataset) -> Result<()> {
    let [h, w] = det.image_size;
    let (a, b) = (ds.width as f64 / ds.height as f64, w as f64 / h as f64);
    if (a - b).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "dataset frames are {}x{} but the checkpoint expects a {w}x{h} aspect ratio",
            ds.width, ds.height
        )));
    }
    Ok(())
}

/// Full pipeline over `refs`, boxes in original frame pixels.
pub fn detect_frames(
    det: &Detector,
    ds: &Dataset,
    refs: &[FrameRef],
) -> Result<Vec<DetectionRecord>> {
    check_compatible(det, ds)?;
    let data = PreparedData::new(ds, det.image_size, det.frame_mode)?;
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(EVAL_BATCH) {
        let dets = det.detect_batch(&data.batch_input(chunk)?)?;
        for (&r, d) in chunk.iter().zip(&dets) {
            let d = scale_detection(d, &data);
            out.push(DetectionRecord::from_detection(
                &ds.sequences[r.seq].id,
                r.frame,
                &d,
            ));
        }
    }
    Ok(out)
}

pub fn evaluate(
    det: &Detector,
    ds: &Dataset,
    refs: &[FrameRef],
    criterion: &MatchCriterion,
) -> Result<(EvalReport, Vec<DetectionRecord>)> {
    criterion.validate()?;
    let records = detect_frames(det, ds, refs)?;
    let gts: Vec<&Annotation> = refs.iter().map(|&r| ds.annotation(r)).collect();
    let pairs: Vec<_> = records.iter().zip(gts).collect();
    let outcomes = match_detections(&pairs, criterion, Some(ds.mm_per_pixel))?;
    Ok((aggregate(&outcomes, criterion)?, records))
}

/// Which frames of a dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            _ => Err(Error::Config(format!(
                "subset must be all, train, val or test, got `{s}`"
            ))),
        }
    }
}

/// Reads a `split.csv` written by training and returns the frames of `subset`.
pub fn read_split(path: &Path, ds: &Dataset, subset: Subset) -> Result<Vec<FrameRef>> {
    if subset == Subset::All {
        return Ok(ds.frame_refs());
    }
    let want = match subset {
        Subset::Train => "train",
        Subset::Val => "val",
        _ => "test",
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<(String, usize, String)>().enumerate() {
        let (id, frame, name) =
            row.map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 2)))?;
        if name != want {
            continue;
        }
        let seq = ds
            .sequences
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| {
                Error::Data(format!(
                    "{} line {}: unknown sequence `{id}`",
                    path.display(),
                    i + 2
                ))
            })?;
        if frame >= ds.sequences[seq].frames.len() {
            return Err(Error::Data(format!(
                "{} line {}: frame {frame} out of range",
                path.display(),
                i + 2
            )));
        }
        out.push(FrameRef { seq, frame });
    }
    Ok(out)
}

/// Writes `report.toml`, `detections.csv` and, when there are true
/// positives, the offset exports into `dir`.
pub fn write_eval(
    dir: &Path,
    report: &EvalReport,
    records: &[DetectionRecord],
    bin_mm: f64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("report.toml");
    fs::write(&p, report.summary()).map_err(|e| Error::io(&p, e))?;
    crate::metrics::write_detections(&dir.join("detections.csv"), records)?;
    if !report.offsets_mm.is_empty() {
        crate::metrics::export_offsets(report, dir, bin_mm)?;
    }
    Ok(())
}

/// Draws the one-pixel outline of `b` (continuous coordinates, half-open).
pub fn draw_box(frame: &mut Frame, b: &BoundingBox, value: u8) {
    let (w, h) = (frame.width, frame.height);
    let Some(b) = b.clip(w, h) else { return };
    let x0 = b.x_min.floor() as usize;
    let y0 = b.y_min.floor() as usize;
    let x1 = (b.x_max.ceil() as usize).clamp(x0 + 1, w) - 1;
    let y1 = (b.y_max.ceil() as usize).clamp(y0 + 1, h) - 1;
    for x in x0..=x1 {
        frame.pixels[y0 * w + x] = value;
        frame.pixels[y1 * w + x] = value;
    }
    for y in y0..=y1 {
        frame.pixels[y * w + x0] = value;
        frame.pixels[y * w + x1] = value;
    }
}

#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub records: Vec<DetectionRecord>,
    pub skipped: Vec<(PathBuf, String)>,
    pub overlays: Vec<PathBuf>,
}

/// Runs the detector over every `.pgm` in `dir`, in file-name order.
/// Ground-truth boxes are drawn too when `dir` is a sequence of a dataset.
pub fn infer(det: &Detector, dir: &Path, out_dir: &Path, overlays: bool) -> Result<InferOutcome> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    let seq_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let mut frames: Vec<Frame> = Vec::new();
    let mut indices = Vec::new();
    let mut skipped = Vec::new();
    for p in &paths {
        let idx = p
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(frames.len() + skipped.len());
        let frame = pgm::read(p).and_then(|f| match frames.first() {
            Some(first) if first.width != f.width || first.height != f.height => {
                Err(Error::Data(format!(
                    "{}x{} frame in a {}x{} sequence",
                    f.width, f.height, first.width, first.height
                )))
            }
            _ => Ok(f),
        });
        match frame {
            Ok(f) => {
                frames.push(f);
                indices.push(idx);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped.push((p.clone(), e.to_string()));
            }
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let gt = dir
        .parent()
        .filter(|p| p.join(MANIFEST).exists())
        .and_then(|root| Dataset::load(root).ok())
        .and_then(|ds| ds.sequences.into_iter().find(|s| s.id == seq_id))
        .map(|s| s.annotations);

    let mut records = Vec::with_capacity(frames.len());
    let mut written = Vec::new();
    if let Some(first) = frames.first() {
        let [nh, nw] = det.image_size;
        let scale = (
            first.width as f64 / nw as f64,
            first.height as f64 / nh as f64,
        );
        let resized: Vec<Frame> = frames
            .iter()
            .map(|f| resize_frame(f, nw, nh))
            .collect::<Result<_>>()?;
        let idx_all: Vec<usize> = (0..frames.len()).collect();
        for chunk in idx_all.chunks(EVAL_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * 3 * nw * nh);
            for &t in chunk {
                data.extend(stack_frames(&resized, t, det.frame_mode)?);
            }
            let x = Tensor4::from_vec(Dims::new(chunk.len(), 3, nh, nw), data)?;
            for (&t, d) in chunk.iter().zip(det.detect_batch(&x)?) {
                let d = Detection {
                    center: d.center.map(|(x, y)| (x * scale.0, y * scale.1)),
                    bbox: d.bbox.map(|b| BoundingBox {
                        x_min: b.x_min * scale.0,
                        y_min: b.y_min * scale.1,
                        x_max: b.x_max * scale.0,
                        y_max: b.y_max * scale.1,
                    }),
                    ..d
                };
                let rec = DetectionRecord::from_detection(&seq_id, indices[t], &d);
                if overlays {
                    let mut img = frames[t].clone();
                    if let Some(b) = gt
                        .as_ref()
                        .and_then(|a| a.get(indices[t]))
                        .and_then(|a| a.bbox.filter(|_| a.present))
                    {
                        draw_box(&mut img, &b, GT_INTENSITY);
                    }
                    if let (true, Some(b)) = (rec.present, rec.bbox) {
                        draw_box(&mut img, &b, PRED_INTENSITY);
                    }
                    let p = out_dir.join(format!("{:06}.pgm", indices[t]));
                    pgm::write(&p, &img)?;
                    written.push(p);
                }
                records.push(rec);
            }
        }
    }
    crate::metrics::write_detections(&out_dir.join("detections.csv"), &records)?;
    Ok(InferOutcome {
        records,
        skipped,
        overlays: written,
    })
}

fn resize_frame(f: &Frame, nw: usize, nh: usize) -> Result<Frame> {
    if (f.width, f.height) == (nw, nh) {
        return Ok(f.clone());
    }
    let plane: Vec<f32> = f.pixels.iter().map(|&p| p as f32).collect();
    let r = crate::preprocess::resize_plane(&plane, f.width, f.height, nw, nh);
    Frame::new(
        nw,
        nh,
        r.iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect(),
    )
}

/// Timing of one threading mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub threads: usize,
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub channel_scale: f64,
    pub iterations: usize,
    /// Analytic floating-point operations of one forward pass (2 per MAC).
    pub forward_flops: u64,
    pub single_thread: LatencyStats,
    pub multi_thread: LatencyStats,
}

impl BenchReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}

/// Forward FLOPs of the backbone plus classifier head.
pub fn forward_flops(det: &Detector, h: usize, w: usize) -> u64 {
    let c = det.unet.config().bridge_channels() as u64;
    2 * (det.unet.config().forward_macs(h, w) + c * HIDDEN as u64 + HIDDEN as u64 * 2)
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn latency(
    det: &Detector,
    frames: &[Frame],
    iterations: usize,
    threads: usize,
) -> Result<LatencyStats> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {threads}-thread pool: {e}")))?;
    let [h, w] = det.image_size;
    let mut times = pool.install(|| -> Result<Vec<f64>> {
        // one untimed warm-up pass
        let run = |t: usize| -> Result<()> {
            let x = Tensor4::from_vec(
                Dims::new(1, 3, h, w),
                stack_frames(frames, t, det.frame_mode)?,
            )?;
            det.detect_batch(&x)?;
            Ok(())
        };
        run(0)?;
        (0..iterations)
            .map(|i| {
                let start = Instant::now();
                run(i % frames.len())?;
                Ok(start.elapsed().as_secs_f64() * 1e3)
            })
            .collect()
    })?;
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        threads,
        samples: times.len(),
        mean_ms: mean,
        p50_ms: if times.len() == 1 {
            mean
        } else {
            percentile(&times, 0.5)
        },
        p95_ms: percentile(&times, 0.95),
    })
}

/// Per-frame latency of the full pipeline on synthetic frames.
pub fn bench(det: &Detector, iterations: usize, seed: u64) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be >= 1".into()));
    }
    let [h, w] = det.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Frame> = (0..3)
        .map(|_| Frame::new(w, h, (0..w * h).map(|_| rng.gen()).collect()))
        .collect::<Result<_>>()?;
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    Ok(BenchReport {
        height: h,
        width: w,
        channel_scale: det.model.channel_scale,
        iterations,
        forward_flops: forward_flops(det, h, w),
        single_thread: latency(det, &frames, iterations, 1)?,
        multi_thread: latency(det, &frames, iterations, cores)?,
    })
}

/// One ablation condition.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// Fraction of the training split.
    Subset(f64),
    /// Leave one sequence out; the index of the held-out sequence.
    Fold(usize),
    Frames(FrameMode),
}

impl Condition {
    pub fn label(&self, ds: &Dataset) -> String {
        match self {
            Condition::Subset(f) => format!("subset={f}"),
            Condition::Fold(i) => format!("holdout={}", ds.sequences[*i].id),
            Condition::Frames(m) => format!("frames={m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub condition: String,
    pub train_frames: usize,
    pub test_frames: usize,
    pub report: EvalReport,
}

pub const ABLATION_HEADER: &str = "condition,train_frames,test_frames,tp,fp,fn,precision,recall";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.condition,
            self.train_frames,
            self.test_frames,
            self.report.tp,
            self.report.fp,
            self.report.fn_,
            o(self.report.precision),
            o(self.report.recall)
        )
    }
}

/// Config and split for one condition. Every condition starts from the
/// same seeds.
pub fn condition_setup(cfg: &RunConfig, ds: &Dataset, c: &Condition) -> Result<(RunConfig, Split)> {
    let mut cfg = cfg.clone();
    let split = match c {
        Condition::Subset(f) => {
            cfg.data.train_fraction = *f;
            cfg.validate()?;
            train::split_for(&cfg, ds)?
        }
        Condition::Fold(i) => {
            let [a, b, _] = cfg.data.split;
            let mut folds = leave_one_subject_out(ds, b / (a + b), cfg.data.split_seed)?;
            if *i >= folds.len() {
                return Err(Error::Config(format!("fold {i} of {}", folds.len())));
            }
            let mut s = folds.swap_remove(*i);
            train::subset_train(&mut s, cfg.data.train_fraction)?;
            s
        }
        Condition::Frames(m) => {
            cfg.data.frame_mode = *m;
            train::split_for(&cfg, ds)?
        }
    };
    if split.train.is_empty() {
        return Err(Error::Data(format!(
            "condition {} has an empty training set",
            c.label(ds)
        )));
    }
    Ok((cfg, split))
}

/// Trains from scratch per condition and evaluates on its test frames.
pub fn ablation_run(
    cfg: &RunConfig,
    ds: &Dataset,
    conditions: &[Condition],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(conditions.len());
    for c in conditions {
        let (cfg_c, split) = condition_setup(cfg, ds, c)?;
        let label = c.label(ds);
        log::info!("ablation {label}: {} training frames", split.train.len());
        let outcome = train::train(&cfg_c, ds, split, |_| {})?;
        let (report, _) = evaluate(&outcome.detector, ds, &outcome.split.test, &cfg_c.eval)?;
        let row = AblationRow {
            condition: label,
            train_frames: outcome.split.train.len(),
            test_frames: outcome.split.test.len(),
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Decision logic override for evaluation.
pub fn with_logic(det: &Detector, logic: Option<DecisionLogic>) -> Detector {
    let mut d = det.clone();
    if let Some(l) = logic {
        d.post.decision_logic = l;
    }
    d
}
