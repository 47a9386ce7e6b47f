//! Training: backbone, then beta calibration, then the presence classifier
//! on a frozen backbone.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::classifier::classifier_loss_from_logits;
use crate::config::RunConfig;
use crate::dataset::{random_split, Dataset, FrameRef, Split};
use crate::error::{Error, Result};
use crate::loss::{class_weight, detection_loss, LossParts};
use crate::metrics::{aggregate, match_frame, EvalReport};
use crate::model::{Detector, RawPrediction};
use crate::optim::SgdState;
use crate::postprocess::{
    calibrate_betas, moments, BetaSample, BoundingBox, DecisionLogic, PostprocessConfig,
};
use crate::preprocess::{
    augment, mixup, normalize, rasterize_mask, resize_plane, stack_indices, FrameMode, Sample,
};
use crate::tensor::{Dims, Tensor4};

/// Frames normalized and resized to the network input, ready for stacking.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub width: usize,
    pub height: usize,
    pub frame_mode: FrameMode,
    /// Original frame size divided by network size, per axis.
    pub scale: (f64, f64),
    planes: Vec<Vec<Vec<f32>>>,
    boxes: Vec<Vec<Option<BoundingBox>>>,
}

impl PreparedData {
    pub fn new(ds: &Dataset, image_size: [usize; 2], frame_mode: FrameMode) -> Result<Self> {
        let [nh, nw] = image_size;
        let (w, h) = (ds.width, ds.height);
        let scale = (w as f64 / nw as f64, h as f64 / nh as f64);
        let planes = ds
            .sequences
            .par_iter()
            .map(|s| {
                s.frames
                    .iter()
                    .map(|f| {
                        let p = normalize(f);
                        if (f.width, f.height) == (nw, nh) {
                            p
                        } else {
                            resize_plane(&p, f.width, f.height, nw, nh)
                        }
                    })
                    .collect()
            })
            .collect();
        let boxes = ds
            .sequences
            .iter()
            .map(|s| {
                s.annotations
                    .iter()
                    .map(|a| {
                        let b = a.bbox.filter(|_| a.present)?;
                        Some(BoundingBox {
                            x_min: b.x_min / scale.0,
                            y_min: b.y_min / scale.1,
                            x_max: b.x_max / scale.0,
                            y_max: b.y_max / scale.1,
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(PreparedData {
            width: nw,
            height: nh,
            frame_mode,
            scale,
            planes,
            boxes,
        })
    }

    /// `(3, h, w)` stacked input of one frame.
    pub fn input(&self, r: FrameRef) -> Vec<f32> {
        let seq = &self.planes[r.seq];
        let mut out = Vec::with_capacity(3 * self.width * self.height);
        for i in stack_indices(r.frame, self.frame_mode) {
            out.extend_from_slice(&seq[i]);
        }
        out
    }

    /// Ground-truth box in network coordinates.
    pub fn target(&self, r: FrameRef) -> Option<BoundingBox> {
        self.boxes[r.seq][r.frame]
    }

    pub fn sample(&self, r: FrameRef) -> Result<Sample> {
        let (w, h) = (self.width, self.height);
        let (mask, label) = match self.target(r) {
            Some(b) => (rasterize_mask(&b, w, h)?, 1.0),
            None => (vec![0.0; w * h], 0.0),
        };
        Sample::new(w, h, self.input(r), mask, label)
    }

    pub fn batch_input(&self, refs: &[FrameRef]) -> Result<Tensor4<f32>> {
        let mut data = Vec::with_capacity(refs.len() * 3 * self.width * self.height);
        for &r in refs {
            data.extend(self.input(r));
        }
        Tensor4::from_vec(Dims::new(refs.len(), 3, self.height, self.width), data)
    }

    /// Maps a network-space box back to original frame pixels.
    pub fn to_frame(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: b.x_min * self.scale.0,
            y_min: b.y_min * self.scale.1,
            x_max: b.x_max * self.scale.0,
            y_max: b.y_max * self.scale.1,
        }
    }
}

/// One row of the backbone log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossParts,
    pub val_loss: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub beta_x: f64,
    pub beta_y: f64,
}

pub const EPOCH_LOG_HEADER: &str =
    "epoch,train_loss,train_bce,train_dice,val_loss,val_precision,val_recall,beta_x,beta_y";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train.total,
            self.train.bce,
            self.train.dice,
            opt(self.val_loss),
            opt(self.val_precision),
            opt(self.val_recall),
            self.beta_x,
            self.beta_y
        )
    }
}

/// One row of the classifier log.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

pub const CLASSIFIER_LOG_HEADER: &str = "epoch,train_loss,val_accuracy";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub log: Vec<EpochLog>,
    pub classifier_log: Vec<ClassifierLog>,
    /// Epoch (1-based) whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub warnings: Vec<String>,
    pub split: Split,
}

/// Training split used by a config: the configured ratios, then the
/// `train_fraction` prefix of the shuffled training part.
pub fn split_for(cfg: &RunConfig, ds: &Dataset) -> Result<Split> {
    let [a, b, c] = cfg.data.split;
    let mut split = random_split(&ds.frame_refs(), (a, b, c), cfg.data.split_seed)?;
    subset_train(&mut split, cfg.data.train_fraction)?;
    Ok(split)
}

/// Keeps the first `round(fraction * n)` training frames. Subsets of a
/// larger fraction contain the smaller ones.
pub fn subset_train(split: &mut Split, fraction: f64) -> Result<()> {
    let n = ((split.train.len() as f64) * fraction).round() as usize;
    if n == 0 {
        return Err(Error::Data(format!(
            "training subset is empty ({} frames x {fraction})",
            split.train.len()
        )));
    }
    split.train.truncate(n);
    Ok(())
}

/// Foreground weight from the rasterized training masks.
pub fn estimate_class_weight(data: &PreparedData, refs: &[FrameRef]) -> Result<f64> {
    let (mut fg, mut total) = (0.0, 0.0);
    for &r in refs {
        let s = data.sample(r)?;
        fg += s.mask.iter().map(|&m| m as f64).sum::<f64>();
        total += s.mask.len() as f64;
    }
    Ok(class_weight(fg, total - fg))
}

const AUGMENT_SALT: u64 = 0x5851_f42d_4c95_7f2d;

/// Augmented and mixed samples for one batch. Each sample has its own RNG
/// stream, so the result does not depend on the thread count.
fn training_batch(
    data: &PreparedData,
    cfg: &RunConfig,
    refs: &[FrameRef],
    epoch: usize,
    offset: usize,
    phase: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let seed = cfg.train.seed ^ AUGMENT_SALT ^ (phase << 60);
    let mut samples = refs
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut s = data.sample(r)?;
            let mut local = ChaCha8Rng::seed_from_u64(seed);
            local.set_stream(((epoch as u64) << 32) | (offset + i) as u64);
            augment(&mut s, &cfg.augment, &mut local)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.mixup.enabled && samples.len() > 1 {
        let mut partner: Vec<usize> = (0..samples.len()).collect();
        partner.shuffle(rng);
        let mixed = partner
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let lambda = cfg.mixup.sample_lambda(rng)?;
                mixup(&samples[i], &samples[j], lambda)
            })
            .collect::<Result<Vec<_>>>()?;
        samples = mixed;
    }
    Ok(samples)
}

fn predict(
    det: &Detector,
    data: &PreparedData,
    refs: &[FrameRef],
    batch: usize,
) -> Result<Vec<RawPrediction>> {
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(batch.max(1)) {
        out.extend(det.predict_raw(&data.batch_input(chunk)?)?);
    }
    Ok(out)
}

/// Least-squares betas from eval-mode confidence maps of annotated frames.
pub fn calibrate(
    det: &Detector,
    data: &PreparedData,
    refs: &[FrameRef],
    batch: usize,
) -> Result<(f64, f64)> {
    let present: Vec<FrameRef> = refs
        .iter()
        .copied()
        .filter(|&r| data.target(r).is_some())
        .collect();
    let raw = predict(det, data, &present, batch)?;
    let samples: Vec<BetaSample> = present
        .iter()
        .zip(&raw)
        .filter_map(|(&r, p)| {
            let m = moments(&p.confidence, data.width, det.post.sigmoid_threshold)?;
            let gt = data.target(r)?;
            (m.k >= 2).then_some(BetaSample {
                sigma_x: m.sigma.0,
                sigma_y: m.sigma.1,
                width: gt.width(),
                height: gt.height(),
            })
        })
        .collect();
    calibrate_betas(&samples)
}

struct ValResult {
    loss: Option<f64>,
    report: Option<EvalReport>,
}

/// Validation loss and mask-only precision/recall.
fn validate(
    det: &Detector,
    data: &PreparedData,
    cfg: &RunConfig,
    refs: &[FrameRef],
    w_c: f64,
) -> Result<ValResult> {
    if refs.is_empty() {
        return Ok(ValResult {
            loss: None,
            report: None,
        });
    }
    let weights = crate::loss::LossWeights {
        w_c: Some(w_c),
        ..cfg.loss
    };
    let post = PostprocessConfig {
        decision_logic: DecisionLogic::Or,
        ..det.post
    };
    let (mut loss_sum, mut outcomes) = (0.0, Vec::with_capacity(refs.len()));
    for chunk in refs.chunks(cfg.train.batch_size) {
        let samples = chunk
            .iter()
            .map(|&r| data.sample(r))
            .collect::<Result<Vec<_>>>()?;
        let (x, y, _) = Sample::batch(&samples)?;
        let out = det.unet.forward(&x)?;
        let (parts, _) = detection_loss(&out.logits, &y, &weights)?;
        loss_sum += parts.total * chunk.len() as f64;
        let conf = crate::nn::sigmoid(&out.logits);
        for (i, &r) in chunk.iter().enumerate() {
            let d = crate::postprocess::detect(conf.sample(i), data.width, false, &post);
            let gt = match data.target(r) {
                Some(b) => crate::dataset::Annotation::present(b),
                None => crate::dataset::Annotation::ABSENT,
            };
            outcomes.push(match_frame(
                d.present,
                d.bbox.as_ref(),
                &gt,
                &cfg.eval,
                Some(1.0),
            )?);
        }
    }
    Ok(ValResult {
        loss: Some(loss_sum / refs.len() as f64),
        report: Some(aggregate(&outcomes, &cfg.eval)?),
    })
}

/// Larger is better: recall, then precision, then lower validation loss.
fn selection_key(log: &EpochLog) -> (f64, f64, f64) {
    (
        log.val_recall.unwrap_or(-1.0),
        log.val_precision.unwrap_or(-1.0),
        -log.val_loss.unwrap_or(f64::INFINITY),
    )
}

fn better(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
    a.partial_cmp(&b) == Some(std::cmp::Ordering::Greater)
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_EPOCHS: usize = 5;

/// Runs all three phases on an in-memory dataset.
pub fn train(
    cfg: &RunConfig,
    ds: &Dataset,
    split: Split,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let data = PreparedData::new(ds, cfg.data.image_size, cfg.data.frame_mode)?;
    let t = &cfg.train;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut det = Detector::new(
        cfg.model,
        cfg.data.image_size,
        cfg.data.frame_mode,
        &mut rng,
    )?;
    det.post = cfg.postprocess;
    let w_c = match cfg.loss.w_c {
        Some(w) => w,
        None => estimate_class_weight(&data, &split.train)?,
    };
    det.w_c = w_c;
    log::info!("class weight w_c = {w_c:.3}");
    let weights = crate::loss::LossWeights {
        w_c: Some(w_c),
        ..cfg.loss
    };
    let mut warnings = Vec::new();
    let calib_refs: Vec<FrameRef> = split
        .train
        .iter()
        .copied()
        .take(t.val_calibration_frames)
        .collect();

    // phase 1: backbone
    let mut sgd = SgdState::new(
        cfg.sgd.learning_rate,
        cfg.sgd.momentum,
        cfg.sgd.weight_decay,
    );
    let mut order = split.train.clone();
    let mut log = Vec::with_capacity(t.epochs);
    let mut best: Option<((f64, f64, f64), usize, Detector)> = None;
    let mut initial_loss = None;
    let mut above = 0;
    for epoch in 0..t.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut sums, mut seen) = ([0.0; 3], 0usize);
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let samples = training_batch(&data, cfg, chunk, epoch, b * t.batch_size, 1, &mut rng)?;
            let (x, y, _) = Sample::batch(&samples)?;
            for p in det.unet_params_mut() {
                p.zero_grad();
            }
            let (out, cache) = det.unet.forward_train(&x, &mut rng)?;
            let (parts, grad) = detection_loss(&out.logits, &y, &weights).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {}: {m}", epoch + 1)),
                other => other,
            })?;
            det.unet.backward(cache, &grad, None)?;
            sgd.step(det.unet_params_mut())?;
            let n = chunk.len() as f64;
            sums[0] += parts.total * n;
            sums[1] += parts.bce * n;
            sums[2] += parts.dice * n;
            seen += chunk.len();
        }
        let n = seen as f64;
        let train = LossParts {
            total: sums[0] / n,
            bce: sums[1] / n,
            dice: sums[2] / n,
        };
        if !train.total.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss is not finite at epoch {}",
                epoch + 1
            )));
        }
        let init = *initial_loss.get_or_insert(train.total);
        above = if train.total > DIVERGENCE_FACTOR * init {
            above + 1
        } else {
            0
        };
        if above >= DIVERGENCE_EPOCHS {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {}: loss {} exceeded {DIVERGENCE_FACTOR}x the initial {init} for {DIVERGENCE_EPOCHS} epochs",
                epoch + 1,
                train.total
            )));
        }

        let (beta_x, beta_y) = calibrate(&det, &data, &calib_refs, t.batch_size)
            .unwrap_or((cfg.postprocess.beta_x, cfg.postprocess.beta_y));
        det.post.beta_x = beta_x;
        det.post.beta_y = beta_y;
        let val = validate(&det, &data, cfg, &split.val, w_c)?;
        let row = EpochLog {
            epoch: epoch + 1,
            train,
            val_loss: val.loss,
            val_precision: val.report.as_ref().and_then(|r| r.precision),
            val_recall: val.report.as_ref().and_then(|r| r.recall),
            beta_x,
            beta_y,
        };
        log::info!(
            "epoch {:>3} loss {:.4} val recall {} precision {} ({:.1}s)",
            row.epoch,
            row.train.total,
            opt(row.val_recall),
            opt(row.val_precision),
            start.elapsed().as_secs_f64()
        );
        on_epoch(&row);
        let key = selection_key(&row);
        if best.as_ref().map_or(true, |(k, _, _)| better(key, *k)) {
            best = Some((key, row.epoch, det.clone()));
        }
        log.push(row);
    }
    let best_epoch = match best {
        Some((_, e, d)) => {
            det = d;
            e
        }
        None => 0,
    };
    det.post = cfg.postprocess;

    // phase 2: betas over the whole training split
    let calibrated = if log.is_empty() {
        Err(Error::Calibration(
            "no training epochs, so no training signal to calibrate from".into(),
        ))
    } else {
        calibrate(&det, &data, &split.train, t.batch_size)
    };
    match calibrated {
        Ok((bx, by)) => {
            det.post.beta_x = bx;
            det.post.beta_y = by;
            log::info!("calibrated beta_x = {bx:.4}, beta_y = {by:.4}");
        }
        Err(e) => {
            let msg = format!(
                "{e}; keeping beta_x = {}, beta_y = {}",
                det.post.beta_x, det.post.beta_y
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    // phase 3: classifier on the frozen encoder
    let mut sgd = SgdState::new(
        cfg.sgd.learning_rate,
        cfg.sgd.momentum,
        cfg.sgd.weight_decay,
    );
    let mut classifier_log = Vec::with_capacity(t.classifier_epochs);
    for epoch in 0..t.classifier_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let samples = training_batch(&data, cfg, chunk, epoch, b * t.batch_size, 2, &mut rng)?;
            let (x, _, labels) = Sample::batch(&samples)?;
            let bridge = det.unet.encode(&x)?;
            for p in det.head_params_mut() {
                p.zero_grad();
            }
            let (logits, cache) = det.head.forward_train(&bridge, &mut rng)?;
            let (loss, grad) = classifier_loss_from_logits(&logits, &labels, 1.0)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "classifier loss is not finite at epoch {}",
                    epoch + 1
                )));
            }
            det.head.backward(&cache, &grad)?;
            sgd.step(det.head_params_mut())?;
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_accuracy = if split.val.is_empty() {
            None
        } else {
            let raw = predict(&det, &data, &split.val, t.batch_size)?;
            let correct = split
                .val
                .iter()
                .zip(&raw)
                .filter(|(&r, p)| (p.p_present >= 0.5) == data.target(r).is_some())
                .count();
            Some(correct as f64 / split.val.len() as f64)
        };
        let row = ClassifierLog {
            epoch: epoch + 1,
            train_loss: sum / seen as f64,
            val_accuracy,
        };
        log::info!(
            "classifier epoch {:>3} loss {:.4} val accuracy {}",
            row.epoch,
            row.train_loss,
            opt(val_accuracy)
        );
        classifier_log.push(row);
    }

    Ok(TrainOutcome {
        detector: det,
        log,
        classifier_log,
        best_epoch,
        warnings,
        split,
    })
}

impl Detector {
    pub(crate) fn unet_params_mut(&mut self) -> Vec<&mut crate::tensor::Param<f32>> {
        use crate::tensor::Module;
        self.unet.params_mut()
    }

    pub(crate) fn head_params_mut(&mut self) -> Vec<&mut crate::tensor::Param<f32>> {
        use crate::tensor::Module;
        self.head.params_mut()
    }
}

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub classifier_log: PathBuf,
    pub config: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "model.wbx";
pub const LOG_FILE: &str = "train_log.csv";
pub const CLASSIFIER_LOG_FILE: &str = "classifier_log.csv";
pub const SPLIT_FILE: &str = "split.csv";

pub fn write_logs(dir: &Path, outcome: &TrainOutcome) -> Result<(PathBuf, PathBuf)> {
    let log_path = dir.join(LOG_FILE);
    let mut text = format!("{EPOCH_LOG_HEADER}\n");
    for r in &outcome.log {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    let cls_path = dir.join(CLASSIFIER_LOG_FILE);
    let mut text = format!("{CLASSIFIER_LOG_HEADER}\n");
    for r in &outcome.classifier_log {
        text.push_str(&format!(
            "{},{},{}\n",
            r.epoch,
            r.train_loss,
            opt(r.val_accuracy)
        ));
    }
    fs::write(&cls_path, text).map_err(|e| Error::io(&cls_path, e))?;
    Ok((log_path, cls_path))
}

/// `sequence_id,frame_index,subset` for every frame of the split.
pub fn write_split(path: &Path, ds: &Dataset, split: &Split) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("sequence_id,frame_index,subset\n");
    for (name, refs) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        for r in refs {
            text.push_str(&format!("{},{},{name}\n", ds.sequences[r.seq].id, r.frame));
        }
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads the dataset, trains and writes checkpoint, logs, split and the
/// resolved config into `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<(TrainOutcome, TrainArtifacts)> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data.path)?;
    let split = split_for(cfg, &ds)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let outcome = train(cfg, &ds, split, |_| {})?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &outcome.detector)?;
    let (log, classifier_log) = write_logs(dir, &outcome)?;
    write_split(&dir.join(SPLIT_FILE), &ds, &outcome.split)?;
    let config = dir.join("config.toml");
    cfg.save(&config)?;
    Ok((
        outcome,
        TrainArtifacts {
            checkpoint: ckpt,
            log,
            classifier_log,
            config,
        },
    ))
}
