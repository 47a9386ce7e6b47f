//! On-disk dataset layout and split helpers.
//!
//! ```text
//! root/manifest.txt
//! root/annotations.csv
//! root/<sequence_id>/<frame_index %06d>.pgm
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;
use crate::postprocess::BoundingBox;
use crate::preprocess::Frame;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const ANNOTATIONS: &str = "annotations.csv";

/// Ground truth for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub present: bool,
    pub bbox: Option<BoundingBox>,
}

impl Annotation {
    pub const ABSENT: Annotation = Annotation {
        present: false,
        bbox: None,
    };

    pub fn present(bbox: BoundingBox) -> Self {
        Annotation {
            present: true,
            bbox: Some(bbox),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub mm_per_pixel: f64,
    pub width: usize,
    pub height: usize,
    pub annotations: String,
    /// `(sequence_id, frame_count)` in dataset order.
    pub sequences: Vec<(String, usize)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "format_version = {}\nmm_per_pixel = {}\nwidth = {}\nheight = {}\nannotations = {}\n",
            self.format_version, self.mm_per_pixel, self.width, self.height, self.annotations
        );
        for (id, n) in &self.sequences {
            s.push_str(&format!("sequence = {id} {n}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        let mut sequences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("manifest line {}: expected `key = value`", i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "sequence" {
                let mut parts = v.split_whitespace();
                let (Some(id), Some(n), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::Data(format!(
                        "manifest line {}: expected `sequence = <id> <count>`",
                        i + 1
                    )));
                };
                let n = n.parse().map_err(|_| {
                    Error::Data(format!("manifest line {}: bad frame count `{n}`", i + 1))
                })?;
                sequences.push((id.to_string(), n));
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let v = kv
                .get(key)
                .ok_or_else(|| Error::Data(format!("manifest is missing `{key}`")))?;
            v.parse()
                .map_err(|_| Error::Data(format!("manifest `{key}` has invalid value `{v}`")))
        }
        let m = Manifest {
            format_version: field(&kv, "format_version")?,
            mm_per_pixel: field(&kv, "mm_per_pixel")?,
            width: field(&kv, "width")?,
            height: field(&kv, "height")?,
            annotations: kv
                .get("annotations")
                .cloned()
                .unwrap_or_else(|| ANNOTATIONS.into()),
            sequences,
        };
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "manifest format version {} unsupported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        if !(m.mm_per_pixel > 0.0 && m.mm_per_pixel.is_finite()) {
            return Err(Error::Data(format!(
                "manifest mm_per_pixel must be > 0, got {}",
                m.mm_per_pixel
            )));
        }
        if m.width == 0 || m.height == 0 {
            return Err(Error::Data("manifest frame size must be non-zero".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub mm_per_pixel: f64,
    pub width: usize,
    pub height: usize,
    pub sequences: Vec<Sequence>,
}

/// One row of `annotations.csv`.
#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    sequence_id: String,
    frame_index: usize,
    present: u8,
    x_min: Option<f64>,
    y_min: Option<f64>,
    x_max: Option<f64>,
    y_max: Option<f64>,
}

pub fn frame_path(root: &Path, sequence_id: &str, index: usize) -> PathBuf {
    root.join(sequence_id).join(format!("{index:06}.pgm"))
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn frame_refs(&self) -> Vec<FrameRef> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.frames.len()).map(move |f| FrameRef { seq: s, frame: f }))
            .collect()
    }

    pub fn annotation(&self, r: FrameRef) -> &Annotation {
        &self.sequences[r.seq].annotations[r.frame]
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            mm_per_pixel: self.mm_per_pixel,
            width: self.width,
            height: self.height,
            annotations: ANNOTATIONS.into(),
            sequences: self
                .sequences
                .iter()
                .map(|s| (s.id.clone(), s.frames.len()))
                .collect(),
        }
    }

    /// Writes frames, annotations and manifest under `root`.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut csv_out = csv::Writer::from_writer(Vec::new());
        for seq in &self.sequences {
            let dir = root.join(&seq.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, (frame, ann)) in seq.frames.iter().zip(&seq.annotations).enumerate() {
                pgm::write(&frame_path(root, &seq.id, i), frame)?;
                let b = ann.bbox;
                csv_out
                    .serialize(AnnotationRow {
                        sequence_id: seq.id.clone(),
                        frame_index: i,
                        present: ann.present as u8,
                        x_min: b.map(|b| b.x_min),
                        y_min: b.map(|b| b.y_min),
                        x_max: b.map(|b| b.x_max),
                        y_max: b.map(|b| b.y_max),
                    })
                    .map_err(|e| Error::Data(format!("writing annotations: {e}")))?;
            }
        }
        let bytes = csv_out
            .into_inner()
            .map_err(|e| Error::Data(format!("writing annotations: {e}")))?;
        let ann_path = root.join(ANNOTATIONS);
        fs::write(&ann_path, bytes).map_err(|e| Error::io(&ann_path, e))?;
        let manifest_path = root.join(MANIFEST);
        fs::write(&manifest_path, self.manifest().to_text())
            .map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Loads a dataset from its manifest file or root directory.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST))
        } else {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                path.to_path_buf(),
            )
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m = Manifest::parse(&text)?;
        let annotations = read_annotations(&root.join(&m.annotations), &m)?;
        let mut sequences = Vec::with_capacity(m.sequences.len());
        for (id, count) in &m.sequences {
            let anns = &annotations[id];
            let mut frames = Vec::with_capacity(*count);
            let mut ann_list = Vec::with_capacity(*count);
            for i in 0..*count {
                let frame = pgm::read(&frame_path(&root, id, i))?;
                if (frame.width, frame.height) != (m.width, m.height) {
                    return Err(Error::Data(format!(
                        "{}: frame is {}x{}, manifest says {}x{}",
                        frame_path(&root, id, i).display(),
                        frame.width,
                        frame.height,
                        m.width,
                        m.height
                    )));
                }
                frames.push(frame);
                ann_list.push(*anns.get(&i).ok_or_else(|| {
                    Error::Annotation(format!("no annotation row for sequence {id} frame {i}"))
                })?);
            }
            sequences.push(Sequence {
                id: id.clone(),
                frames,
                annotations: ann_list,
            });
        }
        Ok(Dataset {
            root,
            mm_per_pixel: m.mm_per_pixel,
            width: m.width,
            height: m.height,
            sequences,
        })
    }
}

fn read_annotations(
    path: &Path,
    m: &Manifest,
) -> Result<BTreeMap<String, BTreeMap<usize, Annotation>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, BTreeMap<usize, Annotation>> = m
        .sequences
        .iter()
        .map(|(id, _)| (id.clone(), BTreeMap::new()))
        .collect();
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    for (i, row) in reader.deserialize::<AnnotationRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| {
            Error::Annotation(format!(
                "{} line {line}: malformed row ({e})",
                path.display()
            ))
        })?;
        let seq = out.get_mut(&row.sequence_id).ok_or_else(|| {
            Error::Annotation(format!(
                "{} line {line}: unknown sequence `{}`",
                path.display(),
                row.sequence_id
            ))
        })?;
        let ann = match (row.present, row.x_min, row.y_min, row.x_max, row.y_max) {
            (0, None, None, None, None) => Annotation::ABSENT,
            (1, Some(x0), Some(y0), Some(x1), Some(y1)) => {
                let b = BoundingBox::new(x0, y0, x1, y1).map_err(|e| {
                    Error::Annotation(format!("{} line {line}: {e}", path.display()))
                })?;
                if x0 < 0.0 || y0 < 0.0 || x1 > m.width as f64 || y1 > m.height as f64 {
                    return Err(Error::Annotation(format!(
                        "{} line {line}: box ({x0}, {y0}, {x1}, {y1}) out of bounds for {}x{} frames",
                        path.display(),
                        m.width,
                        m.height
                    )));
                }
                Annotation::present(b)
            }
            _ => {
                return Err(Error::Annotation(format!(
                    "{} line {line}: present must be 0 with an empty box or 1 with a full box",
                    path.display()
                )))
            }
        };
        if seq.insert(row.frame_index, ann).is_some() {
            return Err(Error::Annotation(format!(
                "{} line {line}: duplicate row for sequence {} frame {}",
                path.display(),
                row.sequence_id,
                row.frame_index
            )));
        }
    }
    Ok(out)
}

/// Address of one frame inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameRef {
    pub seq: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<FrameRef>,
    pub val: Vec<FrameRef>,
    pub test: Vec<FrameRef>,
}

/// Shuffled train/val/test split. Train and val sizes are rounded, test
/// takes the remainder.
pub fn random_split(refs: &[FrameRef], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    let total = a + b + c;
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r >= 0.0)) || total <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative, got {ratios:?}"
        )));
    }
    let mut shuffled = refs.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = ((a / total) * n as f64).round() as usize;
    let n_val = (((b / total) * n as f64).round() as usize).min(n - n_train);
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(Split {
        train: shuffled,
        val,
        test,
    })
}

/// One fold per sequence: that sequence is the test set, the others are
/// split into train and val by `val_fraction`.
pub fn leave_one_subject_out(
    dataset: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<Split>> {
    if dataset.sequences.len() < 2 {
        return Err(Error::Config(
            "leave-one-subject-out needs at least two sequences".into(),
        ));
    }
    let refs = dataset.frame_refs();
    (0..dataset.sequences.len())
        .map(|held_out| {
            let rest: Vec<_> = refs.iter().copied().filter(|r| r.seq != held_out).collect();
            let mut s = random_split(&rest, (1.0 - val_fraction, val_fraction, 0.0), seed)?;
            s.test = refs.iter().copied().filter(|r| r.seq == held_out).collect();
            Ok(s)
        })
        .collect()
}
