//! The full detector: backbone, presence classifier and box recovery.

use std::collections::HashMap;

use rand::Rng;

use crate::classifier::ClassifierHead;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::postprocess::{detect, Detection, PostprocessConfig};
use crate::preprocess::FrameMode;
use crate::tensor::{Buffer, Module, Param, Tensor4};
use crate::unet::UNet;

#[derive(Debug, Clone)]
pub struct Detector {
    pub model: ModelConfig,
    pub unet: UNet<f32>,
    pub head: ClassifierHead<f32>,
    pub post: PostprocessConfig,
    /// Foreground class weight used during training.
    pub w_c: f64,
    /// `[height, width]` the network was trained on.
    pub image_size: [usize; 2],
    pub frame_mode: FrameMode,
}

/// Per-frame network outputs before box recovery.
#[derive(Debug, Clone)]
pub struct RawPrediction {
    /// Sigmoid confidences, `h * w`.
    pub confidence: Vec<f32>,
    pub p_present: f32,
}

impl Detector {
    pub fn new(
        model: ModelConfig,
        image_size: [usize; 2],
        frame_mode: FrameMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let unet = UNet::new(model.unet(), rng)?;
        let mut head = ClassifierHead::new(unet.config().bridge_channels(), rng);
        head.dropout_p = model.classifier_dropout_p;
        Ok(Detector {
            model,
            unet,
            head,
            post: PostprocessConfig::default(),
            w_c: 1.0,
            image_size,
            frame_mode,
        })
    }

    /// Eval-mode network pass over an `(n, 3, h, w)` batch.
    pub fn predict_raw(&self, x: &Tensor4<f32>) -> Result<Vec<RawPrediction>> {
        let d = x.dims();
        if [d.h, d.w] != self.image_size {
            return Err(Error::Dimension(format!(
                "detector was trained on {}x{} inputs, got {d}",
                self.image_size[1], self.image_size[0]
            )));
        }
        let out = self.unet.forward(x)?;
        let conf = sigmoid(&out.logits);
        let probs = self.head.forward(&out.bridge)?;
        Ok((0..d.n)
            .map(|n| RawPrediction {
                confidence: conf.sample(n).to_vec(),
                p_present: probs.sample(n)[1],
            })
            .collect())
    }

    pub fn postprocess(&self, raw: &RawPrediction, post: &PostprocessConfig) -> Detection {
        detect(
            &raw.confidence,
            self.image_size[1],
            raw.p_present >= 0.5,
            post,
        )
    }

    pub fn detect_batch(&self, x: &Tensor4<f32>) -> Result<Vec<Detection>> {
        Ok(self
            .predict_raw(x)?
            .iter()
            .map(|r| self.postprocess(r, &self.post))
            .collect())
    }

    pub fn params(&self) -> Vec<&Param<f32>> {
        let mut p = self.unet.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut p = self.unet.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn buffers(&self) -> Vec<&Buffer<f32>> {
        self.unet.buffers()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<f32>> {
        self.unet.buffers_mut()
    }

    /// Every stored tensor, parameters first, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor4<f32>)> {
        let mut out: Vec<(&str, &Tensor4<f32>)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        out.extend(
            self.buffers()
                .into_iter()
                .map(|b| (b.name.as_str(), &b.value)),
        );
        out
    }

    /// Overwrites every parameter and buffer from `tensors`, matching by
    /// name. Missing, extra or mis-shaped tensors are errors.
    pub fn assign(&mut self, mut tensors: HashMap<String, Tensor4<f32>>) -> Result<()> {
        let mut take = |name: &str, dst: &mut Tensor4<f32>| -> Result<()> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
            if t.dims() != dst.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has dims {}, model expects {}",
                    t.dims(),
                    dst.dims()
                )));
            }
            *dst = t;
            Ok(())
        };
        for p in self
            .unet
            .params_mut()
            .into_iter()
            .chain(self.head.params_mut())
        {
            take(&p.name, &mut p.value)?;
        }
        for b in self.unet.buffers_mut() {
            take(&b.name, &mut b.value)?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}
