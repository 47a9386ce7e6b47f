//! Binary checkpoint format.
//!
//! ```text
//! "WBX1" | version u16 | tensor count u32
//! per tensor: name len u16 | UTF-8 name | rank u8 | dims u32 x rank | f32 LE payload
//! scalar count u32
//! per scalar: name len u16 | UTF-8 name | f64 LE
//! CRC32 (IEEE) of every preceding byte, u32 LE
//! ```
//! All integers are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::postprocess::{DecisionLogic, PostprocessConfig};
use crate::preprocess::FrameMode;
use crate::tensor::{Dims, Tensor4};

pub const MAGIC: &[u8; 4] = b"WBX1";
pub const VERSION: u16 = 1;

/// Scalars written after the tensors, in this order.
pub const SCALARS: [&str; 14] = [
    "beta_x",
    "beta_y",
    "w_c",
    "sigmoid_threshold",
    "channel_scale",
    "dropout2d_p",
    "classifier_dropout_p",
    "image_h",
    "image_w",
    "frame_mode",
    "decision_logic",
    "min_box_px",
    "in_channels",
    "bridge_channels",
];

fn scalar_values(d: &Detector) -> [f64; 14] {
    [
        d.post.beta_x,
        d.post.beta_y,
        d.w_c,
        d.post.sigmoid_threshold,
        d.model.channel_scale,
        d.model.dropout2d_p,
        d.model.classifier_dropout_p,
        d.image_size[0] as f64,
        d.image_size[1] as f64,
        match d.frame_mode {
            FrameMode::Single => 1.0,
            FrameMode::Three => 3.0,
        },
        match d.post.decision_logic {
            DecisionLogic::And => 0.0,
            DecisionLogic::Or => 1.0,
        },
        d.post.min_box_px as f64,
        d.unet.config().in_channels as f64,
        d.unet.config().bridge_channels() as f64,
    ]
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

pub fn encode(d: &Detector) -> Result<Vec<u8>> {
    let tensors = d.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_name(&mut out, name)?;
        let dims = t.dims().as_array();
        out.push(dims.len() as u8);
        for v in dims {
            let v = u32::try_from(v)
                .map_err(|_| Error::Checkpoint(format!("dimension of {name} too large")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(SCALARS.len() as u32).to_le_bytes());
    for (name, v) in SCALARS.iter().zip(scalar_values(d)) {
        put_name(&mut out, name)?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Parsed checkpoint contents before they are bound to a model.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub tensors: Vec<(String, Tensor4<f32>)>,
    pub scalars: Vec<(String, f64)>,
}

impl RawCheckpoint {
    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("scalar `{name}` missing")))
    }
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawCheckpoint> {
    if bytes.len() < 14 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if &body[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has rank {rank}"
            )));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().skip(4 - rank) {
            *d = r.u32()? as usize;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(dims.len() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor4::from_vec(dims, data)?));
    }
    let n_scalars = r.u32()? as usize;
    let mut scalars = Vec::with_capacity(n_scalars);
    for _ in 0..n_scalars {
        let name = r.name()?;
        scalars.push((name, r.f64()?));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(RawCheckpoint { tensors, scalars })
}

pub fn decode(bytes: &[u8]) -> Result<Detector> {
    let raw = decode_raw(bytes)?;
    let model = ModelConfig {
        channel_scale: raw.scalar("channel_scale")?,
        dropout2d_p: raw.scalar("dropout2d_p")?,
        classifier_dropout_p: raw.scalar("classifier_dropout_p")?,
    };
    let image_size = [
        raw.scalar("image_h")? as usize,
        raw.scalar("image_w")? as usize,
    ];
    let frame_mode = match raw.scalar("frame_mode")? as u32 {
        1 => FrameMode::Single,
        3 => FrameMode::Three,
        v => return Err(Error::Checkpoint(format!("unknown frame mode {v}"))),
    };
    let decision_logic = match raw.scalar("decision_logic")? as u32 {
        0 => DecisionLogic::And,
        1 => DecisionLogic::Or,
        v => return Err(Error::Checkpoint(format!("unknown decision logic {v}"))),
    };
    // weights are overwritten below, the init seed is irrelevant
    let mut det = Detector::new(
        model,
        image_size,
        frame_mode,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .map_err(|e| Error::Checkpoint(format!("invalid model scalars: {e}")))?;
    det.w_c = raw.scalar("w_c")?;
    det.post = PostprocessConfig {
        sigmoid_threshold: raw.scalar("sigmoid_threshold")?,
        beta_x: raw.scalar("beta_x")?,
        beta_y: raw.scalar("beta_y")?,
        decision_logic,
        min_box_px: raw.scalar("min_box_px")? as u32,
    };
    det.post
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid postprocess scalars: {e}")))?;
    let tensors: HashMap<String, Tensor4<f32>> = raw.tensors.into_iter().collect();
    det.assign(tensors)?;
    Ok(det)
}

pub fn save(path: &Path, d: &Detector) -> Result<()> {
    fs::write(path, encode(d)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Detector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Detector {
        let model = ModelConfig {
            channel_scale: 0.125,
            ..Default::default()
        };
        let mut d = Detector::new(
            model,
            [32, 32],
            FrameMode::Three,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        d.post.beta_x = 3.25;
        d.post.beta_y = 4.0 / 3.0;
        d.w_c = 7.5;
        d
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let d = tiny();
        let bytes = encode(&d).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back.post.beta_y, 4.0 / 3.0);
        assert_eq!(back.w_c, 7.5);
        for ((na, a), (nb, b)) in d.named_tensors().iter().zip(back.named_tensors()) {
            assert_eq!(*na, nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&tiny()).unwrap();
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("CRC")));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
    }
}
