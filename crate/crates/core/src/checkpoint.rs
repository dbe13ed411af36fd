//! HKCK checkpoints: every parameter tensor plus the run configuration.
//!
//! Layout (little endian): `"HKCK"`, version `u16 = 1`, `u32` length and UTF-8
//! `key=value` config text, `u32` tensor count, then per tensor a `u16` name
//! length, the name, `rows: u64`, `cols: u64` and `rows·cols` `f64` values.

use std::path::Path;

use crate::config::{Settings, MODEL_KEYS};
use crate::error::{Error, Result};
use crate::hook::HookInitStrategy;
use crate::model::{ModelConfig, ModelParams};
use crate::rng::seeded;
use crate::tensor::Matrix;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HKCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A loaded checkpoint: parameters, the training config, and the feature
/// dimension they were built for.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub config: TrainConfig,
    pub dim: usize,
}

pub fn config_text(config: &TrainConfig, dim: usize) -> String {
    let mut s = Settings {
        train: config.clone(),
        ..Settings::default()
    };
    s.synth.dim = dim;
    s.to_text(MODEL_KEYS)
}

pub fn encode_checkpoint(model: &ModelParams, config: &TrainConfig) -> Result<Vec<u8>> {
    let text = config_text(config, model.dim());
    let tensors = model.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text_len = u32::try_from(text.len()).map_err(|_| Error::Config("config text too long".into()))?;
    out.extend_from_slice(&text_len.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &ModelParams, config: &TrainConfig) -> Result<()> {
    let bytes = encode_checkpoint(model, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Reads the raw tensors and config text without interpreting them.
fn decode_raw(bytes: &[u8]) -> Result<(String, Vec<(String, Matrix)>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let text_len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(text_len, "config text")?)
        .map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?
        .to_string();
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64("tensor rows")?;
        let cols = r.u64("tensor cols")?;
        let len = usize::try_from(rows)
            .ok()
            .zip(usize::try_from(cols).ok())
            .and_then(|(a, b)| a.checked_mul(b))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::ShapeOverflow(format!("{name}: {rows} x {cols}")))?;
        let payload = r.take(len * 8, &format!("tensor {name}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Matrix::from_vec(rows as usize, cols as usize, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((text, tensors))
}

/// Fills a freshly shaped model from stored tensors, requiring exactly the
/// expected names and shapes.
fn assemble(model_config: &ModelConfig, tensors: Vec<(String, Matrix)>) -> Result<ModelParams> {
    let mut model = ModelParams::init(model_config, &HookInitStrategy::TruncNormal(0.02), &mut seeded(0))?;
    let expected: Vec<(&str, (usize, usize))> = model.tensors().iter().map(|(n, t)| (*n, t.shape())).collect();
    if expected.len() != tensors.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, the configured model has {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((name, t), (want_name, want_shape)) in tensors.into_iter().zip(expected) {
        if name != want_name {
            return Err(Error::Shape(format!("expected tensor {want_name}, found {name}")));
        }
        if t.shape() != want_shape {
            return Err(Error::Shape(format!(
                "{name}: checkpoint has {}x{}, config expects {}x{}",
                t.rows(),
                t.cols(),
                want_shape.0,
                want_shape.1
            )));
        }
        *model.get_mut(&name)? = t;
    }
    Ok(model)
}

fn parse_config(text: &str) -> Result<(TrainConfig, usize)> {
    let mut s = Settings::default();
    s.apply_text(text, "checkpoint config")
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok((s.train, s.synth.dim))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (text, tensors) = decode_raw(bytes)?;
    let (config, dim) = parse_config(&text)?;
    let model = assemble(&config.model_config(dim), tensors)?;
    Ok(Checkpoint { model, config, dim })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?)
}

/// Loads tensors into the shapes implied by `expected` instead of the stored
/// config; any disagreement is a shape error.
pub fn load_checkpoint_as(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let (_, tensors) = decode_raw(&read_bytes(path)?)?;
    assemble(expected, tensors)
}
