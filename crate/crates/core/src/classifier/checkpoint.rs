//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic "FDMC" | version u32 | input h, w, c as u32 | layer count u32 |
//!   per layer: tag u8 + tag-specific u32 fields |
//!   parameter count u64 | parameters as f64 little-endian.
//!
//! Parameters round-trip bit-exactly; loading re-validates the descriptor
//! against the stored input shape.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Descriptor, EvalClassifier, LayerSpec};

const MAGIC: &[u8; 4] = b"FDMC";
const VERSION: u32 = 1;

const TAG_CONV: u8 = 0;
const TAG_RELU: u8 = 1;
const TAG_MAXPOOL: u8 = 2;
const TAG_DENSE: u8 = 3;
const TAG_SOFTMAX: u8 = 4;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what}"
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Serializes the model to `path`.
pub fn save_model(model: &EvalClassifier, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (h, w, c) = model.input_shape();
    for dim in [h, w, c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let layers = model.descriptor().layers();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        match *layer {
            LayerSpec::Conv { out_channels, kernel, stride } => {
                out.push(TAG_CONV);
                for v in [out_channels, kernel, stride] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
            LayerSpec::Relu => out.push(TAG_RELU),
            LayerSpec::MaxPool { kernel } => {
                out.push(TAG_MAXPOOL);
                out.extend_from_slice(&(kernel as u32).to_le_bytes());
            }
            LayerSpec::Dense { out_features } => {
                out.push(TAG_DENSE);
                out.extend_from_slice(&(out_features as u32).to_le_bytes());
            }
            LayerSpec::Softmax => out.push(TAG_SOFTMAX),
        }
    }
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<EvalClassifier> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let h = r.u32("input height")? as usize;
    let w = r.u32("input width")? as usize;
    let c = r.u32("input channels")? as usize;
    let layer_count = r.u32("layer count")? as usize;

    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let tag = r.u8("layer tag")?;
        let layer = match tag {
            TAG_CONV => LayerSpec::Conv {
                out_channels: r.u32("conv channels")? as usize,
                kernel: r.u32("conv kernel")? as usize,
                stride: r.u32("conv stride")? as usize,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_MAXPOOL => LayerSpec::MaxPool { kernel: r.u32("pool kernel")? as usize },
            TAG_DENSE => LayerSpec::Dense { out_features: r.u32("dense features")? as usize },
            TAG_SOFTMAX => LayerSpec::Softmax,
            other => {
                return Err(Error::Format(format!("unknown layer tag {other} at layer {i}")));
            }
        };
        layers.push(layer);
    }

    let param_count = r.u64("parameter count")? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let b = r.take(8, "parameters")?;
        params.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    EvalClassifier::from_parts(Descriptor::new(layers), (h, w, c), params)
}
