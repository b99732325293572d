//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MSSHARE\0"
//! version      u32
//! header       u32 length + UTF-8 key=value text (architecture, optimizer step)
//! entry count  u32
//! entries      u32 name length + name, 4 × u32 shape, f32 payload
//! crc32        u32 over every preceding byte
//! ```
//!
//! Model tensors come first in canonical order, followed by optimizer
//! velocities named `velocity.<parameter>`.

use std::fs;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Shape, Tensor};
use crate::train::OptimState;
use crate::zoo::{build_topology, ArchSpec};

pub const MAGIC: &[u8; 8] = b"MSSHARE\0";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// A decoded checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Config,
    pub entries: Vec<Entry>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_str(out, name)?;
    for d in t.shape().dims() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.header.to_text())?;
        put_u32(&mut out, self.entries.len())?;
        for e in &self.entries {
            let t = Tensor::from_vec(e.shape, e.data.clone())?;
            put_entry(&mut out, &e.name, &t)?;
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("missing magic bytes".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let header = Config::parse(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            let shape = Shape::from(dims);
            let len = shape.checked_len()?;
            let raw = r.take(len.checked_mul(4).ok_or(Error::ExtentOverflow(dims))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { header, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// The architecture stored in the header.
    pub fn arch(&self) -> Result<ArchSpec> {
        ArchSpec::from_config(&self.header)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 text".into()))
    }
}

/// Serializes a model and, optionally, its optimizer state.
pub fn encode_checkpoint(model: &Model<f32>, optim: Option<&OptimState<f32>>) -> Result<Vec<u8>> {
    let mut header = model.spec.to_config();
    header.set("freeze_features", model.freeze_features);
    if let Some(o) = optim {
        header.set("optim_step", o.step);
    }
    let mut entries = Vec::new();
    for t in model.named_tensors() {
        entries.push(Entry {
            name: t.name,
            shape: t.tensor.shape(),
            data: t.tensor.data().to_vec(),
        });
    }
    for (name, v) in optim.map(|o| o.velocities.as_slice()).unwrap_or(&[]) {
        entries.push(Entry {
            name: format!("{VELOCITY_PREFIX}{name}"),
            shape: v.shape(),
            data: v.data().to_vec(),
        });
    }
    Checkpoint { header, entries }.encode()
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, optim: Option<&OptimState<f32>>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, optim)?)?;
    Ok(())
}

/// Copies checkpoint payloads into an existing model. Every model tensor
/// must appear in the same order with the same shape; the first that does
/// not is named in the error.
pub fn restore(ckpt: &Checkpoint, model: &mut Model<f32>) -> Result<Option<OptimState<f32>>> {
    let mut entries = ckpt.entries.iter();
    for t in model.named_tensors_mut() {
        let e = entries.next().ok_or_else(|| Error::EntryMismatch {
            name: t.name.clone(),
            msg: "missing from checkpoint".into(),
        })?;
        if e.name != t.name {
            return Err(Error::EntryMismatch {
                name: t.name,
                msg: format!("checkpoint holds `{}` at this position", e.name),
            });
        }
        if e.shape != t.tensor.shape() {
            return Err(Error::EntryMismatch {
                name: t.name,
                msg: format!("shape {} in checkpoint, {} in model", e.shape, t.tensor.shape()),
            });
        }
        t.tensor.data_mut().copy_from_slice(&e.data);
    }
    model.freeze_features = ckpt.header.bool_or("freeze_features", false)?;

    let mut velocities = Vec::new();
    for e in entries {
        let name = e.name.strip_prefix(VELOCITY_PREFIX).ok_or_else(|| Error::EntryMismatch {
            name: e.name.clone(),
            msg: "not a tensor of this model".into(),
        })?;
        velocities.push((name.to_string(), Tensor::from_vec(e.shape, e.data.clone())?));
    }
    let step: Option<u64> = ckpt.header.parse_opt("optim_step")?;
    Ok(match step {
        Some(step) => Some(OptimState { velocities, step }),
        None if velocities.is_empty() => None,
        None => return Err(Error::Checkpoint("velocities without an optimizer step".into())),
    })
}

/// Rebuilds the stored architecture and loads every tensor into it.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Option<OptimState<f32>>)> {
    let ckpt = Checkpoint::read(path)?;
    let mut model = build_topology(&ckpt.arch()?)?;
    let optim = restore(&ckpt, &mut model)?;
    Ok((model, optim))
}

/// Loads a checkpoint into a model built from a caller-chosen spec.
pub fn load_into(path: &Path, model: &mut Model<f32>) -> Result<Option<OptimState<f32>>> {
    restore(&Checkpoint::read(path)?, model)
}
