//! Binary checkpoint format.
//!
//! Little-endian: magic `SSEG`, version `u32`, tensor count `u32`; per tensor
//! a `u16` name length and UTF-8 name, `u8` rank, `u32` extents and `f32`
//! values in row-major order; finally a CRC32 of every preceding byte.

use std::collections::HashSet;
use std::path::Path;

use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSEG";
pub const VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const OPTIM_PREFIX: &str = "optim.";
const META_STEP: &str = "meta.step";
const META_EPOCH: &str = "meta.epoch";

/// Named `f32` tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
                return Err(Error::usage(format!("tensor {name} cannot be encoded")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.rank() as u8);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| Error::usage(format!("extent of {name} too large")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(format_err(bytes.len(), "file shorter than header and checksum"));
        }
        let body_len = bytes.len() - 4;
        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 0,
        };
        if r.take(4, "magic")? != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(format_err(body_len, "checksum mismatch"));
        }
        let count = r.u32("tensor count")?;
        let mut entries = Vec::new();
        let mut names = HashSet::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| format_err(at + 2, "name is not UTF-8"))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(format_err(at, format!("duplicate tensor name {name}")));
            }
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n.filter(|&n| n <= (body_len - r.pos) / 4).ok_or_else(|| {
                format_err(r.pos, format!("tensor {name} extents {shape:?} exceed the file"))
            })?;
            let data_at = r.pos;
            let raw = r.take(4 * n, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| format_err(data_at, e.to_string()))?;
            entries.push((name, t));
        }
        if r.pos != body_len {
            return Err(format_err(r.pos, "trailing bytes before checksum"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn counter(v: u64) -> Tensor<f32> {
    // Split so every part is exact in f32.
    let parts = [(v & 0xFF_FFFF) as f32, ((v >> 24) & 0xFF_FFFF) as f32, (v >> 48) as f32];
    Tensor::new(&[3], parts.to_vec()).expect("counter shape")
}

fn read_counter(t: &Tensor<f32>, name: &str) -> Result<u64> {
    let d = t.data();
    if d.len() != 3 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(format_err(0, format!("{name} is not a counter")));
    }
    Ok(d[0] as u64 | (d[1] as u64) << 24 | (d[2] as u64) << 48)
}

/// Snapshot of parameters, momentum buffers and counters.
pub fn snapshot<T: Scalar, M: Segmenter<T> + ?Sized>(model: &M, optim: &OptimState<T>, epoch: usize) -> Checkpoint {
    let mut entries = Vec::new();
    for (id, p) in model.params().iter() {
        entries.push((format!("{PARAM_PREFIX}{}", p.name), p.value().cast::<f32>()));
        if let Some(Some(b)) = optim.buffers.get(id.0) {
            entries.push((format!("{OPTIM_PREFIX}{}", p.name), b.cast::<f32>()));
        }
    }
    entries.push((META_STEP.into(), counter(optim.step)));
    entries.push((META_EPOCH.into(), counter(epoch as u64)));
    Checkpoint { entries }
}

/// Restore a snapshot; nothing is modified unless every tensor fits.
/// Returns the stored epoch.
pub fn restore<T: Scalar, M: Segmenter<T> + ?Sized>(
    ckpt: &Checkpoint,
    model: &mut M,
    optim: &mut OptimState<T>,
) -> Result<usize> {
    let store = model.params();
    let mut values = Vec::with_capacity(store.len());
    let mut buffers = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let v = ckpt
            .get(&format!("{PARAM_PREFIX}{}", p.name))
            .ok_or_else(|| format_err(0, format!("missing parameter {}", p.name)))?;
        if v.shape() != p.value().shape() {
            return Err(format_err(
                0,
                format!("parameter {} has shape {:?}, model expects {:?}", p.name, v.shape(), p.value().shape()),
            ));
        }
        values.push(v.cast::<T>());
        let b = ckpt.get(&format!("{OPTIM_PREFIX}{}", p.name));
        if let Some(b) = b {
            if b.shape() != p.value().shape() {
                return Err(format_err(0, format!("momentum buffer of {} has the wrong shape", p.name)));
            }
        }
        buffers.push(b.map(|b| b.cast::<T>()));
    }
    let known = ckpt
        .entries
        .iter()
        .filter(|(n, _)| n.starts_with(PARAM_PREFIX))
        .count();
    if known != store.len() {
        return Err(format_err(0, format!("checkpoint holds {known} parameters, model has {}", store.len())));
    }
    let step = read_counter(ckpt.get(META_STEP).ok_or_else(|| format_err(0, "missing meta.step"))?, META_STEP)?;
    let epoch = read_counter(ckpt.get(META_EPOCH).ok_or_else(|| format_err(0, "missing meta.epoch"))?, META_EPOCH)?;
    let store = model.params_mut();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (id, v) in ids.into_iter().zip(values) {
        store.set_value(id, v)?;
        store.get_mut(id).grad = None;
    }
    optim.buffers = buffers;
    optim.step = step;
    Ok(epoch as usize)
}

pub fn save_checkpoint<T: Scalar, M: Segmenter<T> + ?Sized>(
    path: &Path,
    model: &M,
    optim: &OptimState<T>,
    epoch: usize,
) -> Result<()> {
    snapshot(model, optim, epoch).write(path)
}

pub fn load_checkpoint<T: Scalar, M: Segmenter<T> + ?Sized>(
    path: &Path,
    model: &mut M,
    optim: &mut OptimState<T>,
) -> Result<usize> {
    restore(&Checkpoint::read(path)?, model, optim)
}

/// Stored CRC32 of a checkpoint file.
pub fn checkpoint_crc(path: &Path) -> Result<u32> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)?;
    Ok(u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()))
}
