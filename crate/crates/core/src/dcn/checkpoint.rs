//! Binary checkpoint format.
//!
//! ```text
//! magic "DCN1" | u32 version | u32 header_len | header JSON
//! u32 tensor_count | tensor records ... | u32 crc32 of everything before
//! record: u32 name_len | name | u8 dtype (0 = f32) | u32 ndim | u64 dims[ndim] | payload
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_dcn, DcnConfig, DcnModel};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCN1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
struct Header {
    config: DcnConfig,
    training: bool,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters, running statistics and optional Adam state.
pub fn encode_checkpoint(model: &DcnModel, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        training: model.training,
        optimizer: optimizer.map(|o| OptimizerHeader {
            step: o.step,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    let moments = optimizer.filter(|o| !o.m.is_empty());
    if let Some(o) = moments {
        if o.m.len() != model.params.len() || o.v.len() != model.params.len() {
            return Err(Error::OptimizerStateMismatch(format!(
                "{} moment buffers for {} parameters",
                o.m.len(),
                model.params.len()
            )));
        }
    }
    let count = model.params.len() + 2 * model.stats.len() + moments.map_or(0, |_| 2 * model.params.len());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, p) in model.names.iter().zip(&model.params) {
        put_tensor(&mut out, &format!("param.{name}"), p.shape(), p.data());
    }
    for (name, s) in model.stat_names.iter().zip(&model.stats) {
        let c = [s.channels()];
        put_tensor(&mut out, &format!("buffer.{name}.running_mean"), &c, &s.mean);
        put_tensor(&mut out, &format!("buffer.{name}.running_var"), &c, &s.var);
    }
    if let Some(o) = moments {
        for (name, m) in model.names.iter().zip(&o.m) {
            put_tensor(&mut out, &format!("adam.m.{name}"), m.shape(), m.data());
        }
        for (name, v) in model.names.iter().zip(&o.v) {
            put_tensor(&mut out, &format!("adam.v.{name}"), v.shape(), v.data());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("record overruns payload at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype {dtype}")));
        }
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("tensor {name}: {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("tensor {name}: element count overflow")))?;
            shape.push(d);
        }
        let bytes = self.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

fn check_shape(name: &str, found: &[usize], expected: &[usize]) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "tensor {name} has shape {found:?}, architecture expects {expected:?}"
        )));
    }
    Ok(())
}

/// Inverse of [`encode_checkpoint`]. Validates magic, version and checksum
/// before interpreting any payload.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DcnModel, Option<AdamState>)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, no magic", bytes.len())));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found,
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("missing version".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("missing checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 8 };
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let mut model = build_dcn(&header.config, 0)?;
    model.training = header.training;
    let n = model.params.len();
    let mut m: Vec<Option<Tensor>> = vec![None; n];
    let mut v: Vec<Option<Tensor>> = vec![None; n];
    let mut seen = HashSet::new();
    let count = r.u32()?;
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        if let Some(p) = name.strip_prefix("param.") {
            let i = model
                .param_index(p)
                .ok_or_else(|| Error::Format(format!("unknown parameter {p}")))?;
            check_shape(&name, t.shape(), model.params[i].shape())?;
            model.params[i] = t.with_requires_grad(true);
        } else if let Some(b) = name.strip_prefix("buffer.") {
            let (layer, field) = b
                .rsplit_once('.')
                .ok_or_else(|| Error::Format(format!("bad buffer name {b}")))?;
            let i = model
                .stat_index(layer)
                .ok_or_else(|| Error::Format(format!("unknown buffer {b}")))?;
            let stats = model.stats_at_mut(i);
            check_shape(&name, t.shape(), &[stats.channels()])?;
            match field {
                "running_mean" => stats.mean = t.into_data(),
                "running_var" => stats.var = t.into_data(),
                _ => return Err(Error::Format(format!("unknown buffer {b}"))),
            }
        } else if let Some((slot, p)) = name
            .strip_prefix("adam.m.")
            .map(|p| (&mut m, p))
            .or_else(|| name.strip_prefix("adam.v.").map(|p| (&mut v, p)))
        {
            let i = model
                .param_index(p)
                .ok_or_else(|| Error::Format(format!("moment for unknown parameter {p}")))?;
            check_shape(&name, t.shape(), model.params[i].shape())?;
            slot[i] = Some(t);
        } else {
            return Err(Error::Format(format!("unrecognised tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let expected = n + 2 * model.stats.len();
    let core = seen.iter().filter(|s| !s.starts_with("adam.")).count();
    if core != expected {
        return Err(Error::Format(format!("{core} of {expected} model tensors present")));
    }

    let optimizer = match header.optimizer {
        None => {
            if m.iter().chain(&v).any(Option::is_some) {
                return Err(Error::Format("moment buffers without optimizer header".into()));
            }
            None
        }
        Some(h) => {
            let mut state = AdamState::new(h.lr);
            state.step = h.step;
            state.beta1 = h.beta1;
            state.beta2 = h.beta2;
            state.eps = h.eps;
            let present = m.iter().chain(&v).filter(|t| t.is_some()).count();
            if present == 2 * n {
                state.m = m.into_iter().flatten().collect();
                state.v = v.into_iter().flatten().collect();
            } else if present != 0 || h.step != 0 {
                return Err(Error::Format(format!(
                    "optimizer at step {} with {present} of {} moment buffers",
                    h.step,
                    2 * n
                )));
            }
            Some(state)
        }
    };
    Ok((model, optimizer))
}

pub fn save_checkpoint(path: &Path, model: &DcnModel, optimizer: Option<&AdamState>) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(DcnModel, Option<AdamState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
