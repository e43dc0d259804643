//! "CGCK" weight files: a named-tensor table in little-endian f32.
//!
//! ```text
//! "CGCK" | u32 version | u32 count | count x (u32 name_len, name, u32 rank, rank x u32 dim, f32 payload)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::cgcv::{GateMode, GateParams, Matrix};
use crate::encoder::{Conv2d, ConvEncoder};
use crate::error::{CgcvError, Result};
use crate::model::ModelParams;
use crate::refine::GruWeights;
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn tensor_table<T: Real>(p: &ModelParams<T>) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    p.visit(&mut |name, shape, data| {
        out.push(NamedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.iter().map(|v| v.to_f64_lossless() as f32).collect(),
        })
    });
    out
}

pub fn write_tensors<W: Write>(tensors: &[NamedTensor], mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CgcvError::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CgcvError::format(0, "not a CGCK checkpoint"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CgcvError::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(len, "name")?.to_vec())
            .map_err(|_| CgcvError::format(at + 4, "tensor name is not UTF-8"))?;
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CgcvError::format(at, "tensor too large"))?;
        let bytes = n.checked_mul(4).ok_or_else(|| CgcvError::format(at, "tensor too large"))?;
        let data = c
            .take(bytes, &format!("payload of {name}"))?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err(CgcvError::format(c.pos, format!("{} trailing bytes after tensor table", buf.len() - c.pos)));
    }
    Ok(out)
}

pub fn write_checkpoint<T: Real, W: Write>(p: &ModelParams<T>, w: W) -> Result<()> {
    write_tensors(&tensor_table(p), w)
}

/// Rebuilds parameters from a tensor table; layer widths and kernel sizes are
/// read off the shapes. Gate mode and lift switch are run-time choices.
pub fn params_from_tensors(
    tensors: Vec<NamedTensor>,
    gate_mode: GateMode,
    lift_enabled: bool,
) -> Result<ModelParams<f32>> {
    let mut map: BTreeMap<String, NamedTensor> = BTreeMap::new();
    for t in tensors {
        let name = t.name.clone();
        if map.insert(name.clone(), t).is_some() {
            return Err(CgcvError::Config(format!("tensor {name} appears twice")));
        }
    }
    let mut take = |name: &str| map.remove(name).ok_or_else(|| CgcvError::Config(format!("checkpoint lacks {name}")));

    let mut conv = |prefix: &str, stride: usize| -> Result<Conv2d<f32>> {
        let w = take(&format!("{prefix}.weight"))?;
        let b = take(&format!("{prefix}.bias"))?;
        let [o, i, k, k2] = w.shape[..] else {
            return Err(CgcvError::Config(format!("{prefix}.weight must be rank 4")));
        };
        if k != k2 || b.shape != [o] {
            return Err(CgcvError::Config(format!("{prefix} has inconsistent shapes")));
        }
        let mut c = Conv2d::zeros(i, o, k, stride, k / 2);
        c.weight = w.data;
        c.bias = b.data;
        Ok(c)
    };
    let mut encoder = |prefix: &str| -> Result<ConvEncoder<f32>> {
        let layers = (0..3).map(|i| conv(&format!("{prefix}.conv{i}"), 2)).collect::<Result<Vec<_>>>()?;
        ConvEncoder::from_layers(layers)
    };
    let fnet = encoder("fnet")?;
    let cnet = encoder("cnet")?;
    let gru = GruWeights {
        convz: conv("gru.convz", 1)?,
        convr: conv("gru.convr", 1)?,
        convq: conv("gru.convq", 1)?,
        head: conv("gru.head", 1)?,
    };
    let mut matrix = |name: &str| -> Result<Matrix<f32>> {
        let t = take(name)?;
        let [rows, cols] = t.shape[..] else {
            return Err(CgcvError::Config(format!("{name} must be rank 2")));
        };
        Ok(Matrix { rows, cols, data: t.data })
    };
    let wq = matrix("cgcv.wq")?;
    let wk = matrix("cgcv.wk")?;
    let lambda = take("cgcv.lambda")?;
    if lambda.data.len() != 1 {
        return Err(CgcvError::Config("cgcv.lambda must hold one value".into()));
    }
    if let Some(extra) = map.keys().next() {
        return Err(CgcvError::Config(format!("unexpected tensor {extra}")));
    }
    if wq.rows != wk.rows || wq.cols != wk.cols || 2 * wq.cols != cnet.out_channels() {
        return Err(CgcvError::Config("projection shapes do not match the context width".into()));
    }
    let p = ModelParams {
        fnet,
        cnet,
        gate: GateParams { wq, wk, lambda: lambda.data[0], gate_mode, lift_enabled },
        gru,
    };
    if p.gru.hidden_channels() != p.net_channels() {
        return Err(CgcvError::Config("GRU width does not match the context width".into()));
    }
    Ok(p)
}

pub fn read_checkpoint<R: Read>(r: R, gate_mode: GateMode, lift_enabled: bool) -> Result<ModelParams<f32>> {
    params_from_tensors(read_tensors(r)?, gate_mode, lift_enabled)
}
