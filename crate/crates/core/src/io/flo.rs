//! Middlebury `.flo`: magic `202021.25` (f32), i32 width, i32 height, then
//! interleaved `(u, v)` f32 values in row-major order, all little-endian.

use std::io::{Read, Write};

use crate::error::{CgcvError, Result};
use crate::flow::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;
pub const FLO_HEADER_LEN: usize = 12;

pub fn write_flo<W: Write>(flow: &FlowField<f32>, mut w: W) -> Result<()> {
    if !flow.is_finite() {
        return Err(CgcvError::Contract("refusing to write a non-finite flow".into()));
    }
    let (h, wd) = (flow.height(), flow.width());
    let dim = |n: usize| i32::try_from(n).map_err(|_| CgcvError::Contract(format!("dimension {n} exceeds i32")));
    let mut buf = Vec::with_capacity(FLO_HEADER_LEN + 8 * h * wd);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&dim(wd)?.to_le_bytes());
    buf.extend_from_slice(&dim(h)?.to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        buf.extend_from_slice(&u.to_le_bytes());
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_flo<R: Read>(mut r: R) -> Result<FlowField<f32>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < FLO_HEADER_LEN {
        return Err(CgcvError::format(buf.len(), format!("header needs {FLO_HEADER_LEN} bytes, file has {}", buf.len())));
    }
    let word = |i: usize| <[u8; 4]>::try_from(&buf[i..i + 4]).expect("4 bytes");
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(CgcvError::format(0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width < 0 {
        return Err(CgcvError::format(4, format!("negative width {width}")));
    }
    if height < 0 {
        return Err(CgcvError::format(8, format!("negative height {height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(8)).ok_or_else(|| CgcvError::format(4, "dimensions overflow"))?;
    let payload = &buf[FLO_HEADER_LEN..];
    if payload.len() != expected {
        return Err(CgcvError::format(
            FLO_HEADER_LEN,
            format!("payload is {} bytes, {w}x{h} needs {expected}", payload.len()),
        ));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for px in payload.chunks_exact(8) {
        u.push(f32::from_le_bytes(px[..4].try_into().expect("4 bytes")));
        v.push(f32::from_le_bytes(px[4..].try_into().expect("4 bytes")));
    }
    FlowField::from_parts(h, w, u, v)
}
