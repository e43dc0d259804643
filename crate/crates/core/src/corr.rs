//! All-pairs correlation, the pooled correlation pyramid, and windowed
//! bilinear lookup around the current flow estimate.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::counters::{self, Kernel};
use crate::error::{CgcvError, Result};
use crate::flow::FlowField;
use crate::tensor::{avg_pool_target, avg_pool_target_backward, BilinearTaps, CorrVolume4, FeatureMap, Real};

pub const DEFAULT_RADIUS: usize = 4;
pub const DEFAULT_LEVELS: usize = 4;

/// `out[p, q] = scale * <a[:, p], b[:, q]>` for every reference cell `p` and
/// target cell `q`. Sums run in ascending channel order, so the result does
/// not depend on how planes are scheduled across threads.
pub(crate) fn all_pairs_scaled<T: Real>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
    scale: T,
) -> Result<CorrVolume4<T>> {
    if a.channels() != b.channels() {
        return Err(CgcvError::Dimension(format!(
            "all-pairs correlation over {} vs {} channels",
            a.channels(),
            b.channels()
        )));
    }
    counters::bump(Kernel::AllPairs);
    let n = a.channels();
    let dims = [a.height(), a.width(), b.height(), b.width()];
    let mut out = CorrVolume4::zeros(dims);
    let plane_len = b.pixels();
    if plane_len == 0 || a.pixels() == 0 {
        return Ok(out);
    }
    let ap = a.pixel_major();
    let bp = b.pixel_major();
    out.data_mut()
        .par_chunks_mut(plane_len)
        .enumerate()
        .for_each(|(p, plane)| {
            let av = &ap[p * n..(p + 1) * n];
            for (q, dst) in plane.iter_mut().enumerate() {
                let bv = &bp[q * n..(q + 1) * n];
                let mut acc = T::zero();
                for c in 0..n {
                    acc += av[c] * bv[c];
                }
                *dst = scale * acc;
            }
        });
    Ok(out)
}

/// Adjoint of [`all_pairs_scaled`]: gradients for both feature maps.
pub(crate) fn all_pairs_backward<T: Real>(
    grad: &CorrVolume4<T>,
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
    scale: T,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let n = a.channels();
    let (np, nq) = (a.pixels(), b.pixels());
    let ap = a.pixel_major();
    let bp = b.pixel_major();
    let mut ga = vec![T::zero(); np * n];
    let mut gb = vec![T::zero(); nq * n];
    for p in 0..np {
        let plane = grad.plane(p / a.width(), p % a.width());
        let av = &ap[p * n..(p + 1) * n];
        let gav = &mut ga[p * n..(p + 1) * n];
        for (q, &g) in plane.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let g = g * scale;
            let bv = &bp[q * n..(q + 1) * n];
            let gbv = &mut gb[q * n..(q + 1) * n];
            for c in 0..n {
                gav[c] += g * bv[c];
                gbv[c] += g * av[c];
            }
        }
    }
    let to_map =
        |pm: Vec<T>, h: usize, w: usize| FeatureMap::from_fn(n, h, w, |c, y, x| pm[(y * w + x) * n + c]);
    (to_map(ga, a.height(), a.width()), to_map(gb, b.height(), b.width()))
}

/// Correlation volume of two matching feature maps, scaled by `1/sqrt(n)`.
pub fn build_all_pairs<T: Real>(g1: &FeatureMap<T>, g2: &FeatureMap<T>) -> Result<CorrVolume4<T>> {
    let scale = T::one() / T::lit(g1.channels().max(1) as f64).sqrt();
    all_pairs_scaled(g1, g2, scale)
}

/// Multi-scale stack: level `t` pools the target grid of level 0 by `2^t`.
#[derive(Debug, Clone)]
pub struct CorrPyramid<T> {
    levels: Vec<CorrVolume4<T>>,
}

impl<T: Real> CorrPyramid<T> {
    pub fn levels(&self) -> &[CorrVolume4<T>] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Reference grid `(rows, cols)`, shared by all levels.
    pub fn reference_dims(&self) -> (usize, usize) {
        let [h1, w1, _, _] = self.levels[0].dims();
        (h1, w1)
    }

    /// Folds per-level gradients back onto level 0.
    pub fn backward(&self, mut level_grads: Vec<CorrVolume4<T>>) -> CorrVolume4<T> {
        assert_eq!(level_grads.len(), self.levels.len());
        while level_grads.len() > 1 {
            let coarse = level_grads.pop().expect("non-empty");
            let finer = level_grads.last_mut().expect("non-empty");
            avg_pool_target_backward(&coarse, finer);
        }
        level_grads.pop().expect("pyramid has a level")
    }

    pub fn zero_grads(&self) -> Vec<CorrVolume4<T>> {
        self.levels.iter().map(|l| CorrVolume4::zeros(l.dims())).collect()
    }
}

pub fn build_pyramid<T: Real>(v: CorrVolume4<T>, num_levels: usize) -> Result<CorrPyramid<T>> {
    if num_levels == 0 {
        return Err(CgcvError::Dimension("pyramid needs at least one level".into()));
    }
    let [_, _, h2, w2] = v.dims();
    let div = 1usize << (num_levels - 1);
    if h2 % div != 0 || w2 % div != 0 {
        return Err(CgcvError::Dimension(format!(
            "target grid {h2}x{w2} is not divisible by {div} for {num_levels} levels"
        )));
    }
    let mut levels = Vec::with_capacity(num_levels);
    levels.push(v);
    for _ in 1..num_levels {
        let next = avg_pool_target(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(CorrPyramid { levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LookupConfig {
    /// Window half-width in cells, per level.
    pub radius: usize,
    pub num_levels: usize,
}

impl Default for LookupConfig {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, num_levels: DEFAULT_LEVELS }
    }
}

impl LookupConfig {
    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Channels produced per reference cell.
    pub fn feature_len(&self) -> usize {
        self.num_levels * self.window() * self.window()
    }
}

/// Sampled correlation windows, one channel per (level, dy, dx).
///
/// Channel `t * (2r+1)^2 + (dy + r) * (2r+1) + (dx + r)`: levels ascending,
/// offsets row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrFeatures<T> {
    cfg: LookupConfig,
    map: FeatureMap<T>,
}

impl<T: Real> CorrFeatures<T> {
    pub fn config(&self) -> LookupConfig {
        self.cfg
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn len(&self) -> usize {
        self.map.channels()
    }

    pub fn is_empty(&self) -> bool {
        self.map.data().is_empty()
    }

    /// Value of feature `channel` at reference cell `(y, x)`.
    pub fn get(&self, y: usize, x: usize, channel: usize) -> T {
        self.map.get(channel, y, x)
    }

    pub fn as_feature_map(&self) -> &FeatureMap<T> {
        &self.map
    }

    pub fn into_feature_map(self) -> FeatureMap<T> {
        self.map
    }
}

fn check_lookup<T: Real>(p: &CorrPyramid<T>, flow: &FlowField<T>, cfg: &LookupConfig) -> Result<()> {
    let (h1, w1) = p.reference_dims();
    if (flow.height(), flow.width()) != (h1, w1) {
        return Err(CgcvError::Dimension(format!(
            "flow {}x{} does not match reference grid {h1}x{w1}",
            flow.height(),
            flow.width()
        )));
    }
    if cfg.num_levels != p.num_levels() {
        return Err(CgcvError::Dimension(format!(
            "lookup wants {} levels, pyramid has {}",
            cfg.num_levels,
            p.num_levels()
        )));
    }
    Ok(())
}

/// Visits every bilinear sample of a lookup in channel order.
fn for_each_sample<T: Real>(
    p: &CorrPyramid<T>,
    flow: &FlowField<T>,
    cfg: &LookupConfig,
    mut f: impl FnMut(usize, usize, usize, usize, &BilinearTaps<T>),
) {
    let (h1, w1) = p.reference_dims();
    let r = cfg.radius as isize;
    let win = cfg.window();
    for (t, level) in p.levels.iter().enumerate() {
        let [_, _, h2, w2] = level.dims();
        let inv = T::one() / T::lit((1u64 << t) as f64);
        for y in 0..h1 {
            for x in 0..w1 {
                let (u, v) = flow.get(y, x);
                let cx = (T::lit(x as f64) + u) * inv;
                let cy = (T::lit(y as f64) + v) * inv;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let taps = BilinearTaps::new(
                            h2,
                            w2,
                            cx + T::lit(dx as f64),
                            cy + T::lit(dy as f64),
                        );
                        let ch = t * win * win + (dy + r) as usize * win + (dx + r) as usize;
                        f(t, y, x, ch, &taps);
                    }
                }
            }
        }
    }
}

/// Samples a `(2r+1)^2` window per level around each flow-displaced cell.
pub fn lookup<T: Real>(
    p: &CorrPyramid<T>,
    flow: &FlowField<T>,
    cfg: &LookupConfig,
) -> Result<CorrFeatures<T>> {
    check_lookup(p, flow, cfg)?;
    let (h1, w1) = p.reference_dims();
    let mut map = FeatureMap::zeros(cfg.feature_len(), h1, w1);
    for_each_sample(p, flow, cfg, |t, y, x, ch, taps| {
        let value = taps.sample(p.levels[t].plane(y, x));
        map.set(ch, y, x, value);
    });
    Ok(CorrFeatures { cfg: *cfg, map })
}

/// Reverse pass of [`lookup`]. Adds volume gradients into `level_grads` and
/// returns the gradient with respect to the flow.
pub fn lookup_backward<T: Real>(
    p: &CorrPyramid<T>,
    flow: &FlowField<T>,
    cfg: &LookupConfig,
    grad: &FeatureMap<T>,
    level_grads: &mut [CorrVolume4<T>],
) -> Result<FlowField<T>> {
    check_lookup(p, flow, cfg)?;
    let (h1, w1) = p.reference_dims();
    if grad.channels() != cfg.feature_len() || grad.height() != h1 || grad.width() != w1 {
        return Err(CgcvError::Dimension("lookup gradient shape mismatch".into()));
    }
    let mut gflow = FlowField::zeros(h1, w1);
    for_each_sample(p, flow, cfg, |t, y, x, ch, taps| {
        let g = grad.get(ch, y, x);
        if g == T::zero() {
            return;
        }
        taps.scatter(level_grads[t].plane_mut(y, x), g);
        let (gx, gy) = taps.coord_grad(p.levels[t].plane(y, x));
        let inv = T::one() / T::lit((1u64 << t) as f64);
        let i = y * w1 + x;
        gflow.u_mut()[i] += g * gx * inv;
        gflow.v_mut()[i] += g * gy * inv;
    });
    Ok(gflow)
}

/// Bilinear cell of every lookup sample, in channel order. Two flows with the
/// same keys read the same interpolation cells.
pub fn lookup_cells<T: Real>(p: &CorrPyramid<T>, flow: &FlowField<T>, cfg: &LookupConfig) -> Vec<i64> {
    let mut keys = Vec::new();
    for_each_sample(p, flow, cfg, |_, _, _, _, taps| {
        keys.push(taps.cell_key().map_or(-1, |k| k as i64));
    });
    keys
}

/// Target cell `(row, col)` with the largest value in the plane of reference
/// cell `(y1, x1)`; ties resolve to the smallest flat index.
pub fn argmax_plane<T: Real>(v: &CorrVolume4<T>, y1: usize, x1: usize) -> Result<(usize, usize)> {
    let [h1, w1, _, w2] = v.dims();
    if y1 >= h1 || x1 >= w1 {
        return Err(CgcvError::Index(format!("query ({y1}, {x1}) outside {h1}x{w1}")));
    }
    let plane = v.plane(y1, x1);
    let mut best = 0;
    for (i, &val) in plane.iter().enumerate().skip(1) {
        if val > plane[best] {
            best = i;
        }
    }
    Ok((best / w2.max(1), best % w2.max(1)))
}

pub const VOLUME_MAGIC: &[u8; 4] = b"CGCV";
pub const VOLUME_VERSION: u32 = 1;

/// Serializes a volume: magic, version, four dims, then f32 LE in storage order.
pub fn write_volume<T: Real, W: Write>(v: &CorrVolume4<T>, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + v.data().len() * 4);
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for d in v.dims() {
        let d = u32::try_from(d)
            .map_err(|_| CgcvError::Dimension(format!("volume dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for x in v.data() {
        buf.extend_from_slice(&(x.to_f64_lossless() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_volume<R: Read>(mut r: R) -> Result<CorrVolume4<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 24 {
        return Err(CgcvError::format(bytes.len(), "volume header needs 24 bytes"));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(CgcvError::format(0, "bad volume magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VOLUME_VERSION {
        return Err(CgcvError::format(4, format!("unsupported volume version {version}")));
    }
    let dims = [word(8) as usize, word(12) as usize, word(16) as usize, word(20) as usize];
    let count = dims.iter().product::<usize>();
    let expected = 24 + count * 4;
    if bytes.len() != expected {
        return Err(CgcvError::format(
            bytes.len().min(expected),
            format!("volume payload: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    CorrVolume4::new(dims, data)
}
