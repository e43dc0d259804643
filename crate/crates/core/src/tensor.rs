//! Dense containers and the primitive numeric kernels the rest of the crate
//! composes: per-pixel feature maps, 4D correlation volumes, and the
//! element-wise / plane-wise maps applied to them.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{CgcvError, Result};

/// Floating point mode a computation runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Scalar type accepted by every kernel in the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn lit(v: f64) -> Self;

    fn to_f64_lossless(self) -> f64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    fn lit(v: f64) -> Self {
        v
    }

    fn to_f64_lossless(self) -> f64 {
        self
    }
}

/// Numerical tolerances shared by tests, the gradient checker and the CLI.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Relative agreement with a double precision oracle, single mode.
    pub single_rel: f64,
    /// Relative agreement with a double precision oracle, double mode.
    pub double_rel: f64,
    /// Allowed deviation of a softmax plane sum from one.
    pub softmax_sum: f64,
    /// Central difference step.
    pub fd_step: f64,
    /// Gradient check: maximum relative error.
    pub grad_rel: f64,
    /// Gradient check: maximum absolute error for near-zero gradients.
    pub grad_abs: f64,
    /// Gradient check: analytic magnitude below which `grad_abs` applies.
    pub grad_tiny: f64,
}

pub const TOLERANCES: Tolerances = Tolerances {
    single_rel: 1e-5,
    double_rel: 1e-12,
    softmax_sum: 1e-5,
    fd_step: 1e-5,
    grad_rel: 1e-4,
    grad_abs: 1e-7,
    grad_tiny: 1e-6,
};

impl Tolerances {
    pub fn relative(&self, precision: Precision) -> f64 {
        match precision {
            Precision::Single => self.single_rel,
            Precision::Double => self.double_rel,
        }
    }
}

/// Channel-major `C x H x W` feature tensor.
#[derive(Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for FeatureMap<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureMap")
            .field("channels", &self.channels)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(CgcvError::Dimension(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of grid cells, `height * width`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Returns the data transposed to pixel-major `[pixel][channel]` order.
    pub fn pixel_major(&self) -> Vec<T> {
        let n = self.pixels();
        let mut out = vec![T::zero(); self.data.len()];
        for c in 0..self.channels {
            let src = self.channel(c);
            for (p, &v) in src.iter().enumerate() {
                out[p * self.channels + c] = v;
            }
        }
        debug_assert_eq!(out.len(), n * self.channels);
        out
    }

    /// Splits off the first `at` channels; the remainder forms the second map.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        if at > self.channels {
            return Err(CgcvError::Dimension(format!(
                "cannot split {} channels at {at}",
                self.channels
            )));
        }
        let n = self.pixels();
        let head = Self {
            channels: at,
            height: self.height,
            width: self.width,
            data: self.data[..at * n].to_vec(),
        };
        let tail = Self {
            channels: self.channels - at,
            height: self.height,
            width: self.width,
            data: self.data[at * n..].to_vec(),
        };
        Ok((head, tail))
    }

    /// Stacks maps along the channel axis.
    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| CgcvError::Dimension("concat of zero feature maps".into()))?;
        let (height, width) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != height || p.width != width {
                return Err(CgcvError::Dimension(format!(
                    "concat grid mismatch: {}x{} vs {height}x{width}",
                    p.height, p.width
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len(), "feature map shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossless())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Dense 4D correlation tensor. Storage is `[y1][x1][y2][x2]`: every
/// reference cell owns one contiguous `h2 x w2` plane over the target grid.
#[derive(Clone, PartialEq)]
pub struct CorrVolume4<T> {
    h1: usize,
    w1: usize,
    h2: usize,
    w2: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for CorrVolume4<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorrVolume4")
            .field("dims", &[self.h1, self.w1, self.h2, self.w2])
            .finish_non_exhaustive()
    }
}

impl<T: Real> CorrVolume4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let [h1, w1, h2, w2] = dims;
        if data.len() != h1 * w1 * h2 * w2 {
            return Err(CgcvError::Dimension(format!(
                "volume {dims:?} needs {} values, got {}",
                h1 * w1 * h2 * w2,
                data.len()
            )));
        }
        Ok(Self { h1, w1, h2, w2, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        let [h1, w1, h2, w2] = dims;
        Self { h1, w1, h2, w2, data: vec![T::zero(); h1 * w1 * h2 * w2] }
    }

    pub fn filled(dims: [usize; 4], v: T) -> Self {
        let [h1, w1, h2, w2] = dims;
        Self { h1, w1, h2, w2, data: vec![v; h1 * w1 * h2 * w2] }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [h1, w1, h2, w2] = dims;
        let mut data = Vec::with_capacity(h1 * w1 * h2 * w2);
        for y1 in 0..h1 {
            for x1 in 0..w1 {
                for y2 in 0..h2 {
                    for x2 in 0..w2 {
                        data.push(f(y1, x1, y2, x2));
                    }
                }
            }
        }
        Self { h1, w1, h2, w2, data }
    }

    /// `[h1, w1, h2, w2]`.
    pub fn dims(&self) -> [usize; 4] {
        [self.h1, self.w1, self.h2, self.w2]
    }

    pub fn plane_len(&self) -> usize {
        self.h2 * self.w2
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, y1: usize, x1: usize, y2: usize, x2: usize) -> usize {
        ((y1 * self.w1 + x1) * self.h2 + y2) * self.w2 + x2
    }

    #[inline]
    pub fn get(&self, y1: usize, x1: usize, y2: usize, x2: usize) -> T {
        self.data[self.offset(y1, x1, y2, x2)]
    }

    #[inline]
    pub fn set(&mut self, y1: usize, x1: usize, y2: usize, x2: usize, v: T) {
        let o = self.offset(y1, x1, y2, x2);
        self.data[o] = v;
    }

    /// The target-grid plane belonging to reference cell `(y1, x1)`.
    pub fn plane(&self, y1: usize, x1: usize) -> &[T] {
        let n = self.plane_len();
        let start = (y1 * self.w1 + x1) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, y1: usize, x1: usize) -> &mut [T] {
        let n = self.plane_len();
        let start = (y1 * self.w1 + x1) * n;
        &mut self.data[start..start + n]
    }

    pub fn planes(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.plane_len().max(1))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_dims(other)?;
        Ok(self.with_data(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(CgcvError::Dimension(format!(
                "volume dims differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    fn with_data(&self, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { h1: self.h1, w1: self.w1, h2: self.h2, w2: self.w2, data }
    }

    pub fn cast<U: Real>(&self) -> CorrVolume4<U> {
        CorrVolume4 {
            h1: self.h1,
            w1: self.w1,
            h2: self.h2,
            w2: self.w2,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossless())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over every entry, accumulated in double precision.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.to_f64_lossless()).sum::<f64>() / self.data.len() as f64
    }
}

/// Scaled inner product between the feature vector of reference cell `a_cell`
/// and target cell `b_cell` (both `(row, col)`), summed in ascending channel order.
pub fn inner_product<T: Real>(
    a: &FeatureMap<T>,
    b: &FeatureMap<T>,
    a_cell: (usize, usize),
    b_cell: (usize, usize),
    scale: T,
) -> Result<T> {
    if a.channels != b.channels {
        return Err(CgcvError::Dimension(format!(
            "inner product over {} vs {} channels",
            a.channels, b.channels
        )));
    }
    let (ay, ax) = a_cell;
    let (by, bx) = b_cell;
    if ay >= a.height || ax >= a.width || by >= b.height || bx >= b.width {
        return Err(CgcvError::Contract(format!(
            "cell out of range: a{:?} in {}x{}, b{:?} in {}x{}",
            a_cell, a.height, a.width, b_cell, b.height, b.width
        )));
    }
    let mut acc = T::zero();
    for c in 0..a.channels {
        acc += a.get(c, ay, ax) * b.get(c, by, bx);
    }
    Ok(scale * acc)
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn map_sigmoid<T: Real>(v: &CorrVolume4<T>) -> CorrVolume4<T> {
    v.map(sigmoid)
}

/// Softmax over the target plane of every reference cell.
pub fn map_softmax_lastdims<T: Real>(v: &CorrVolume4<T>) -> CorrVolume4<T> {
    let mut out = v.clone();
    let n = v.plane_len();
    if n == 0 {
        return out;
    }
    for plane in out.data.chunks_exact_mut(n) {
        softmax_in_place(plane);
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(plane: &mut [T]) {
    let max = plane.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in plane.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in plane.iter_mut() {
        *x = *x / sum;
    }
}

/// Halves the target grid by averaging 2x2 blocks of every plane.
pub fn avg_pool_target<T: Real>(v: &CorrVolume4<T>) -> Result<CorrVolume4<T>> {
    let [h1, w1, h2, w2] = v.dims();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(CgcvError::Dimension(format!(
            "target plane {h2}x{w2} cannot be pooled by 2"
        )));
    }
    let (ph, pw) = (h2 / 2, w2 / 2);
    let quarter = T::lit(0.25);
    let mut out = CorrVolume4::zeros([h1, w1, ph, pw]);
    if h2 == 0 || w2 == 0 {
        return Ok(out);
    }
    for (src, dst) in v.data.chunks_exact(h2 * w2).zip(out.data.chunks_exact_mut(ph * pw)) {
        for y in 0..ph {
            let r0 = &src[(2 * y) * w2..(2 * y + 1) * w2];
            let r1 = &src[(2 * y + 1) * w2..(2 * y + 2) * w2];
            for x in 0..pw {
                dst[y * pw + x] =
                    (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool_target`]: spreads each pooled gradient over its block.
pub fn avg_pool_target_backward<T: Real>(
    grad_pooled: &CorrVolume4<T>,
    grad_src: &mut CorrVolume4<T>,
) {
    let [_, _, h2, w2] = grad_src.dims();
    let [_, _, ph, pw] = grad_pooled.dims();
    debug_assert!(ph * 2 == h2 && pw * 2 == w2);
    if ph == 0 || pw == 0 {
        return;
    }
    let quarter = T::lit(0.25);
    for (g, dst) in grad_pooled.data.chunks_exact(ph * pw).zip(grad_src.data.chunks_exact_mut(h2 * w2)) {
        for y in 0..ph {
            for x in 0..pw {
                let q = g[y * pw + x] * quarter;
                dst[(2 * y) * w2 + 2 * x] += q;
                dst[(2 * y) * w2 + 2 * x + 1] += q;
                dst[(2 * y + 1) * w2 + 2 * x] += q;
                dst[(2 * y + 1) * w2 + 2 * x + 1] += q;
            }
        }
    }
}

/// The four bilinear taps of `(x, y)` on an `height x width` grid.
///
/// Each tap is `(flat index, weight)`; taps that fall outside the grid carry
/// `None` and read as zero.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTaps<T> {
    pub taps: [(Option<usize>, T); 4],
    /// Fractional offsets inside the cell, used for coordinate gradients.
    pub fx: T,
    pub fy: T,
}

impl<T: Real> BilinearTaps<T> {
    pub fn new(height: usize, width: usize, x: T, y: T) -> Self {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let one = T::one();
        let idx = |xx: T, yy: T| -> Option<usize> {
            if xx < T::zero() || yy < T::zero() {
                return None;
            }
            let (xi, yi) = (xx.to_usize()?, yy.to_usize()?);
            (xi < width && yi < height).then_some(yi * width + xi)
        };
        let taps = [
            (idx(x0, y0), (one - fx) * (one - fy)),
            (idx(x0 + one, y0), fx * (one - fy)),
            (idx(x0, y0 + one), (one - fx) * fy),
            (idx(x0 + one, y0 + one), fx * fy),
        ];
        Self { taps, fx, fy }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for &(i, w) in &self.taps {
            if let Some(i) = i {
                acc += w * plane[i];
            }
        }
        acc
    }

    /// Partial derivatives of the sampled value with respect to `x` and `y`.
    pub fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let at = |k: usize| self.taps[k].0.map_or(T::zero(), |i| plane[i]);
        let (v00, v10, v01, v11) = (at(0), at(1), at(2), at(3));
        let one = T::one();
        let dx = (one - self.fy) * (v10 - v00) + self.fy * (v11 - v01);
        let dy = (one - self.fx) * (v01 - v00) + self.fx * (v11 - v10);
        (dx, dy)
    }

    /// Adds `grad * weight` into the plane positions this sample read.
    #[inline]
    pub fn scatter(&self, plane_grad: &mut [T], grad: T) {
        for &(i, w) in &self.taps {
            if let Some(i) = i {
                plane_grad[i] += w * grad;
            }
        }
    }

    /// Identifies the grid cell the sample falls in; used to detect when a
    /// perturbation moves a sample across a cell boundary.
    pub fn cell_key(&self) -> Option<usize> {
        self.taps[0].0
    }
}

/// Bilinear interpolation of a row-major `height x width` plane at column `x`
/// and row `y`. Points outside the grid read as zero.
pub fn bilinear_sample_plane<T: Real>(plane: &[T], height: usize, width: usize, x: T, y: T) -> T {
    debug_assert_eq!(plane.len(), height * width);
    BilinearTaps::new(height, width, x, y).sample(plane)
}
