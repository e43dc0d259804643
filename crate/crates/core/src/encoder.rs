//! Small strided convolution stacks that stand in for the matching and
//! context encoders. Both reduce the input grid by 8 in three stride-2 stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cgcv::ContextBundle;
use crate::error::{CgcvError, Result};
use crate::tensor::{FeatureMap, Real};

/// Side length every encoder input must be a multiple of.
pub const GRID: usize = 8;

/// RGB image with values in `[0, 1]`, stored interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(CgcvError::Dimension(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major `3 x H x W` copy.
    pub fn to_feature_map<T: Real>(&self) -> FeatureMap<T> {
        FeatureMap::from_fn(3, self.height, self.width, |c, y, x| {
            T::lit(self.data[(y * self.width + x) * 3 + c] as f64)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub reference: Image,
    pub target: Image,
}

impl ImagePair {
    pub fn new(reference: Image, target: Image) -> Result<Self> {
        if (reference.height, reference.width) != (target.height, target.width) {
            return Err(CgcvError::Dimension(format!(
                "frames differ in size: {}x{} vs {}x{}",
                reference.height, reference.width, target.height, target.width
            )));
        }
        Ok(Self { reference, target })
    }
}

/// Rows and columns appended by [`pad_to_grid`] (bottom and right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PadRecord {
    pub rows: usize,
    pub cols: usize,
}

impl PadRecord {
    pub fn is_empty(&self) -> bool {
        self.rows == 0 && self.cols == 0
    }
}

/// Replicate-pads the bottom and right edges up to the next multiple of 8.
pub fn pad_to_grid(img: &Image) -> (Image, PadRecord) {
    pad_to_multiple(img, GRID)
}

/// Replicate-pads the bottom and right edges up to the next multiple of `m`.
pub fn pad_to_multiple(img: &Image, m: usize) -> (Image, PadRecord) {
    let m = m.max(1);
    let up = |n: usize| n.max(1).div_ceil(m) * m;
    let (h, w) = (up(img.height), up(img.width));
    let record = PadRecord { rows: h - img.height, cols: w - img.width };
    if record.is_empty() {
        return (img.clone(), record);
    }
    if img.height == 0 || img.width == 0 {
        return (Image::from_fn(h, w, |_, _| [0.0; 3]), record);
    }
    let padded = Image::from_fn(h, w, |y, x| img.pixel(y.min(img.height - 1), x.min(img.width - 1)));
    (padded, record)
}

/// 2D convolution with square kernels, zero padding and a per-channel bias.
/// Weights are `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn he_uniform(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let bound = (6.0 / (in_channels * kernel * kernel).max(1) as f64).sqrt();
        for w in conv.weight.iter_mut() {
            *w = T::lit(rng.gen_range(-bound..bound));
        }
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel, self.stride, self.padding)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    #[inline]
    fn w_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Output positions `o` along one axis whose tap `k` lands inside `[0, n)`.
    fn valid_range(&self, k: usize, n: usize, out: usize) -> std::ops::Range<usize> {
        // input = o * stride + k - padding
        let lo = if k >= self.padding { 0 } else { (self.padding - k).div_ceil(self.stride) };
        let hi = if n + self.padding > k { (n + self.padding - k - 1) / self.stride + 1 } else { 0 };
        lo.min(out)..hi.min(out).max(lo.min(out))
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.channels() != self.in_channels {
            return Err(CgcvError::Dimension(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_size(h, w);
        let mut y = FeatureMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            let dst = y.channel_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = x.channel(i);
                for ky in 0..self.kernel {
                    let rows = self.valid_range(ky, h, oh);
                    for kx in 0..self.kernel {
                        let wv = self.weight[self.w_index(o, i, ky, kx)];
                        if wv == T::zero() {
                            continue;
                        }
                        let cols = self.valid_range(kx, w, ow);
                        for oy in rows.clone() {
                            let iy = oy * self.stride + ky - self.padding;
                            let srow = &src[iy * w..(iy + 1) * w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for ox in cols.clone() {
                                drow[ox] += wv * srow[ox * self.stride + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight and bias gradients into `grads`; returns the input gradient.
    pub fn backward(&self, x: &FeatureMap<T>, grad_y: &FeatureMap<T>, grads: &mut Self) -> FeatureMap<T> {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (grad_y.height(), grad_y.width());
        let mut gx = FeatureMap::zeros(self.in_channels, h, w);
        for o in 0..self.out_channels {
            let gy = grad_y.channel(o);
            grads.bias[o] += gy.iter().copied().sum::<T>();
            for i in 0..self.in_channels {
                let src = x.channel(i);
                for ky in 0..self.kernel {
                    let rows = self.valid_range(ky, h, oh);
                    for kx in 0..self.kernel {
                        let wi = self.w_index(o, i, ky, kx);
                        let wv = self.weight[wi];
                        let cols = self.valid_range(kx, w, ow);
                        let mut acc = T::zero();
                        let gsrc = gx.channel_mut(i);
                        for oy in rows.clone() {
                            let iy = oy * self.stride + ky - self.padding;
                            let grow = &gy[oy * ow..(oy + 1) * ow];
                            for ox in cols.clone() {
                                let ix = ox * self.stride + kx - self.padding;
                                acc += grow[ox] * src[iy * w + ix];
                                gsrc[iy * w + ix] += wv * grow[ox];
                            }
                        }
                        grads.weight[wi] += acc;
                    }
                }
            }
        }
        gx
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64_lossless())).collect();
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            weight: c(&self.weight),
            bias: c(&self.bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output channels of the three stride-2 stages; the last is the
    /// encoder's output width.
    pub widths: [usize; 3],
    pub kernel: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn matching(out_channels: usize, seed: u64) -> Self {
        Self { widths: [32, 64, out_channels], kernel: 3, seed }
    }

    pub fn context(out_channels: usize, seed: u64) -> Self {
        Self { widths: [32, 64, out_channels], kernel: 3, seed }
    }

    pub fn out_channels(&self) -> usize {
        self.widths[2]
    }
}

/// Convolution stack with ReLU between layers and a linear final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder<T> {
    pub layers: Vec<Conv2d<T>>,
}

/// Per-layer inputs and pre-activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct EncoderTape<T> {
    inputs: Vec<FeatureMap<T>>,
    pre: Vec<FeatureMap<T>>,
}

impl<T: Real> EncoderTape<T> {
    /// Sign pattern of every rectified pre-activation.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flat_map(|m| m.data().iter().map(|&v| v > T::zero()))
    }
}

impl<T: Real> ConvEncoder<T> {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        if cfg.widths.contains(&0) || cfg.kernel == 0 {
            return Err(CgcvError::Config(format!("degenerate encoder config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pad = cfg.kernel / 2;
        let mut in_c = 3;
        let mut layers = Vec::with_capacity(3);
        for &out_c in &cfg.widths {
            layers.push(Conv2d::he_uniform(in_c, out_c, cfg.kernel, 2, pad, &mut rng));
            in_c = out_c;
        }
        Ok(Self { layers })
    }

    /// Builds an encoder from explicit layers; their strides must multiply to 8.
    pub fn from_layers(layers: Vec<Conv2d<T>>) -> Result<Self> {
        let total: usize = layers.iter().map(|l| l.stride).product();
        if layers.is_empty() || total != GRID {
            return Err(CgcvError::Config(format!("encoder strides multiply to {total}, need {GRID}")));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(CgcvError::Config("encoder layer widths do not chain".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Conv2d::zeros_like).collect() }
    }

    pub fn cast<U: Real>(&self) -> ConvEncoder<U> {
        ConvEncoder { layers: self.layers.iter().map(Conv2d::cast).collect() }
    }

    pub fn forward_with_tape(&self, img: &FeatureMap<T>) -> Result<(FeatureMap<T>, EncoderTape<T>)> {
        if !img.height().is_multiple_of(GRID) || !img.width().is_multiple_of(GRID) || img.height() == 0 || img.width() == 0 {
            return Err(CgcvError::Dimension(format!(
                "encoder input {}x{} is not a positive multiple of {GRID}",
                img.height(),
                img.width()
            )));
        }
        let mut tape = EncoderTape { inputs: Vec::new(), pre: Vec::new() };
        let mut x = img.clone();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&x)?;
            let out = if li < last { pre.map(|v| v.max(T::zero())) } else { pre.clone() };
            tape.inputs.push(std::mem::replace(&mut x, out));
            tape.pre.push(pre);
        }
        let (eh, ew) = (img.height() / GRID, img.width() / GRID);
        if (x.height(), x.width()) != (eh, ew) {
            return Err(CgcvError::Dimension(format!(
                "encoder produced {}x{}, expected {eh}x{ew}",
                x.height(),
                x.width()
            )));
        }
        Ok((x, tape))
    }

    pub fn forward(&self, img: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_with_tape(img)?.0)
    }

    /// Accumulates parameter gradients into `grads`; returns the image gradient.
    pub fn backward(&self, tape: &EncoderTape<T>, grad_out: &FeatureMap<T>, grads: &mut Self) -> FeatureMap<T> {
        let mut g = grad_out.clone();
        let last = self.layers.len() - 1;
        for li in (0..self.layers.len()).rev() {
            if li < last {
                for (gv, &p) in g.data_mut().iter_mut().zip(tape.pre[li].data()) {
                    if p <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            g = self.layers[li].backward(&tape.inputs[li], &g, &mut grads.layers[li]);
        }
        g
    }
}

/// Matching features `g(I)` at 1/8 resolution.
pub fn encode_matching<T: Real>(img: &FeatureMap<T>, enc: &ConvEncoder<T>) -> Result<FeatureMap<T>> {
    enc.forward(img)
}

/// Runs the shared context encoder on both frames and splits each output
/// into `net` (first half of the channels) and `inp`.
pub fn encode_context<T: Real>(
    reference: &FeatureMap<T>,
    target: &FeatureMap<T>,
    enc: &ConvEncoder<T>,
) -> Result<ContextBundle<T>> {
    if !enc.out_channels().is_multiple_of(2) {
        return Err(CgcvError::Config(format!(
            "context encoder width {} cannot be split into net/inp",
            enc.out_channels()
        )));
    }
    let c1 = enc.forward(reference)?;
    let c2 = enc.forward(target)?;
    ContextBundle::from_encoded(&c1, &c2)
}
