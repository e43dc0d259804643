//! Context guided correlation volume.
//!
//! The raw volume `C` of the matching features is gated element-wise by a
//! cross-frame attention map computed from the context "net" features of both
//! frames, then lifted by a scalar-weighted context correlation:
//!
//! ```text
//! Q = Wq net1,  K = Wk net2
//! A = sigma(<Q, K> / sqrt(d))
//! M = A * C
//! S = <net1, net2> / sqrt(t)
//! V = M + lambda * S
//! ```
//!
//! `sigma` is a sigmoid by default. The softmax variant and the two switches
//! that drop the gate or the lift exist to run ablations from one binary.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corr::{all_pairs_backward, all_pairs_scaled, build_all_pairs};
use crate::counters::{self, Kernel};
use crate::error::{CgcvError, Result};
use crate::tensor::{map_sigmoid, map_softmax_lastdims, CorrVolume4, FeatureMap, Real};

pub const DEFAULT_QK_DIM: usize = 128;
pub const DEFAULT_NET_DIM: usize = 128;

/// Context features of both frames, split channel-wise into `net` and `inp`.
///
/// `inp2` is produced by the shared encoder but nothing downstream reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBundle<T> {
    pub net1: FeatureMap<T>,
    pub inp1: FeatureMap<T>,
    pub net2: FeatureMap<T>,
    pub inp2: FeatureMap<T>,
}

impl<T: Real> ContextBundle<T> {
    pub fn new(
        net1: FeatureMap<T>,
        inp1: FeatureMap<T>,
        net2: FeatureMap<T>,
        inp2: FeatureMap<T>,
    ) -> Result<Self> {
        let t = net1.channels();
        if inp1.channels() != t || net2.channels() != t || inp2.channels() != t {
            return Err(CgcvError::Dimension(format!(
                "context halves must share a channel count: net1 {t}, inp1 {}, net2 {}, inp2 {}",
                inp1.channels(),
                net2.channels(),
                inp2.channels()
            )));
        }
        if !net1.same_grid(&inp1) || !net1.same_grid(&net2) || !net1.same_grid(&inp2) {
            return Err(CgcvError::Dimension("context maps must share a grid".into()));
        }
        Ok(Self { net1, inp1, net2, inp2 })
    }

    /// Splits two `2t`-channel encoder outputs into net (first half) and inp.
    pub fn from_encoded(c1: &FeatureMap<T>, c2: &FeatureMap<T>) -> Result<Self> {
        if !c1.channels().is_multiple_of(2) || c1.channels() != c2.channels() {
            return Err(CgcvError::Config(format!(
                "context encoder output must have an even, shared channel count (got {} and {})",
                c1.channels(),
                c2.channels()
            )));
        }
        let t = c1.channels() / 2;
        let (net1, inp1) = c1.split_channels(t)?;
        let (net2, inp2) = c2.split_channels(t)?;
        Self::new(net1, inp1, net2, inp2)
    }

    /// Channel count `t` of each half.
    pub fn half_channels(&self) -> usize {
        self.net1.channels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Sigmoid,
    Softmax,
    /// No attention; the raw correlation volume passes through.
    None,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Sigmoid => "sigmoid",
            GateMode::Softmax => "softmax",
            GateMode::None => "none",
        })
    }
}

impl FromStr for GateMode {
    type Err = CgcvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(GateMode::Sigmoid),
            "softmax" => Ok(GateMode::Softmax),
            "none" | "off" => Ok(GateMode::None),
            other => Err(CgcvError::Config(format!("unknown gate mode {other:?}"))),
        }
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossless())).collect(),
        }
    }
}

/// Learned parameters of the gate and lift, plus the ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    /// `d x t`.
    pub wq: Matrix<T>,
    /// `d x t`.
    pub wk: Matrix<T>,
    pub lambda: T,
    pub gate_mode: GateMode,
    pub lift_enabled: bool,
}

impl<T: Real> GateParams<T> {
    /// Projections uniform in `[-1/sqrt(t), 1/sqrt(t)]`, `lambda = 0`.
    pub fn init(d: usize, t: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (t.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect()
        };
        let wq = Matrix { rows: d, cols: t, data: draw(d * t) };
        let wk = Matrix { rows: d, cols: t, data: draw(d * t) };
        Self { wq, wk, lambda: T::zero(), gate_mode: GateMode::Sigmoid, lift_enabled: true }
    }

    pub fn qk_dim(&self) -> usize {
        self.wq.rows
    }

    pub fn cast<U: Real>(&self) -> GateParams<U> {
        GateParams {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            lambda: U::lit(self.lambda.to_f64_lossless()),
            gate_mode: self.gate_mode,
            lift_enabled: self.lift_enabled,
        }
    }
}

/// Query and key maps, `d` channels each.
#[derive(Debug, Clone, PartialEq)]
pub struct QKMaps<T> {
    pub q: FeatureMap<T>,
    pub k: FeatureMap<T>,
}

fn apply_linear<T: Real>(w: &Matrix<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
    let n = x.pixels();
    let mut out = FeatureMap::zeros(w.rows, x.height(), x.width());
    for o in 0..w.rows {
        let dst = out.channel_mut(o);
        for c in 0..w.cols {
            let wv = w.get(o, c);
            if wv == T::zero() {
                continue;
            }
            let src = x.channel(c);
            for p in 0..n {
                dst[p] += wv * src[p];
            }
        }
    }
    out
}

/// `grad_w += grad_y x^T`, returns `w^T grad_y`.
fn apply_linear_backward<T: Real>(
    w: &Matrix<T>,
    x: &FeatureMap<T>,
    grad_y: &FeatureMap<T>,
    grad_w: &mut Matrix<T>,
) -> FeatureMap<T> {
    let n = x.pixels();
    let mut gx = FeatureMap::zeros(w.cols, x.height(), x.width());
    for o in 0..w.rows {
        let gy = grad_y.channel(o);
        for c in 0..w.cols {
            let src = x.channel(c);
            let mut acc = T::zero();
            for p in 0..n {
                acc += gy[p] * src[p];
            }
            grad_w.data[o * w.cols + c] += acc;
            let wv = w.get(o, c);
            let dst = gx.channel_mut(c);
            for p in 0..n {
                dst[p] += wv * gy[p];
            }
        }
    }
    gx
}

/// Per-pixel linear projections of the two net maps (no bias).
pub fn project_qk<T: Real>(ctx: &ContextBundle<T>, p: &GateParams<T>) -> Result<QKMaps<T>> {
    let t = ctx.half_channels();
    if p.wq.cols != t || p.wk.cols != t || p.wq.rows != p.wk.rows {
        return Err(CgcvError::Dimension(format!(
            "projections {}x{} / {}x{} do not fit {t} net channels",
            p.wq.rows, p.wq.cols, p.wk.rows, p.wk.cols
        )));
    }
    counters::bump(Kernel::ProjectQk);
    Ok(QKMaps { q: apply_linear(&p.wq, &ctx.net1), k: apply_linear(&p.wk, &ctx.net2) })
}

fn attention_logits<T: Real>(qk: &QKMaps<T>) -> Result<CorrVolume4<T>> {
    let d = qk.q.channels();
    if qk.k.channels() != d {
        return Err(CgcvError::Dimension(format!(
            "query has {d} channels, key has {}",
            qk.k.channels()
        )));
    }
    all_pairs_scaled(&qk.q, &qk.k, T::one() / T::lit(d.max(1) as f64).sqrt())
}

/// Cross-frame attention `sigma(<q, k> / sqrt(d))`.
pub fn cross_attention<T: Real>(qk: &QKMaps<T>, mode: GateMode) -> Result<CorrVolume4<T>> {
    if mode == GateMode::None {
        return Err(CgcvError::Contract(
            "cross attention requested with gate mode none; skip the gate instead".into(),
        ));
    }
    counters::bump(Kernel::CrossAttention);
    let logits = attention_logits(qk)?;
    Ok(match mode {
        GateMode::Sigmoid => map_sigmoid(&logits),
        GateMode::Softmax => map_softmax_lastdims(&logits),
        GateMode::None => unreachable!(),
    })
}

/// `M = A * C`, element-wise.
pub fn gate<T: Real>(c: &CorrVolume4<T>, a: &CorrVolume4<T>) -> Result<CorrVolume4<T>> {
    counters::bump(Kernel::Gate);
    c.zip_map(a, |c, a| a * c)
}

/// `S = <net1, net2> / sqrt(t)`.
pub fn context_correlation<T: Real>(ctx: &ContextBundle<T>) -> Result<CorrVolume4<T>> {
    counters::bump(Kernel::ContextCorrelation);
    build_all_pairs(&ctx.net1, &ctx.net2)
}

fn check_grid<T: Real>(c: &CorrVolume4<T>, ctx: &ContextBundle<T>) -> Result<()> {
    let [h1, w1, h2, w2] = c.dims();
    if (ctx.net1.height(), ctx.net1.width(), ctx.net2.height(), ctx.net2.width()) != (h1, w1, h2, w2) {
        return Err(CgcvError::Dimension(format!(
            "volume {:?} does not match context grids {}x{} / {}x{}",
            c.dims(),
            ctx.net1.height(),
            ctx.net1.width(),
            ctx.net2.height(),
            ctx.net2.width()
        )));
    }
    Ok(())
}

struct Assembled<T> {
    v: CorrVolume4<T>,
    qk: Option<QKMaps<T>>,
    a: Option<CorrVolume4<T>>,
    s: Option<CorrVolume4<T>>,
}

fn assemble_parts<T: Real>(
    c: &CorrVolume4<T>,
    ctx: &ContextBundle<T>,
    p: &GateParams<T>,
) -> Result<Assembled<T>> {
    check_grid(c, ctx)?;
    counters::bump(Kernel::Assemble);
    let (mut v, qk, a) = match p.gate_mode {
        GateMode::None => (c.clone(), None, None),
        mode => {
            let qk = project_qk(ctx, p)?;
            let a = cross_attention(&qk, mode)?;
            (gate(c, &a)?, Some(qk), Some(a))
        }
    };
    let s = if p.lift_enabled {
        let s = context_correlation(ctx)?;
        // skipping the add keeps V bit-identical to M when lambda is zero, signed zeros included
        if p.lambda != T::zero() {
            for (dst, &sv) in v.data_mut().iter_mut().zip(s.data()) {
                *dst += p.lambda * sv;
            }
        }
        Some(s)
    } else {
        None
    };
    Ok(Assembled { v, qk, a, s })
}

/// `V = gate(C, A) + lambda * S`, honoring the ablation switches in `p`.
pub fn assemble<T: Real>(
    c: &CorrVolume4<T>,
    ctx: &ContextBundle<T>,
    p: &GateParams<T>,
) -> Result<CorrVolume4<T>> {
    Ok(assemble_parts(c, ctx, p)?.v)
}

struct Saved<T> {
    g1: FeatureMap<T>,
    g2: FeatureMap<T>,
    ctx: ContextBundle<T>,
    params: GateParams<T>,
    c: CorrVolume4<T>,
    qk: Option<QKMaps<T>>,
    a: Option<CorrVolume4<T>>,
    s: Option<CorrVolume4<T>>,
}

/// Forward state retained for one reverse pass.
pub struct CgcvTape<T> {
    saved: Option<Saved<T>>,
}

impl<T: Real> Default for CgcvTape<T> {
    fn default() -> Self {
        Self { saved: None }
    }
}

impl<T: Real> CgcvTape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_armed(&self) -> bool {
        self.saved.is_some()
    }

    /// Builds `C` from the matching features and assembles `V`, keeping
    /// everything the reverse pass needs.
    pub fn forward(
        &mut self,
        g1: &FeatureMap<T>,
        g2: &FeatureMap<T>,
        ctx: &ContextBundle<T>,
        p: &GateParams<T>,
    ) -> Result<CorrVolume4<T>> {
        let c = build_all_pairs(g1, g2)?;
        let parts = assemble_parts(&c, ctx, p)?;
        self.saved = Some(Saved {
            g1: g1.clone(),
            g2: g2.clone(),
            ctx: ctx.clone(),
            params: p.clone(),
            c,
            qk: parts.qk,
            a: parts.a,
            s: parts.s,
        });
        Ok(parts.v)
    }

    /// The raw volume `C` of the last forward pass.
    pub fn raw_volume(&self) -> Option<&CorrVolume4<T>> {
        self.saved.as_ref().map(|s| &s.c)
    }
}

/// Gradients of a scalar loss with respect to every input of the assembly.
#[derive(Debug, Clone)]
pub struct CgcvGrads<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub lambda: T,
    pub g1: FeatureMap<T>,
    pub g2: FeatureMap<T>,
    pub net1: FeatureMap<T>,
    pub net2: FeatureMap<T>,
}

/// Reverse pass through assembly, gating, attention, projections and both
/// correlations. Consumes the tape's saved state.
pub fn backward_assemble<T: Real>(grad_v: &CorrVolume4<T>, tape: &mut CgcvTape<T>) -> Result<CgcvGrads<T>> {
    let saved = tape
        .saved
        .take()
        .ok_or_else(|| CgcvError::Contract("backward called without a saved forward pass".into()))?;
    grad_v.check_same_dims(&saved.c)?;
    let p = &saved.params;
    let t = saved.ctx.half_channels();
    let mut grads = CgcvGrads {
        wq: Matrix::zeros(p.wq.rows, p.wq.cols),
        wk: Matrix::zeros(p.wk.rows, p.wk.cols),
        lambda: T::zero(),
        g1: FeatureMap::zeros(saved.g1.channels(), saved.g1.height(), saved.g1.width()),
        g2: FeatureMap::zeros(saved.g2.channels(), saved.g2.height(), saved.g2.width()),
        net1: FeatureMap::zeros(t, saved.ctx.net1.height(), saved.ctx.net1.width()),
        net2: FeatureMap::zeros(t, saved.ctx.net2.height(), saved.ctx.net2.width()),
    };

    if let Some(s) = &saved.s {
        grads.lambda = grad_v.data().iter().zip(s.data()).map(|(&g, &s)| g * s).sum();
        let grad_s = grad_v.map(|g| g * p.lambda);
        let scale = T::one() / T::lit(t.max(1) as f64).sqrt();
        let (gn1, gn2) = all_pairs_backward(&grad_s, &saved.ctx.net1, &saved.ctx.net2, scale);
        grads.net1.add_assign(&gn1);
        grads.net2.add_assign(&gn2);
    }

    let grad_c = match (&saved.a, &saved.qk) {
        (Some(a), Some(qk)) => {
            let grad_c = grad_v.zip_map(a, |g, a| g * a)?;
            let grad_a = grad_v.zip_map(&saved.c, |g, c| g * c)?;
            let grad_logits = match p.gate_mode {
                GateMode::Sigmoid => grad_a.zip_map(a, |g, a| g * a * (T::one() - a))?,
                GateMode::Softmax => {
                    let mut out = grad_a.clone();
                    let n = a.plane_len();
                    for ((go, ga), aa) in out
                        .data_mut()
                        .chunks_exact_mut(n)
                        .zip(grad_a.data().chunks_exact(n))
                        .zip(a.data().chunks_exact(n))
                    {
                        let dot: T = ga.iter().zip(aa).map(|(&g, &a)| g * a).sum();
                        for ((o, &g), &a) in go.iter_mut().zip(ga).zip(aa) {
                            *o = a * (g - dot);
                        }
                    }
                    out
                }
                GateMode::None => unreachable!("attention saved without a gate"),
            };
            let d = qk.q.channels();
            let scale = T::one() / T::lit(d.max(1) as f64).sqrt();
            let (gq, gk) = all_pairs_backward(&grad_logits, &qk.q, &qk.k, scale);
            let gn1 = apply_linear_backward(&p.wq, &saved.ctx.net1, &gq, &mut grads.wq);
            let gn2 = apply_linear_backward(&p.wk, &saved.ctx.net2, &gk, &mut grads.wk);
            grads.net1.add_assign(&gn1);
            grads.net2.add_assign(&gn2);
            grad_c
        }
        _ => grad_v.clone(),
    };

    let n = saved.g1.channels();
    let scale = T::one() / T::lit(n.max(1) as f64).sqrt();
    let (gg1, gg2) = all_pairs_backward(&grad_c, &saved.g1, &saved.g2, scale);
    grads.g1 = gg1;
    grads.g2 = gg2;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn rand_ctx(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> ContextBundle<f64> {
        ContextBundle::new(
            rand_map(rng, t, h, w),
            rand_map(rng, t, h, w),
            rand_map(rng, t, h, w),
            rand_map(rng, t, h, w),
        )
        .unwrap()
    }

    fn one_hot(t: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(t, h, w, |c, y, x| if c == (y * w + x) % t { 1.0 } else { 0.0 })
    }

    #[test]
    fn identity_and_zero_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ctx = rand_ctx(&mut rng, 4, 2, 3);
        let mut p = GateParams::<f64>::init(4, 4, 0);
        p.wq = Matrix::identity(4);
        p.wk = Matrix::identity(4);
        let qk = project_qk(&ctx, &p).unwrap();
        assert_eq!(qk.q, ctx.net1);
        assert_eq!(qk.k, ctx.net2);
        p.wq = Matrix::zeros(4, 4);
        assert!(project_qk(&ctx, &p).unwrap().q.data().iter().all(|&x| x == 0.0));
        p.wk = Matrix::zeros(3, 5);
        assert!(matches!(project_qk(&ctx, &p), Err(CgcvError::Dimension(_))));
    }

    #[test]
    fn projection_matches_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ctx = rand_ctx(&mut rng, 5, 1, 1);
        let p = GateParams::<f64>::init(3, 5, 4);
        let qk = project_qk(&ctx, &p).unwrap();
        for o in 0..3 {
            let want: f64 = (0..5).map(|c| p.wq.get(o, c) * ctx.net1.get(c, 0, 0)).sum();
            assert!((qk.q.get(o, 0, 0) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_special_cases() {
        let qk = QKMaps { q: FeatureMap::<f64>::zeros(4, 2, 2), k: one_hot(4, 2, 2) };
        let a = cross_attention(&qk, GateMode::Sigmoid).unwrap();
        assert!(a.data().iter().all(|&x| x == 0.5));
        let qk = QKMaps { q: one_hot(4, 2, 2), k: one_hot(4, 2, 2) };
        let a = cross_attention(&qk, GateMode::Sigmoid).unwrap();
        let hi = 1.0 / (1.0 + (-0.5f64).exp());
        for y1 in 0..2 {
            for x1 in 0..2 {
                for y2 in 0..2 {
                    for x2 in 0..2 {
                        let want = if (y1, x1) == (y2, x2) { hi } else { 0.5 };
                        assert_eq!(a.get(y1, x1, y2, x2), want);
                    }
                }
            }
        }
        assert!(matches!(cross_attention(&qk, GateMode::None), Err(CgcvError::Contract(_))));
    }

    #[test]
    fn attention_is_scaled_all_pairs_then_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let qk = QKMaps { q: rand_map(&mut rng, 6, 3, 2), k: rand_map(&mut rng, 6, 2, 4) };
        let a = cross_attention(&qk, GateMode::Sigmoid).unwrap();
        let composed = map_sigmoid(&build_all_pairs(&qk.q, &qk.k).unwrap());
        assert_eq!(a, composed);
        let soft = cross_attention(&qk, GateMode::Softmax).unwrap();
        for plane in soft.planes() {
            assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_identity_and_suppression() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = CorrVolume4::<f64>::from_fn([2, 2, 2, 2], |_, _, _, _| rng.gen_range(-3.0..3.0));
        assert_eq!(gate(&c, &CorrVolume4::filled(c.dims(), 1.0)).unwrap(), c);
        assert!(gate(&c, &CorrVolume4::zeros(c.dims())).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(gate(&c, &CorrVolume4::zeros([2, 2, 2, 1])), Err(CgcvError::Dimension(_))));
    }

    #[test]
    fn context_correlation_cases() {
        let unit = FeatureMap::<f64>::from_fn(1, 2, 2, |_, y, x| if (y + x) % 2 == 0 { 1.0 } else { -1.0 });
        let ctx = ContextBundle::new(unit.clone(), unit.clone(), unit.clone(), unit.clone()).unwrap();
        let s = context_correlation(&ctx).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(s.get(y, x, y, x), 1.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut ctx = rand_ctx(&mut rng, 7, 3, 3);
        assert_eq!(context_correlation(&ctx).unwrap(), build_all_pairs(&ctx.net1, &ctx.net2).unwrap());
        ctx.net2 = FeatureMap::zeros(7, 3, 3);
        assert!(context_correlation(&ctx).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn assemble_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g1 = rand_map(&mut rng, 8, 3, 3);
        let g2 = rand_map(&mut rng, 8, 3, 3);
        let ctx = rand_ctx(&mut rng, 6, 3, 3);
        let c = build_all_pairs(&g1, &g2).unwrap();
        let mut p = GateParams::<f64>::init(5, 6, 2);
        assert_eq!(p.lambda, 0.0);

        let m = gate(&c, &cross_attention(&project_qk(&ctx, &p).unwrap(), GateMode::Sigmoid).unwrap()).unwrap();
        assert_eq!(assemble(&c, &ctx, &p).unwrap(), m);

        p.lambda = 0.03;
        let v = assemble(&c, &ctx, &p).unwrap();
        let s = context_correlation(&ctx).unwrap();
        for i in 0..v.data().len() {
            assert!((v.data()[i] - m.data()[i] - 0.03 * s.data()[i]).abs() < 1e-6);
        }

        p.gate_mode = GateMode::None;
        p.lift_enabled = false;
        assert_eq!(assemble(&c, &ctx, &p).unwrap(), c);
    }

    #[test]
    fn assemble_runs_each_kernel_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let ctx = rand_ctx(&mut rng, 4, 2, 2);
        let c = CorrVolume4::<f64>::zeros([2, 2, 2, 2]);
        let p = GateParams::<f64>::init(4, 4, 1);
        counters::reset();
        assemble(&c, &ctx, &p).unwrap();
        let k = counters::snapshot();
        assert_eq!((k.assemble, k.project_qk, k.cross_attention, k.gate, k.context_correlation), (1, 1, 1, 1, 1));
        // attention logits and S each go through the all-pairs kernel
        assert_eq!(k.all_pairs, 2);
    }

    fn loss_for(
        g1: &FeatureMap<f64>,
        g2: &FeatureMap<f64>,
        ctx: &ContextBundle<f64>,
        p: &GateParams<f64>,
        weights: &CorrVolume4<f64>,
    ) -> f64 {
        let v = CgcvTape::new().forward(g1, g2, ctx, p).unwrap();
        v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    fn fd_check(mode: GateMode, lift: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (3, 4);
        let g1 = rand_map(&mut rng, 5, h, w);
        let g2 = rand_map(&mut rng, 5, h, w);
        let ctx = rand_ctx(&mut rng, 4, h, w);
        let mut p = GateParams::<f64>::init(3, 4, seed);
        p.gate_mode = mode;
        p.lift_enabled = lift;
        p.lambda = 0.4;
        let weights = CorrVolume4::from_fn([h, w, h, w], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let mut tape = CgcvTape::new();
        tape.forward(&g1, &g2, &ctx, &p).unwrap();
        let grads = backward_assemble(&weights, &mut tape).unwrap();
        let eps = 1e-5;
        let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic - numeric).abs();
            assert!(
                err <= 1e-4 * analytic.abs().max(numeric.abs()) || err <= 1e-7,
                "{what}: analytic {analytic} numeric {numeric}"
            );
        };
        for i in [0, 5, 11] {
            let mut pp = p.clone();
            pp.wq.data[i] += eps;
            let mut pm = p.clone();
            pm.wq.data[i] -= eps;
            check(grads.wq.data[i], loss_for(&g1, &g2, &ctx, &pp, &weights), loss_for(&g1, &g2, &ctx, &pm, &weights), "wq");
            let mut pp = p.clone();
            pp.wk.data[i] += eps;
            let mut pm = p.clone();
            pm.wk.data[i] -= eps;
            check(grads.wk.data[i], loss_for(&g1, &g2, &ctx, &pp, &weights), loss_for(&g1, &g2, &ctx, &pm, &weights), "wk");
        }
        let mut pp = p.clone();
        pp.lambda += eps;
        let mut pm = p.clone();
        pm.lambda -= eps;
        check(grads.lambda, loss_for(&g1, &g2, &ctx, &pp, &weights), loss_for(&g1, &g2, &ctx, &pm, &weights), "lambda");
        for i in [0, 7, 19, 40] {
            let bump = |m: &FeatureMap<f64>, s: f64| {
                let mut m = m.clone();
                m.data_mut()[i] += s;
                m
            };
            check(grads.g1.data()[i], loss_for(&bump(&g1, eps), &g2, &ctx, &p, &weights), loss_for(&bump(&g1, -eps), &g2, &ctx, &p, &weights), "g1");
            check(grads.g2.data()[i], loss_for(&g1, &bump(&g2, eps), &ctx, &p, &weights), loss_for(&g1, &bump(&g2, -eps), &ctx, &p, &weights), "g2");
            let with = |net1: FeatureMap<f64>, net2: FeatureMap<f64>| ContextBundle { net1, net2, ..ctx.clone() };
            check(
                grads.net1.data()[i],
                loss_for(&g1, &g2, &with(bump(&ctx.net1, eps), ctx.net2.clone()), &p, &weights),
                loss_for(&g1, &g2, &with(bump(&ctx.net1, -eps), ctx.net2.clone()), &p, &weights),
                "net1",
            );
            check(
                grads.net2.data()[i],
                loss_for(&g1, &g2, &with(ctx.net1.clone(), bump(&ctx.net2, eps)), &p, &weights),
                loss_for(&g1, &g2, &with(ctx.net1.clone(), bump(&ctx.net2, -eps)), &p, &weights),
                "net2",
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, mode, lift) in [
            (1, GateMode::Sigmoid, true),
            (2, GateMode::Softmax, true),
            (3, GateMode::None, true),
            (4, GateMode::Sigmoid, false),
        ] {
            fd_check(mode, lift, seed);
        }
    }

    #[test]
    fn lambda_gradient_is_grad_dot_s_and_gate_none_routes_context_through_lift() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let g1 = rand_map(&mut rng, 4, 2, 3);
        let g2 = rand_map(&mut rng, 4, 2, 3);
        let ctx = rand_ctx(&mut rng, 3, 2, 3);
        let mut p = GateParams::<f64>::init(2, 3, 5);
        p.gate_mode = GateMode::None;
        let grad_v = CorrVolume4::from_fn([2, 3, 2, 3], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let mut tape = CgcvTape::new();
        tape.forward(&g1, &g2, &ctx, &p).unwrap();
        let grads = backward_assemble(&grad_v, &mut tape).unwrap();
        let s = context_correlation(&ctx).unwrap();
        let want: f64 = grad_v.data().iter().zip(s.data()).map(|(g, s)| g * s).sum();
        assert!((grads.lambda - want).abs() < 1e-12);
        // lambda == 0 and no gate: nothing reaches the context features
        assert!(grads.net1.data().iter().chain(grads.net2.data()).all(|&x| x == 0.0));
        assert!(grads.wq.data.iter().chain(&grads.wk.data).all(|&x| x == 0.0));
        assert!(matches!(backward_assemble(&grad_v, &mut tape), Err(CgcvError::Contract(_))));
    }

    proptest! {
        #[test]
        fn sigmoid_gate_never_amplifies(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CorrVolume4::<f64>::from_fn([2, 3, 3, 2], |_, _, _, _| rng.gen_range(-5.0..5.0));
            let ctx = rand_ctx(&mut rng, 4, 2, 3);
            let ctx = ContextBundle { net2: rand_map(&mut rng, 4, 3, 2), inp2: rand_map(&mut rng, 4, 3, 2), ..ctx };
            let p = GateParams::<f64>::init(4, 4, seed);
            let a = cross_attention(&project_qk(&ctx, &p).unwrap(), GateMode::Sigmoid).unwrap();
            let m = gate(&c, &a).unwrap();
            for (mv, cv) in m.data().iter().zip(c.data()) {
                prop_assert!(mv.abs() <= cv.abs());
            }
        }
    }
}
