//! Minimal recurrent flow decoder: a convolutional GRU reads the correlation
//! window around the current estimate and emits a residual flow update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cgcv::ContextBundle;
use crate::corr::{lookup, CorrFeatures, CorrPyramid, LookupConfig};
use crate::encoder::{Conv2d, PadRecord, GRID};
use crate::error::{CgcvError, Result};
pub use crate::flow::FlowField;
use crate::tensor::{sigmoid, FeatureMap, Real};

pub const DEFAULT_ITERATIONS: usize = 8;

/// Recurrent hidden state, values in `(-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GRUState<T> {
    pub hidden: FeatureMap<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineConfig {
    pub iterations: usize,
    pub hidden_channels: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { iterations: DEFAULT_ITERATIONS, hidden_channels: crate::cgcv::DEFAULT_NET_DIM }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(CgcvError::Config("refinement needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Convolutions of the GRU cell and the flow head.
///
/// The cell input is `[corr, inp, flow]` stacked along channels:
/// `z = sig(Wz [h, x])`, `r = sig(Wr [h, x])`, `q = tanh(Wq [r h, x])`,
/// `h' = (1 - z) h + z q`, and the flow head maps `h'` to a 2-channel update.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights<T> {
    pub convz: Conv2d<T>,
    pub convr: Conv2d<T>,
    pub convq: Conv2d<T>,
    pub head: Conv2d<T>,
}

impl<T: Real> GruWeights<T> {
    pub fn new(hidden: usize, input: usize, kernel: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = kernel / 2;
        let cin = hidden + input;
        Self {
            convz: Conv2d::he_uniform(cin, hidden, kernel, 1, pad, &mut rng),
            convr: Conv2d::he_uniform(cin, hidden, kernel, 1, pad, &mut rng),
            convq: Conv2d::he_uniform(cin, hidden, kernel, 1, pad, &mut rng),
            head: Conv2d::he_uniform(hidden, 2, kernel, 1, pad, &mut rng),
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.convz.out_channels
    }

    /// Channels of `[corr, inp, flow]`.
    pub fn input_channels(&self) -> usize {
        self.convz.in_channels - self.convz.out_channels
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convz: self.convz.zeros_like(),
            convr: self.convr.zeros_like(),
            convq: self.convq.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> GruWeights<U> {
        GruWeights {
            convz: self.convz.cast(),
            convr: self.convr.cast(),
            convq: self.convq.cast(),
            head: self.head.cast(),
        }
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden_channels();
        let cin = self.convz.in_channels;
        if self.convr.in_channels != cin
            || self.convq.in_channels != cin
            || self.convr.out_channels != h
            || self.convq.out_channels != h
            || self.head.in_channels != h
            || self.head.out_channels != 2
            || [&self.convz, &self.convr, &self.convq, &self.head].iter().any(|c| c.stride != 1)
        {
            return Err(CgcvError::Dimension("inconsistent GRU weight shapes".into()));
        }
        Ok(())
    }
}

/// `hidden = tanh(net1)`, zero flow.
pub fn init_state<T: Real>(ctx: &ContextBundle<T>) -> (GRUState<T>, FlowField<T>) {
    let hidden = ctx.net1.map(|v| v.tanh());
    let flow = FlowField::zeros(hidden.height(), hidden.width());
    (GRUState { hidden }, flow)
}

fn flow_map<T: Real>(flow: &FlowField<T>) -> FeatureMap<T> {
    let mut data = Vec::with_capacity(2 * flow.u().len());
    data.extend_from_slice(flow.u());
    data.extend_from_slice(flow.v());
    FeatureMap::new(2, flow.height(), flow.width(), data).expect("flow planes sized by construction")
}

/// Intermediates of one GRU step.
#[derive(Debug, Clone)]
pub struct StepTape<T> {
    h: FeatureMap<T>,
    x: FeatureMap<T>,
    hx: FeatureMap<T>,
    rhx: FeatureMap<T>,
    z: FeatureMap<T>,
    r: FeatureMap<T>,
    q: FeatureMap<T>,
    h_new: FeatureMap<T>,
}

/// Gradients flowing out of one GRU step.
#[derive(Debug, Clone)]
pub struct StepGrads<T> {
    pub hidden: FeatureMap<T>,
    pub corr: FeatureMap<T>,
    pub inp: FeatureMap<T>,
    pub flow: FlowField<T>,
}

pub(crate) fn gru_step_tape<T: Real>(
    state: &GRUState<T>,
    corr: &FeatureMap<T>,
    inp: &FeatureMap<T>,
    flow: &FlowField<T>,
    w: &GruWeights<T>,
) -> Result<(GRUState<T>, FlowField<T>, StepTape<T>)> {
    w.check()?;
    let h = &state.hidden;
    let x = FeatureMap::concat(&[corr, inp, &flow_map(flow)])?;
    if h.channels() != w.hidden_channels() || x.channels() != w.input_channels() {
        return Err(CgcvError::Dimension(format!(
            "GRU expects {} hidden + {} input channels, got {} + {}",
            w.hidden_channels(),
            w.input_channels(),
            h.channels(),
            x.channels()
        )));
    }
    let hx = FeatureMap::concat(&[h, &x])?;
    let z = w.convz.forward(&hx)?.map(sigmoid);
    let r = w.convr.forward(&hx)?.map(sigmoid);
    let mut rh = h.clone();
    for (v, &g) in rh.data_mut().iter_mut().zip(r.data()) {
        *v *= g;
    }
    let rhx = FeatureMap::concat(&[&rh, &x])?;
    let q = w.convq.forward(&rhx)?.map(|v| v.tanh());
    let mut h_new = h.clone();
    for (((hn, &hv), &zv), &qv) in h_new.data_mut().iter_mut().zip(h.data()).zip(z.data()).zip(q.data()) {
        *hn = (T::one() - zv) * hv + zv * qv;
    }
    let delta = w.head.forward(&h_new)?;
    let mut next = flow.clone();
    for (dst, &d) in next.u_mut().iter_mut().zip(delta.channel(0)) {
        *dst += d;
    }
    for (dst, &d) in next.v_mut().iter_mut().zip(delta.channel(1)) {
        *dst += d;
    }
    let tape = StepTape { h: h.clone(), x, hx, rhx, z, r, q, h_new: h_new.clone() };
    Ok((GRUState { hidden: h_new }, next, tape))
}

/// One GRU update followed by a residual flow update from the head.
pub fn gru_step<T: Real>(
    state: &GRUState<T>,
    corr: &CorrFeatures<T>,
    inp: &FeatureMap<T>,
    flow: &FlowField<T>,
    w: &GruWeights<T>,
) -> Result<(GRUState<T>, FlowField<T>)> {
    let (s, f, _) = gru_step_tape(state, corr.as_feature_map(), inp, flow, w)?;
    Ok((s, f))
}

/// Reverse pass of one step. `grad_h_new` and `grad_flow_new` are the
/// gradients arriving at the step outputs; weight gradients accumulate into `grads`.
pub(crate) fn gru_step_backward<T: Real>(
    tape: &StepTape<T>,
    w: &GruWeights<T>,
    grad_h_new: &FeatureMap<T>,
    grad_flow_new: &FlowField<T>,
    corr_channels: usize,
    grads: &mut GruWeights<T>,
) -> StepGrads<T> {
    let hc = w.hidden_channels();
    let gdelta = flow_map(grad_flow_new);
    let mut gh_new = w.head.backward(&tape.h_new, &gdelta, &mut grads.head);
    gh_new.add_assign(grad_h_new);

    let n = gh_new.data().len();
    let mut gh = FeatureMap::zeros(hc, tape.h.height(), tape.h.width());
    let mut gpre_z = gh.clone();
    let mut gpre_q = gh.clone();
    {
        let (g, h, z, q) = (gh_new.data(), tape.h.data(), tape.z.data(), tape.q.data());
        let (ghd, gzd, gqd) = (gh.data_mut(), gpre_z.data_mut(), gpre_q.data_mut());
        for i in 0..n {
            ghd[i] = g[i] * (T::one() - z[i]);
            gzd[i] = g[i] * (q[i] - h[i]) * z[i] * (T::one() - z[i]);
            gqd[i] = g[i] * z[i] * (T::one() - q[i] * q[i]);
        }
    }
    let g_rhx = w.convq.backward(&tape.rhx, &gpre_q, &mut grads.convq);
    let (g_rh, mut gx) = g_rhx.split_channels(hc).expect("rhx has hidden channels");
    let mut gpre_r = gh.clone();
    {
        let (grh, h, r) = (g_rh.data(), tape.h.data(), tape.r.data());
        let (ghd, grd) = (gh.data_mut(), gpre_r.data_mut());
        for i in 0..n {
            ghd[i] += grh[i] * r[i];
            grd[i] = grh[i] * h[i] * r[i] * (T::one() - r[i]);
        }
    }
    for (conv, gpre, acc) in [(&w.convz, &gpre_z, &mut grads.convz), (&w.convr, &gpre_r, &mut grads.convr)] {
        let g_hx = conv.backward(&tape.hx, gpre, acc);
        let (g_h, g_x) = g_hx.split_channels(hc).expect("hx has hidden channels");
        gh.add_assign(&g_h);
        gx.add_assign(&g_x);
    }

    let (gcorr, rest) = gx.split_channels(corr_channels).expect("x starts with corr");
    let inp_channels = tape.x.channels() - corr_channels - 2;
    let (ginp, gfl) = rest.split_channels(inp_channels).expect("x holds inp then flow");
    let mut gflow = grad_flow_new.clone();
    for (dst, &g) in gflow.u_mut().iter_mut().zip(gfl.channel(0)) {
        *dst += g;
    }
    for (dst, &g) in gflow.v_mut().iter_mut().zip(gfl.channel(1)) {
        *dst += g;
    }
    StepGrads { hidden: gh, corr: gcorr, inp: ginp, flow: gflow }
}

/// Source taps along one axis: full-res index `i` reads coarse `i / factor`.
fn axis_taps<T: Real>(full: usize, coarse: usize, factor: usize) -> Vec<(usize, usize, T)> {
    (0..full)
        .map(|i| {
            let pos = i as f64 / factor as f64;
            let i0 = (pos.floor() as usize).min(coarse.saturating_sub(1));
            let i1 = (i0 + 1).min(coarse.saturating_sub(1));
            let f = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, T::lit(f))
        })
        .collect()
}

/// Bilinear `x8` upsampling with displacements scaled by 8. Full-res pixel
/// `(8y, 8x)` coincides with coarse cell `(y, x)`; beyond the last coarse
/// cell the edge value is held.
pub fn upsample_flow<T: Real>(coarse: &FlowField<T>) -> FlowField<T> {
    let (h, w) = (coarse.height(), coarse.width());
    let (fh, fw) = (h * GRID, w * GRID);
    let ty = axis_taps::<T>(fh, h, GRID);
    let tx = axis_taps::<T>(fw, w, GRID);
    let scale = T::lit(GRID as f64);
    let one = T::one();
    let interp = |plane: &[T], y: usize, x: usize| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = plane[y0 * w + x0] * (one - fx) + plane[y0 * w + x1] * fx;
        let bot = plane[y1 * w + x0] * (one - fx) + plane[y1 * w + x1] * fx;
        (top * (one - fy) + bot * fy) * scale
    };
    FlowField::from_fn(fh, fw, |y, x| (interp(coarse.u(), y, x), interp(coarse.v(), y, x)))
}

/// Adjoint of [`upsample_flow`] restricted to the top-left `grad.height() x
/// grad.width()` window of the upsampled field.
pub fn upsample_flow_backward<T: Real>(grad: &FlowField<T>, coarse_h: usize, coarse_w: usize) -> FlowField<T> {
    let ty = axis_taps::<T>(grad.height(), coarse_h, GRID);
    let tx = axis_taps::<T>(grad.width(), coarse_w, GRID);
    let scale = T::lit(GRID as f64);
    let one = T::one();
    let mut out = FlowField::zeros(coarse_h, coarse_w);
    for y in 0..grad.height() {
        let (y0, y1, fy) = ty[y];
        for x in 0..grad.width() {
            let (x0, x1, fx) = tx[x];
            let (gu, gv) = grad.get(y, x);
            let taps = [
                (y0 * coarse_w + x0, (one - fy) * (one - fx)),
                (y0 * coarse_w + x1, (one - fy) * fx),
                (y1 * coarse_w + x0, fy * (one - fx)),
                (y1 * coarse_w + x1, fy * fx),
            ];
            for (i, wgt) in taps {
                out.u_mut()[i] += gu * wgt * scale;
                out.v_mut()[i] += gv * wgt * scale;
            }
        }
    }
    out
}

/// Upsamples a coarse flow and crops away the padding recorded by `pad_to_grid`.
pub fn finalize_flow<T: Real>(coarse: &FlowField<T>, pad: PadRecord) -> Result<FlowField<T>> {
    let full = upsample_flow(coarse);
    full.crop(full.height() - pad.rows, full.width() - pad.cols)
}

/// Iterates lookup and GRU updates over a prebuilt pyramid. The pyramid is
/// only sampled here; no volume is rebuilt inside the loop.
pub fn run_refinement<T: Real>(
    ctx: &ContextBundle<T>,
    pyramid: &CorrPyramid<T>,
    lookup_cfg: &LookupConfig,
    cfg: &RefineConfig,
    weights: &GruWeights<T>,
    pad: PadRecord,
) -> Result<FlowField<T>> {
    let coarse = refine_coarse(ctx, pyramid, lookup_cfg, cfg, weights)?;
    let last = coarse.last().expect("at least one iteration");
    finalize_flow(last, pad)
}

/// Coarse flow after every iteration.
pub fn refine_coarse<T: Real>(
    ctx: &ContextBundle<T>,
    pyramid: &CorrPyramid<T>,
    lookup_cfg: &LookupConfig,
    cfg: &RefineConfig,
    weights: &GruWeights<T>,
) -> Result<Vec<FlowField<T>>> {
    cfg.validate()?;
    if weights.hidden_channels() != ctx.net1.channels() {
        return Err(CgcvError::Dimension(format!(
            "GRU hidden width {} differs from net width {}",
            weights.hidden_channels(),
            ctx.net1.channels()
        )));
    }
    let (mut state, mut flow) = init_state(ctx);
    let mut out = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let corr = lookup(pyramid, &flow, lookup_cfg)?;
        let (s, f) = gru_step(&state, &corr, &ctx.inp1, &flow, weights)?;
        state = s;
        flow = f;
        out.push(flow.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corr::build_pyramid;
    use crate::tensor::CorrVolume4;
    use rand::Rng;

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, s: f64) -> FeatureMap<f64> {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-s..s))
    }

    fn bundle(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> ContextBundle<f64> {
        ContextBundle::new(
            rand_map(rng, t, h, w, 1.0),
            rand_map(rng, t, h, w, 1.0),
            rand_map(rng, t, h, w, 1.0),
            rand_map(rng, t, h, w, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn init_state_cases() {
        let z = FeatureMap::<f64>::zeros(3, 2, 2);
        let ctx = ContextBundle::new(z.clone(), z.clone(), z.clone(), z.clone()).unwrap();
        let (s, f) = init_state(&ctx);
        assert!(s.hidden.data().iter().all(|&v| v == 0.0));
        assert!(f.u().iter().chain(f.v()).all(|&v| v == 0.0));
        let big = FeatureMap::<f64>::from_fn(3, 2, 2, |_, _, _| 12.0);
        let ctx = ContextBundle::new(big.clone(), z.clone(), z.clone(), z).unwrap();
        let (s, _) = init_state(&ctx);
        assert!(s.hidden.data().iter().all(|&v| v > 0.999_999_999));
    }

    #[test]
    fn zero_head_keeps_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = GruWeights::<f64>::new(4, 9 + 4 + 2, 3, 2);
        w.head = w.head.zeros_like();
        let state = GRUState { hidden: rand_map(&mut rng, 4, 3, 3, 0.9) };
        let corr = rand_map(&mut rng, 9, 3, 3, 1.0);
        let inp = rand_map(&mut rng, 4, 3, 3, 1.0);
        let flow = FlowField::from_fn(3, 3, |y, x| (y as f64 * 0.5, -(x as f64)));
        let (s, f, _) = gru_step_tape(&state, &corr, &inp, &flow, &w).unwrap();
        assert_eq!(f, flow);
        assert!(s.hidden.max_abs() < 1.0);
    }

    #[test]
    fn single_pixel_step_by_hand() {
        // hidden 1, input = 1 corr + 1 inp + 2 flow, 1x1 kernels
        let mut w = GruWeights::<f64>::new(1, 4, 1, 0);
        w.convz.weight = vec![0.5, 1.0, -1.0, 0.25, 0.0];
        w.convz.bias = vec![0.1];
        w.convr.weight = vec![-0.3, 0.2, 0.4, 0.0, 0.5];
        w.convr.bias = vec![0.0];
        w.convq.weight = vec![0.7, -0.6, 0.3, 0.2, -0.1];
        w.convq.bias = vec![0.05];
        w.head.weight = vec![2.0, -1.0];
        w.head.bias = vec![0.1, 0.2];
        let (h, c, i, u, v) = (0.4f64, 0.8, -0.5, 0.3, -0.2);
        let state = GRUState { hidden: FeatureMap::new(1, 1, 1, vec![h]).unwrap() };
        let corr = FeatureMap::new(1, 1, 1, vec![c]).unwrap();
        let inp = FeatureMap::new(1, 1, 1, vec![i]).unwrap();
        let flow = FlowField::constant(1, 1, u, v);
        let (s, f, _) = gru_step_tape(&state, &corr, &inp, &flow, &w).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let z = sig(0.5 * h + 1.0 * c - 1.0 * i + 0.25 * u + 0.0 * v + 0.1);
        let r = sig(-0.3 * h + 0.2 * c + 0.4 * i + 0.0 * u + 0.5 * v);
        let q = (0.7 * r * h - 0.6 * c + 0.3 * i + 0.2 * u - 0.1 * v + 0.05).tanh();
        let hn = (1.0 - z) * h + z * q;
        assert!((s.hidden.data()[0] - hn).abs() < 1e-12);
        assert!((f.u()[0] - (u + 2.0 * hn + 0.1)).abs() < 1e-12);
        assert!((f.v()[0] - (v - hn + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = GruWeights::<f64>::new(3, 5 + 2 + 2, 3, 9);
        let state = GRUState { hidden: rand_map(&mut rng, 3, 3, 4, 0.9) };
        let corr = rand_map(&mut rng, 5, 3, 4, 1.0);
        let inp = rand_map(&mut rng, 2, 3, 4, 1.0);
        let flow = FlowField::from_fn(3, 4, |_, _| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let gh = rand_map(&mut rng, 3, 3, 4, 1.0);
        let gf = FlowField::from_fn(3, 4, |_, _| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let loss = |w: &GruWeights<f64>, st: &GRUState<f64>, corr: &FeatureMap<f64>, flow: &FlowField<f64>| {
            let (s, f, _) = gru_step_tape(st, corr, &inp, flow, w).unwrap();
            let a: f64 = s.hidden.data().iter().zip(gh.data()).map(|(a, b)| a * b).sum();
            let b: f64 = f.u().iter().zip(gf.u()).chain(f.v().iter().zip(gf.v())).map(|(a, b)| a * b).sum();
            a + b
        };
        let (_, _, tape) = gru_step_tape(&state, &corr, &inp, &flow, &w).unwrap();
        let mut grads = w.zeros_like();
        let sg = gru_step_backward(&tape, &w, &gh, &gf, 5, &mut grads);
        let eps = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1.0);
        for i in [0, 13, 50, 100] {
            let mut p = w.clone();
            p.convq.weight[i] += eps;
            let mut m = w.clone();
            m.convq.weight[i] -= eps;
            let n = (loss(&p, &state, &corr, &flow) - loss(&m, &state, &corr, &flow)) / (2.0 * eps);
            assert!(close(grads.convq.weight[i], n));
            let mut p = w.clone();
            p.convz.weight[i] += eps;
            let mut m = w.clone();
            m.convz.weight[i] -= eps;
            let n = (loss(&p, &state, &corr, &flow) - loss(&m, &state, &corr, &flow)) / (2.0 * eps);
            assert!(close(grads.convz.weight[i], n));
        }
        for i in [0, 7, 20, 35] {
            let mut p = state.clone();
            p.hidden.data_mut()[i] += eps;
            let mut m = state.clone();
            m.hidden.data_mut()[i] -= eps;
            let n = (loss(&w, &p, &corr, &flow) - loss(&w, &m, &corr, &flow)) / (2.0 * eps);
            assert!(close(sg.hidden.data()[i], n));
            let mut p = corr.clone();
            p.data_mut()[i] += eps;
            let mut m = corr.clone();
            m.data_mut()[i] -= eps;
            let n = (loss(&w, &state, &p, &flow) - loss(&w, &state, &m, &flow)) / (2.0 * eps);
            assert!(close(sg.corr.data()[i], n));
        }
        for i in [0, 5, 11] {
            let mut p = flow.clone();
            p.v_mut()[i] += eps;
            let mut m = flow.clone();
            m.v_mut()[i] -= eps;
            let n = (loss(&w, &state, &corr, &p) - loss(&w, &state, &corr, &m)) / (2.0 * eps);
            assert!(close(sg.flow.v()[i], n));
        }
    }

    #[test]
    fn upsampling_hits_grid_points_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coarse = FlowField::from_fn(3, 4, |_, _| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
        let full = upsample_flow(&coarse);
        assert_eq!((full.height(), full.width()), (24, 32));
        for y in 0..3 {
            for x in 0..4 {
                let (u, v) = coarse.get(y, x);
                assert_eq!(full.get(8 * y, 8 * x), (8.0 * u, 8.0 * v));
            }
        }
        // <up(c), g> == <c, up^T(g)> on a cropped window
        let g = FlowField::from_fn(20, 30, |_, _| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let lhs: f64 = (0..20)
            .flat_map(|y| (0..30).map(move |x| (y, x)))
            .map(|(y, x)| {
                let (a, b) = full.get(y, x);
                let (c, d) = g.get(y, x);
                a * c + b * d
            })
            .sum();
        let back = upsample_flow_backward(&g, 3, 4);
        let rhs: f64 = coarse.u().iter().zip(back.u()).chain(coarse.v().iter().zip(back.v())).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn refinement_with_zero_head_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx = bundle(&mut rng, 4, 2, 2);
        let lcfg = LookupConfig { radius: 1, num_levels: 2 };
        let vol = CorrVolume4::from_fn([2, 2, 2, 2], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let pyr = build_pyramid(vol, 2).unwrap();
        let mut w = GruWeights::<f64>::new(4, lcfg.feature_len() + 4 + 2, 3, 1);
        w.head = w.head.zeros_like();
        let cfg = RefineConfig { iterations: 1, hidden_channels: 4 };
        let out = run_refinement(&ctx, &pyr, &lcfg, &cfg, &w, PadRecord { rows: 3, cols: 0 }).unwrap();
        assert_eq!((out.height(), out.width()), (13, 16));
        assert!(out.u().iter().chain(out.v()).all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_stays_bounded_over_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = bundle(&mut rng, 4, 4, 4);
        let lcfg = LookupConfig { radius: 1, num_levels: 2 };
        let vol = CorrVolume4::from_fn([4, 4, 4, 4], |_, _, _, _| rng.gen_range(-3.0..3.0));
        let pyr = build_pyramid(vol, 2).unwrap();
        let w = GruWeights::<f64>::new(4, lcfg.feature_len() + 4 + 2, 3, 5);
        let (mut state, mut flow) = init_state(&ctx);
        for _ in 0..10 {
            let corr = lookup(&pyr, &flow, &lcfg).unwrap();
            let (s, f) = gru_step(&state, &corr, &ctx.inp1, &flow, &w).unwrap();
            assert!(s.hidden.max_abs() < 1.0);
            assert!(f.is_finite());
            state = s;
            flow = f;
        }
    }
}
