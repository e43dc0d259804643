//! End-to-end flow model: encoders, the gated and lifted volume, the pooled
//! pyramid and the recurrent refiner, with a full reverse pass.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::cgcv::{
    assemble, cross_attention, gate, project_qk, backward_assemble, context_correlation, CgcvTape, ContextBundle,
    GateMode, GateParams, DEFAULT_NET_DIM, DEFAULT_QK_DIM,
};
use crate::corr::{build_all_pairs, build_pyramid, lookup, lookup_backward, lookup_cells, CorrPyramid, LookupConfig};
use crate::encoder::{pad_to_multiple, ConvEncoder, EncoderConfig, EncoderTape, Image, ImagePair, PadRecord, GRID};
use crate::error::{CgcvError, Result};
use crate::flow::FlowField;
use crate::refine::{
    finalize_flow, gru_step_backward, gru_step_tape, init_state, run_refinement, upsample_flow_backward,
    GruWeights, RefineConfig, StepTape,
};
use crate::tensor::{CorrVolume4, FeatureMap, Real};

/// Weight of iteration `i` of `n` in the sequence loss is `gamma^(n-1-i)`.
pub const LOSS_GAMMA: f64 = 0.8;
/// Added under the square root of the endpoint error so the loss is smooth at zero.
pub const LOSS_EPS: f64 = 1e-6;

/// Architecture and run settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub matching: EncoderConfig,
    /// Output width is `2t`: `net` and `inp` halves.
    pub context: EncoderConfig,
    pub qk_dim: usize,
    pub lookup: LookupConfig,
    pub refine: RefineConfig,
    pub gru_kernel: usize,
    pub gate_mode: GateMode,
    pub lift_enabled: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            matching: EncoderConfig::matching(256, 1),
            context: EncoderConfig::context(2 * DEFAULT_NET_DIM, 2),
            qk_dim: DEFAULT_QK_DIM,
            lookup: LookupConfig::default(),
            refine: RefineConfig::default(),
            gru_kernel: 3,
            gate_mode: GateMode::Sigmoid,
            lift_enabled: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the gradient checks and toy training.
    pub fn toy(seed: u64) -> Self {
        Self {
            matching: EncoderConfig { widths: [8, 16, 16], kernel: 3, seed },
            context: EncoderConfig { widths: [8, 16, 16], kernel: 3, seed: seed.wrapping_add(1) },
            qk_dim: 8,
            lookup: LookupConfig { radius: 2, num_levels: 2 },
            refine: RefineConfig { iterations: 4, hidden_channels: 8 },
            gru_kernel: 3,
            gate_mode: GateMode::Sigmoid,
            lift_enabled: true,
            seed,
        }
    }

    pub fn net_channels(&self) -> usize {
        self.context.out_channels() / 2
    }

    pub fn run(&self) -> RunConfig {
        RunConfig { lookup: self.lookup, iterations: self.refine.iterations }
    }

    pub fn validate(&self) -> Result<()> {
        self.refine.validate()?;
        if !self.context.out_channels().is_multiple_of(2) {
            return Err(CgcvError::Config("context encoder width must be even".into()));
        }
        if self.refine.hidden_channels != self.net_channels() {
            return Err(CgcvError::Config(format!(
                "hidden width {} must equal net width {}",
                self.refine.hidden_channels,
                self.net_channels()
            )));
        }
        if self.lookup.num_levels == 0 {
            return Err(CgcvError::Config("pyramid needs at least one level".into()));
        }
        Ok(())
    }
}

/// Settings that may change between runs of the same weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub lookup: LookupConfig,
    pub iterations: usize,
}

impl RunConfig {
    /// Frames are padded so the coarsest pyramid level still has whole cells.
    pub fn pad_multiple(&self) -> usize {
        GRID << self.lookup.num_levels.saturating_sub(1)
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub fnet: ConvEncoder<T>,
    pub cnet: ConvEncoder<T>,
    pub gate: GateParams<T>,
    pub gru: GruWeights<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.net_channels();
        let mut gate = GateParams::init(cfg.qk_dim, t, cfg.seed.wrapping_add(2));
        gate.gate_mode = cfg.gate_mode;
        gate.lift_enabled = cfg.lift_enabled;
        let gru_in = cfg.lookup.feature_len() + t + 2;
        Ok(Self {
            fnet: ConvEncoder::new(&cfg.matching)?,
            cnet: ConvEncoder::new(&cfg.context)?,
            gate,
            gru: GruWeights::new(t, gru_in, cfg.gru_kernel, cfg.seed.wrapping_add(3)),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut gate = self.gate.clone();
        gate.wq.data.iter_mut().chain(gate.wk.data.iter_mut()).for_each(|v| *v = T::zero());
        gate.lambda = T::zero();
        Self { fnet: self.fnet.zeros_like(), cnet: self.cnet.zeros_like(), gate, gru: self.gru.zeros_like() }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { fnet: self.fnet.cast(), cnet: self.cnet.cast(), gate: self.gate.cast(), gru: self.gru.cast() }
    }

    pub fn net_channels(&self) -> usize {
        self.gate.wq.cols
    }

    /// Visits every tensor with its name and shape, in checkpoint order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (prefix, enc) in [("fnet", &self.fnet), ("cnet", &self.cnet)] {
            for (i, l) in enc.layers.iter().enumerate() {
                let shape = [l.out_channels, l.in_channels, l.kernel, l.kernel];
                f(&format!("{prefix}.conv{i}.weight"), &shape, &l.weight);
                f(&format!("{prefix}.conv{i}.bias"), &[l.out_channels], &l.bias);
            }
        }
        f("cgcv.wq", &[self.gate.wq.rows, self.gate.wq.cols], &self.gate.wq.data);
        f("cgcv.wk", &[self.gate.wk.rows, self.gate.wk.cols], &self.gate.wk.data);
        f("cgcv.lambda", &[], std::slice::from_ref(&self.gate.lambda));
        for (name, l) in self.gru_convs() {
            let shape = [l.out_channels, l.in_channels, l.kernel, l.kernel];
            f(&format!("gru.{name}.weight"), &shape, &l.weight);
            f(&format!("gru.{name}.bias"), &[l.out_channels], &l.bias);
        }
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (prefix, enc) in [("fnet", &mut self.fnet), ("cnet", &mut self.cnet)] {
            for (i, l) in enc.layers.iter_mut().enumerate() {
                f(&format!("{prefix}.conv{i}.weight"), &mut l.weight);
                f(&format!("{prefix}.conv{i}.bias"), &mut l.bias);
            }
        }
        f("cgcv.wq", &mut self.gate.wq.data);
        f("cgcv.wk", &mut self.gate.wk.data);
        f("cgcv.lambda", std::slice::from_mut(&mut self.gate.lambda));
        let g = &mut self.gru;
        for (name, l) in [("convz", &mut g.convz), ("convr", &mut g.convr), ("convq", &mut g.convq), ("head", &mut g.head)]
        {
            f(&format!("gru.{name}.weight"), &mut l.weight);
            f(&format!("gru.{name}.bias"), &mut l.bias);
        }
    }

    fn gru_convs(&self) -> [(&'static str, &crate::encoder::Conv2d<T>); 4] {
        let g = &self.gru;
        [("convz", &g.convz), ("convr", &g.convr), ("convq", &g.convq), ("head", &g.head)]
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _, _| names.push(n.to_string()));
        names
    }

    /// All values flattened in checkpoint order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        let flat = other.flatten();
        let mut i = 0;
        self.visit_mut(&mut |_, d| {
            for v in d.iter_mut() {
                *v += alpha * flat[i];
                i += 1;
            }
        });
    }

    pub fn scale(&mut self, s: T) {
        self.visit_mut(&mut |_, d| d.iter_mut().for_each(|v| *v *= s));
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v.to_f64_lossless().powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Run settings implied by the weights: the GRU input width fixes
    /// `levels * (2r+1)^2`, so only `iterations` and a compatible lookup can vary.
    pub fn check_run(&self, run: &RunConfig) -> Result<()> {
        let need = run.lookup.feature_len() + self.net_channels() + 2;
        if self.gru.input_channels() != need {
            return Err(CgcvError::Config(format!(
                "weights expect {} lookup channels, radius {} with {} levels gives {}",
                self.gru.input_channels().saturating_sub(self.net_channels() + 2),
                run.lookup.radius,
                run.lookup.num_levels,
                run.lookup.feature_len()
            )));
        }
        if run.iterations == 0 {
            return Err(CgcvError::Config("refinement needs at least one iteration".into()));
        }
        Ok(())
    }

    fn refine_config(&self, run: &RunConfig) -> RefineConfig {
        RefineConfig { iterations: run.iterations, hidden_channels: self.net_channels() }
    }
}

fn normalize<T: Real>(img: &Image) -> FeatureMap<T> {
    img.to_feature_map::<T>().map(|v| T::lit(2.0) * v - T::one())
}

struct Encoded<T> {
    pad: PadRecord,
    g1: FeatureMap<T>,
    g2: FeatureMap<T>,
    ctx: ContextBundle<T>,
}

fn encode<T: Real>(p: &ModelParams<T>, pair: &ImagePair, run: &RunConfig) -> Result<Encoded<T>> {
    let m = run.pad_multiple();
    let (r, pad) = pad_to_multiple(&pair.reference, m);
    let (t, _) = pad_to_multiple(&pair.target, m);
    let (i1, i2) = (normalize::<T>(&r), normalize::<T>(&t));
    let ctx = ContextBundle::from_encoded(&p.cnet.forward(&i1)?, &p.cnet.forward(&i2)?)?;
    Ok(Encoded { pad, g1: p.fnet.forward(&i1)?, g2: p.fnet.forward(&i2)?, ctx })
}

/// Full-resolution flow from reference to target.
pub fn estimate_flow<T: Real>(p: &ModelParams<T>, pair: &ImagePair, run: &RunConfig) -> Result<FlowField<T>> {
    p.check_run(run)?;
    let e = encode(p, pair, run)?;
    let c = build_all_pairs(&e.g1, &e.g2)?;
    let v = assemble(&c, &e.ctx, &p.gate)?;
    let pyramid = build_pyramid(v, run.lookup.num_levels)?;
    run_refinement(&e.ctx, &pyramid, &run.lookup, &p.refine_config(run), &p.gru, e.pad)
}

/// Volume terms for one frame pair. `a`, `m` are absent when gating is off,
/// `s` when lifting is off.
pub struct VolumeParts<T> {
    pub c: CorrVolume4<T>,
    pub a: Option<CorrVolume4<T>>,
    pub m: Option<CorrVolume4<T>>,
    pub s: Option<CorrVolume4<T>>,
    pub v: CorrVolume4<T>,
}

pub fn volume_parts<T: Real>(p: &ModelParams<T>, pair: &ImagePair, run: &RunConfig) -> Result<VolumeParts<T>> {
    let e = encode(p, pair, run)?;
    let c = build_all_pairs(&e.g1, &e.g2)?;
    let (a, m) = if p.gate.gate_mode == GateMode::None {
        (None, None)
    } else {
        let a = cross_attention(&project_qk(&e.ctx, &p.gate)?, p.gate.gate_mode)?;
        let m = gate(&c, &a)?;
        (Some(a), Some(m))
    };
    let s = if p.gate.lift_enabled { Some(context_correlation(&e.ctx)?) } else { None };
    let v = assemble(&c, &e.ctx, &p.gate)?;
    Ok(VolumeParts { c, a, m, s, v })
}

/// Encoder outputs for a single image: matching features and the context split.
pub fn image_features<T: Real>(
    p: &ModelParams<T>,
    img: &Image,
) -> Result<(FeatureMap<T>, FeatureMap<T>, FeatureMap<T>)> {
    let (padded, _) = pad_to_multiple(img, GRID);
    let x = normalize::<T>(&padded);
    let g = p.fnet.forward(&x)?;
    let c = p.cnet.forward(&x)?;
    let (net, inp) = c.split_channels(c.channels() / 2)?;
    Ok((g, net, inp))
}

/// Forward state for one reverse pass over the whole model.
pub struct ModelTape<T> {
    run: RunConfig,
    coarse_dims: (usize, usize),
    out_dims: (usize, usize),
    fnet: [EncoderTape<T>; 2],
    cnet: [EncoderTape<T>; 2],
    cgcv: CgcvTape<T>,
    pyramid: CorrPyramid<T>,
    h0: FeatureMap<T>,
    flows_in: Vec<FlowField<T>>,
    steps: Vec<StepTape<T>>,
}

impl<T: Real> ModelTape<T> {
    /// Hash of every ReLU sign and every bilinear cell touched by the lookups.
    /// Equal fingerprints mean the forward pass took the same smooth branch.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for tape in self.fnet.iter().chain(&self.cnet) {
            for b in tape.relu_pattern() {
                b.hash(&mut h);
            }
        }
        for flow in &self.flows_in {
            lookup_cells(&self.pyramid, flow, &self.run.lookup).hash(&mut h);
        }
        h.finish()
    }
}

/// Full-resolution flow after every iteration plus the tape.
pub fn forward_with_tape<T: Real>(
    p: &ModelParams<T>,
    pair: &ImagePair,
    run: &RunConfig,
) -> Result<(Vec<FlowField<T>>, ModelTape<T>)> {
    p.check_run(run)?;
    let m = run.pad_multiple();
    let (r, pad) = pad_to_multiple(&pair.reference, m);
    let (t, _) = pad_to_multiple(&pair.target, m);
    let (i1, i2) = (normalize::<T>(&r), normalize::<T>(&t));
    let (g1, tf1) = p.fnet.forward_with_tape(&i1)?;
    let (g2, tf2) = p.fnet.forward_with_tape(&i2)?;
    let (c1, tc1) = p.cnet.forward_with_tape(&i1)?;
    let (c2, tc2) = p.cnet.forward_with_tape(&i2)?;
    let ctx = ContextBundle::from_encoded(&c1, &c2)?;
    let mut cgcv = CgcvTape::new();
    let v = cgcv.forward(&g1, &g2, &ctx, &p.gate)?;
    let pyramid = build_pyramid(v, run.lookup.num_levels)?;

    let (mut state, mut flow) = init_state(&ctx);
    let h0 = state.hidden.clone();
    let mut flows_in = Vec::with_capacity(run.iterations);
    let mut steps = Vec::with_capacity(run.iterations);
    let mut out = Vec::with_capacity(run.iterations);
    for _ in 0..run.iterations {
        let corr = lookup(&pyramid, &flow, &run.lookup)?;
        let (s, f, st) = gru_step_tape(&state, corr.as_feature_map(), &ctx.inp1, &flow, &p.gru)?;
        flows_in.push(std::mem::replace(&mut flow, f));
        state = s;
        steps.push(st);
        out.push(finalize_flow(&flow, pad)?);
    }
    let tape = ModelTape {
        run: *run,
        coarse_dims: (flow.height(), flow.width()),
        out_dims: (pair.reference.height, pair.reference.width),
        fnet: [tf1, tf2],
        cnet: [tc1, tc2],
        cgcv,
        pyramid,
        h0,
        flows_in,
        steps,
    };
    Ok((out, tape))
}

/// Reverse pass. `grads_out[i]` is the loss gradient with respect to the
/// full-resolution flow of iteration `i`.
pub fn backward<T: Real>(p: &ModelParams<T>, mut tape: ModelTape<T>, grads_out: &[FlowField<T>]) -> Result<ModelParams<T>> {
    let n = tape.steps.len();
    if grads_out.len() != n {
        return Err(CgcvError::Dimension(format!("{} flow gradients for {n} iterations", grads_out.len())));
    }
    if grads_out.iter().any(|g| (g.height(), g.width()) != tape.out_dims) {
        return Err(CgcvError::Dimension("flow gradient does not match the frame size".into()));
    }
    let mut grads = p.zeros_like();
    let (ch, cw) = tape.coarse_dims;
    let corr_len = tape.run.lookup.feature_len();
    let mut level_grads = tape.pyramid.zero_grads();
    let mut gh = FeatureMap::zeros(tape.h0.channels(), ch, cw);
    let mut gflow = FlowField::zeros(ch, cw);
    let mut ginp1 = FeatureMap::zeros(p.net_channels(), ch, cw);
    for i in (0..n).rev() {
        gflow.add_assign(&upsample_flow_backward(&grads_out[i], ch, cw));
        let sg = gru_step_backward(&tape.steps[i], &p.gru, &gh, &gflow, corr_len, &mut grads.gru);
        ginp1.add_assign(&sg.inp);
        let gf = lookup_backward(&tape.pyramid, &tape.flows_in[i], &tape.run.lookup, &sg.corr, &mut level_grads)?;
        gh = sg.hidden;
        gflow = sg.flow;
        gflow.add_assign(&gf);
    }
    let mut gnet1 = gh;
    for (g, &h) in gnet1.data_mut().iter_mut().zip(tape.h0.data()) {
        *g *= T::one() - h * h;
    }
    let gv = tape.pyramid.backward(level_grads);
    let cg = backward_assemble(&gv, &mut tape.cgcv)?;
    grads.gate.wq = cg.wq;
    grads.gate.wk = cg.wk;
    grads.gate.lambda = cg.lambda;
    gnet1.add_assign(&cg.net1);

    p.fnet.backward(&tape.fnet[0], &cg.g1, &mut grads.fnet);
    p.fnet.backward(&tape.fnet[1], &cg.g2, &mut grads.fnet);
    let gc1 = FeatureMap::concat(&[&gnet1, &ginp1])?;
    let zeros = FeatureMap::zeros(p.net_channels(), ch, cw);
    let gc2 = FeatureMap::concat(&[&cg.net2, &zeros])?;
    p.cnet.backward(&tape.cnet[0], &gc1, &mut grads.cnet);
    p.cnet.backward(&tape.cnet[1], &gc2, &mut grads.cnet);
    Ok(grads)
}

/// Smoothed endpoint error summed over iterations with weights
/// `gamma^(n-1-i)`, and its gradient with respect to each prediction.
pub fn sequence_loss<T: Real>(preds: &[FlowField<T>], gt: &FlowField<T>, gamma: f64) -> Result<(f64, Vec<FlowField<T>>)> {
    let n = preds.len();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (i, pred) in preds.iter().enumerate() {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(CgcvError::Dimension("prediction and ground truth differ in size".into()));
        }
        let w = gamma.powi((n - 1 - i) as i32);
        let count = (gt.height() * gt.width()).max(1) as f64;
        let mut g = FlowField::zeros(gt.height(), gt.width());
        let mut sum = 0.0;
        for k in 0..pred.u().len() {
            let du = pred.u()[k].to_f64_lossless() - gt.u()[k].to_f64_lossless();
            let dv = pred.v()[k].to_f64_lossless() - gt.v()[k].to_f64_lossless();
            let e = (du * du + dv * dv + LOSS_EPS).sqrt();
            sum += e;
            g.u_mut()[k] = T::lit(w * du / (e * count));
            g.v_mut()[k] = T::lit(w * dv / (e * count));
        }
        total += w * sum / count;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Loss and parameter gradient for one frame pair.
pub fn loss_and_grad<T: Real>(
    p: &ModelParams<T>,
    pair: &ImagePair,
    gt: &FlowField<T>,
    run: &RunConfig,
) -> Result<(f64, ModelParams<T>)> {
    let (preds, tape) = forward_with_tape(p, pair, run)?;
    let (loss, g) = sequence_loss(&preds, gt, LOSS_GAMMA)?;
    Ok((loss, backward(p, tape, &g)?))
}

/// Loss only, without keeping a tape.
pub fn loss_only<T: Real>(p: &ModelParams<T>, pair: &ImagePair, gt: &FlowField<T>, run: &RunConfig) -> Result<f64> {
    let (preds, _) = forward_with_tape(p, pair, run)?;
    Ok(sequence_loss(&preds, gt, LOSS_GAMMA)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> ModelConfig {
        let mut c = ModelConfig::toy(seed);
        c.matching.widths = [4, 4, 6];
        c.context.widths = [4, 4, 8];
        c.qk_dim = 3;
        c.refine = RefineConfig { iterations: 2, hidden_channels: 4 };
        c.lookup = LookupConfig { radius: 1, num_levels: 2 };
        c
    }

    fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePair {
        let mut img = || Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        ImagePair::new(img(), img()).unwrap()
    }

    #[test]
    fn names_are_unique_and_complete() {
        let p = ModelParams::<f64>::new(&ModelConfig::toy(1)).unwrap();
        let names = p.tensor_names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names.len(), 6 + 6 + 3 + 8);
        assert!(names.contains(&"cgcv.lambda".to_string()));
        let mut count = 0;
        p.visit(&mut |_, shape, data| {
            assert_eq!(shape.iter().product::<usize>(), data.len());
            count += data.len();
        });
        assert_eq!(count, p.flatten().len());
    }

    #[test]
    fn output_matches_frame_size_and_tape_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny(3);
        let p = ModelParams::<f64>::new(&cfg).unwrap();
        let pair = random_pair(&mut rng, 21, 30);
        let run = cfg.run();
        let flow = estimate_flow(&p, &pair, &run).unwrap();
        assert_eq!((flow.height(), flow.width()), (21, 30));
        let (all, _) = forward_with_tape(&p, &pair, &run).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1], flow);
    }

    #[test]
    fn lookup_width_must_match_weights() {
        let cfg = tiny(1);
        let p = ModelParams::<f64>::new(&cfg).unwrap();
        let mut run = cfg.run();
        run.lookup.radius = 3;
        let pair = random_pair(&mut ChaCha8Rng::seed_from_u64(0), 16, 16);
        assert!(matches!(estimate_flow(&p, &pair, &run), Err(CgcvError::Config(_))));
    }

    #[test]
    fn volume_kernels_run_once_per_pair() {
        let cfg = tiny(2);
        let p = ModelParams::<f64>::new(&cfg).unwrap();
        let pair = random_pair(&mut ChaCha8Rng::seed_from_u64(1), 16, 16);
        let mut seen = Vec::new();
        for iters in [1, 5] {
            let run = RunConfig { iterations: iters, ..cfg.run() };
            counters::reset();
            estimate_flow(&p, &pair, &run).unwrap();
            seen.push(counters::snapshot());
        }
        assert_eq!(seen[0], seen[1]);
        // C, the attention logits and S
        assert_eq!(seen[0].all_pairs, 3);
        assert_eq!(seen[0].assemble, 1);
    }

    #[test]
    fn sequence_loss_weights_and_gradient() {
        let gt = FlowField::constant(1, 2, 0.0f64, 0.0);
        let a = FlowField::constant(1, 2, 3.0, 4.0);
        let b = FlowField::constant(1, 2, 0.0, 1.0);
        let (loss, g) = sequence_loss(&[a, b], &gt, 0.5).unwrap();
        let e = |x: f64| (x + LOSS_EPS).sqrt();
        assert!((loss - (0.5 * e(25.0) + e(1.0))).abs() < 1e-12);
        assert!((g[0].u()[0] - 0.5 * 3.0 / e(25.0) / 2.0).abs() < 1e-12);
        assert!((g[1].v()[1] - 1.0 / e(1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_central_differences_on_a_few_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = tiny(4);
        let mut p = ModelParams::<f64>::new(&cfg).unwrap();
        p.gate.lambda = 0.3;
        let pair = random_pair(&mut rng, 16, 16);
        let gt = FlowField::from_fn(16, 16, |_, _| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
        let run = cfg.run();
        let (_, g) = loss_and_grad(&p, &pair, &gt, &run).unwrap();
        let analytic = g.flatten();
        let base = p.flatten();
        let set = |p: &mut ModelParams<f64>, idx: usize, val: f64| {
            let mut i = 0;
            p.visit_mut(&mut |_, d| {
                for v in d.iter_mut() {
                    if i == idx {
                        *v = val;
                    }
                    i += 1;
                }
            });
        };
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..40 {
            let idx = rng.gen_range(0..base.len());
            let mut pp = p.clone();
            set(&mut pp, idx, base[idx] + h);
            let (_, tp) = forward_with_tape(&pp, &pair, &run).unwrap();
            let mut pm = p.clone();
            set(&mut pm, idx, base[idx] - h);
            let (_, tm) = forward_with_tape(&pm, &pair, &run).unwrap();
            if tp.kink_fingerprint() != tm.kink_fingerprint() {
                continue;
            }
            let n = (loss_only(&pp, &pair, &gt, &run).unwrap() - loss_only(&pm, &pair, &gt, &run).unwrap()) / (2.0 * h);
            let a = analytic[idx];
            let ok = (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) || (a.abs() < 1e-6 && (a - n).abs() <= 1e-7);
            assert!(ok, "coordinate {idx}: analytic {a} numeric {n}");
            checked += 1;
        }
        assert!(checked >= 20);
    }
}
