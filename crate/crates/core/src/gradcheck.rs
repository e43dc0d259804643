//! Central-difference gradient checks of the whole model and a plain
//! gradient-descent trainer for desk-scale runs.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cgcv::GateMode;
use crate::encoder::{Image, ImagePair};
use crate::error::{CgcvError, Result};
use crate::flow::FlowField;
use crate::model::{
    backward, estimate_flow, forward_with_tape, sequence_loss, ModelConfig, ModelParams, RunConfig, LOSS_GAMMA,
};
use crate::tensor::TOLERANCES;

/// Per-tensor outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub pass: bool,
    /// Coordinates compared.
    pub checked: usize,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.3e} {:.3e} {}",
            self.name,
            self.max_rel,
            self.max_abs,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// `rel <= 1e-4`, or `abs <= 1e-7` where the analytic value is below `1e-6`.
pub fn coordinate_passes(analytic: f64, numeric: f64) -> bool {
    let abs = (analytic - numeric).abs();
    let rel = relative_error(analytic, numeric);
    rel <= TOLERANCES.grad_rel || (abs <= TOLERANCES.grad_abs && analytic.abs() < TOLERANCES.grad_tiny)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every coordinate of `theta`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(CgcvError::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + step;
        let plus = f(&x);
        x[i] = theta[i] - step;
        let minus = f(&x);
        x[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CgcvError::Evaluation(format!("non-finite loss while perturbing coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Deliberate corruption of an analytic gradient, used to prove the harness
/// can fail.
#[derive(Debug, Clone, PartialEq)]
pub struct Mutation {
    pub tensor: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub height: usize,
    pub width: usize,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub samples: usize,
    pub step: f64,
    pub mutation: Option<Mutation>,
}

impl GradcheckConfig {
    /// Desk-scale model on 32x32 frames (a 4x4 grid).
    pub fn desk(gate_mode: GateMode) -> Self {
        let mut model = ModelConfig::toy(0);
        model.gate_mode = gate_mode;
        model.refine.iterations = 3;
        Self { model, height: 32, width: 32, samples: 4, step: TOLERANCES.fd_step, mutation: None }
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

/// Random frames, random ground truth and random parameters with a nonzero
/// lift weight and biases, so every term of the reverse pass is exercised.
pub fn gradcheck_problem(cfg: &GradcheckConfig, seed: u64) -> Result<(ModelParams<f64>, ImagePair, FlowField<f64>)> {
    let mut model = cfg.model.clone();
    model.seed = seed;
    model.matching.seed = seed.wrapping_mul(31).wrapping_add(1);
    model.context.seed = seed.wrapping_mul(31).wrapping_add(2);
    let mut p = ModelParams::<f64>::new(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    p.gate.lambda = rng.gen_range(0.2..0.8) * if rng.gen() { 1.0 } else { -1.0 };
    p.visit_mut(&mut |name, d| {
        if name.ends_with(".bias") {
            d.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    });
    let pair = ImagePair::new(random_image(&mut rng, cfg.height, cfg.width), random_image(&mut rng, cfg.height, cfg.width))?;
    let gt = FlowField::from_fn(cfg.height, cfg.width, |_, _| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)));
    Ok((p, pair, gt))
}

fn eval(p: &ModelParams<f64>, pair: &ImagePair, gt: &FlowField<f64>, run: &RunConfig) -> Result<(f64, u64)> {
    let (preds, tape) = forward_with_tape(p, pair, run)?;
    let loss = sequence_loss(&preds, gt, LOSS_GAMMA)?.0;
    if !loss.is_finite() {
        return Err(CgcvError::Evaluation("non-finite loss".into()));
    }
    Ok((loss, tape.kink_fingerprint()))
}

fn set_coordinate(p: &mut ModelParams<f64>, tensor: &str, idx: usize, value: f64) {
    p.visit_mut(&mut |name, d| {
        if name == tensor {
            d[idx] = value;
        }
    });
}

/// Compares analytic and central-difference gradients for every learnable
/// tensor. A coordinate whose perturbation flips a ReLU sign or moves a
/// lookup sample into another bilinear cell is replaced by a fresh draw.
pub fn check_all(cfg: &GradcheckConfig, seed: u64) -> Result<Vec<GradReport>> {
    let (p, pair, gt) = gradcheck_problem(cfg, seed)?;
    let run = cfg.model.run();
    let (preds, tape) = forward_with_tape(&p, &pair, &run)?;
    let base_print = tape.kink_fingerprint();
    let (_, grads_out) = sequence_loss(&preds, &gt, LOSS_GAMMA)?;
    let grads = backward(&p, tape, &grads_out)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.visit(&mut |name, _, d| analytic.push((name.to_string(), d.to_vec())));
    let mut values: Vec<Vec<f64>> = Vec::new();
    p.visit(&mut |_, _, d| values.push(d.to_vec()));
    if let Some(m) = &cfg.mutation {
        let hit = analytic.iter_mut().find(|(n, _)| *n == m.tensor);
        let (_, g) = hit.ok_or_else(|| CgcvError::Config(format!("mutation names unknown tensor {}", m.tensor)))?;
        g.iter_mut().for_each(|v| *v *= m.factor);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5151));
    let h = cfg.step;
    let mut reports = Vec::with_capacity(analytic.len());
    for ((name, ga), theta) in analytic.iter().zip(&values) {
        let n = theta.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let want = cfg.samples.min(n);
        let mut report = GradReport { name: name.clone(), max_rel: 0.0, max_abs: 0.0, pass: true, checked: 0 };
        for &idx in &order {
            if report.checked == want {
                break;
            }
            let mut pp = p.clone();
            set_coordinate(&mut pp, name, idx, theta[idx] + h);
            let (lp, fp) = eval(&pp, &pair, &gt, &run)?;
            set_coordinate(&mut pp, name, idx, theta[idx] - h);
            let (lm, fm) = eval(&pp, &pair, &gt, &run)?;
            if fp != base_print || fm != base_print {
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = ga[idx];
            report.max_rel = report.max_rel.max(relative_error(a, numeric));
            report.max_abs = report.max_abs.max((a - numeric).abs());
            report.pass &= coordinate_passes(a, numeric);
            report.checked += 1;
        }
        if report.checked < want {
            report.pass = false;
        }
        reports.push(report);
    }
    Ok(reports)
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Rescales the averaged gradient to at most this norm.
    pub clip_norm: Option<f64>,
    pub run: RunConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f64>,
    /// Mean loss over the dataset at the start of each epoch.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

pub type Sample = (ImagePair, FlowField<f64>);

/// Mean loss and mean gradient over the dataset.
pub fn dataset_loss_and_grad(p: &ModelParams<f64>, data: &[Sample], run: &RunConfig) -> Result<(f64, ModelParams<f64>)> {
    let mut total = p.zeros_like();
    let mut loss = 0.0;
    for (pair, gt) in data {
        let (preds, tape) = forward_with_tape(p, pair, run)?;
        let (l, g) = sequence_loss(&preds, gt, LOSS_GAMMA)?;
        if !l.is_finite() {
            return Err(CgcvError::Evaluation("training loss is not finite".into()));
        }
        loss += l;
        total.axpy(1.0, &backward(p, tape, &g)?);
    }
    let n = data.len().max(1) as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Full-batch gradient descent on the sequence loss.
pub fn train_toy(init: &ModelParams<f64>, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_toy_with(init, data, cfg, |_, _| {})
}

/// As [`train_toy`], calling `progress(epoch, loss)` after every epoch.
pub fn train_toy_with(
    init: &ModelParams<f64>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(CgcvError::Config("training set is empty".into()));
    }
    let mut p = init.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, mut g) = dataset_loss_and_grad(&p, data, &cfg.run)?;
        if !loss.is_finite() || !g.is_finite() {
            return Err(CgcvError::Evaluation(format!("loss became NaN at epoch {epoch}")));
        }
        trace.push(loss);
        progress(epoch, loss);
        if let Some(c) = cfg.clip_norm {
            let norm = g.norm();
            if norm > c {
                g.scale(c / norm);
            }
        }
        p.axpy(-cfg.learning_rate, &g);
    }
    let final_loss = dataset_loss_and_grad(&p, data, &cfg.run)?.0;
    if !final_loss.is_finite() {
        return Err(CgcvError::Evaluation("loss became NaN after the last epoch".into()));
    }
    Ok(TrainOutcome { params: p, loss_trace: trace, final_loss })
}

/// Mean endpoint error of the final prediction over a dataset.
pub fn mean_epe(p: &ModelParams<f64>, data: &[Sample], run: &RunConfig) -> Result<f64> {
    let mut total = 0.0;
    for (pair, gt) in data {
        total += estimate_flow(p, pair, run)?.epe(gt)?;
    }
    Ok(total / data.len().max(1) as f64)
}
