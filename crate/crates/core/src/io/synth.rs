//! Synthetic frame pairs with exact ground-truth flow.
//!
//! Frames sample a periodic texture (sums of sinusoids with integer
//! frequencies over the frame), so any warp can be evaluated analytically and
//! content leaving one edge re-enters at the other.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Image, ImagePair, GRID};
use crate::error::{CgcvError, Result};
use crate::flow::FlowField;
use crate::io::config::{parse_switch, ConfigFile};
use crate::io::flo::{read_flo, write_flo};
use crate::io::pnm::{read_image, write_ppm};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Translation { dx: f64, dy: f64 },
    /// `x' = m[0][0] x + m[0][1] y + m[0][2]`, `y' = m[1][0] x + m[1][1] y + m[1][2]`.
    Affine([[f64; 3]; 2]),
}

impl Motion {
    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Self::Translation { dx, dy } => (x + dx, y + dy),
            Self::Affine(m) => (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]),
        }
    }

    fn inverse(&self) -> Result<Self> {
        match *self {
            Self::Translation { dx, dy } => Ok(Self::Translation { dx: -dx, dy: -dy }),
            Self::Affine(m) => {
                let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                if det.abs() < 1e-12 || !det.is_finite() {
                    return Err(CgcvError::Spec("affine motion is singular".into()));
                }
                let (a, b, d, e) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
                let (c, f) = (m[0][2], m[1][2]);
                Ok(Self::Affine([[a, b, -(a * c + b * f)], [d, e, -(d * c + e * f)]]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub motion: Motion,
    pub duplicate_patch: bool,
}

/// Square region in reference-frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PatchRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x..self.x + self.size).contains(&x) && (self.y..self.y + self.size).contains(&y)
    }
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub pair: ImagePair,
    pub flow: FlowField<f64>,
    /// Source patch and its copy, when `duplicate_patch` is set.
    pub patches: Option<[PatchRect; 2]>,
}

const COMPONENTS: usize = 5;
const MAX_FREQ: i32 = 3;

/// Periodic RGB texture on a `width x height` torus.
#[derive(Debug, Clone)]
pub struct Texture {
    width: f64,
    height: f64,
    /// Per channel: `(fx, fy, phase, amplitude)`.
    waves: [[(f64, f64, f64, f64); COMPONENTS]; 3],
}

impl Texture {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = [[(0.0, 0.0, 0.0, 0.0); COMPONENTS]; 3];
        for ch in &mut waves {
            for w in ch.iter_mut() {
                let (fx, fy) = loop {
                    let fx = rng.gen_range(-MAX_FREQ..=MAX_FREQ);
                    let fy = rng.gen_range(-MAX_FREQ..=MAX_FREQ);
                    if (fx, fy) != (0, 0) {
                        break (fx, fy);
                    }
                };
                *w = (fx as f64, fy as f64, rng.gen_range(0.0..TAU), rng.gen_range(0.3..1.0));
            }
        }
        Self { width: width as f64, height: height as f64, waves }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        for (o, ch) in out.iter_mut().zip(&self.waves) {
            let norm: f64 = ch.iter().map(|w| w.3).sum();
            let s: f64 = ch
                .iter()
                .map(|&(fx, fy, ph, a)| a * (TAU * (fx * x / self.width + fy * y / self.height) + ph).cos())
                .sum();
            *o = (0.5 + 0.5 * s / norm) as f32;
        }
        out
    }
}

fn align_down(n: usize) -> usize {
    n / GRID * GRID
}

/// Fixed, grid-aligned source and copy locations for a frame size.
pub fn duplicate_patches(width: usize, height: usize) -> Result<[PatchRect; 2]> {
    if width < 32 || height < 32 {
        return Err(CgcvError::Spec(format!("duplicate patches need at least 32x32, got {width}x{height}")));
    }
    let size = align_down(width.min(height) / 4).max(GRID);
    let y = align_down(height / 4);
    let a = PatchRect { x: align_down(width / 8), y, size };
    let b = PatchRect { x: align_down(width / 2 + width / 8), y, size };
    Ok([a, b])
}

struct Scene {
    tex: Texture,
    patches: Option<[PatchRect; 2]>,
    width: f64,
    height: f64,
}

impl Scene {
    /// Reference content at `(x, y)`; inside the copy, samples the source
    /// patch at the same local offset.
    fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        if let Some([src, dst]) = self.patches {
            let (wx, wy) = (x.rem_euclid(self.width), y.rem_euclid(self.height));
            let (lx, ly) = (wx - dst.x as f64, wy - dst.y as f64);
            let s = dst.size as f64;
            if (0.0..s).contains(&lx) && (0.0..s).contains(&ly) {
                return self.tex.sample(src.x as f64 + lx, src.y as f64 + ly);
            }
        }
        self.tex.sample(x, y)
    }
}

pub fn synth_pair(spec: &SynthSpec) -> Result<SynthPair> {
    let (w, h) = (spec.width, spec.height);
    if w == 0 || h == 0 {
        return Err(CgcvError::Spec("empty frame".into()));
    }
    let inv = spec.motion.inverse()?;
    let mut inside = 0usize;
    let flow = FlowField::from_fn(h, w, |y, x| {
        let (tx, ty) = spec.motion.apply(x as f64, y as f64);
        if (0.0..=(w - 1) as f64).contains(&tx) && (0.0..=(h - 1) as f64).contains(&ty) {
            inside += 1;
        }
        (tx - x as f64, ty - y as f64)
    });
    if 2 * inside < w * h {
        return Err(CgcvError::Spec(format!(
            "motion keeps {inside} of {} pixels in frame, fewer than half",
            w * h
        )));
    }
    let patches = if spec.duplicate_patch { Some(duplicate_patches(w, h)?) } else { None };
    let scene = Scene { tex: Texture::new(w, h, spec.seed), patches, width: w as f64, height: h as f64 };
    let reference = Image::from_fn(h, w, |y, x| scene.sample(x as f64, y as f64));
    let target = Image::from_fn(h, w, |y, x| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        scene.sample(sx, sy)
    });
    Ok(SynthPair { pair: ImagePair::new(reference, target)?, flow, patches })
}

/// `count` translation pairs with shifts drawn uniformly from the disc of
/// radius `max_shift`, each on its own texture.
pub fn translation_set(
    count: usize,
    width: usize,
    height: usize,
    max_shift: f64,
    duplicate_patch: bool,
    seed: u64,
) -> Result<Vec<SynthPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (dx, dy) = loop {
                let dx = rng.gen_range(-max_shift..=max_shift);
                let dy = rng.gen_range(-max_shift..=max_shift);
                if dx * dx + dy * dy <= max_shift * max_shift {
                    break (dx, dy);
                }
            };
            synth_pair(&SynthSpec {
                width,
                height,
                seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
                motion: Motion::Translation { dx, dy },
                duplicate_patch,
            })
        })
        .collect()
}

const SPEC_KEYS: [&str; 6] = ["width", "height", "seed", "motion", "duplicate_patch", "count"];

/// Reads a spec file. `motion` is `translation DX DY`, `affine A B C D E F`,
/// or `random-translation MAX` (one draw per pair); `count` defaults to 1.
pub fn parse_synth_specs(text: &str) -> Result<Vec<SynthSpec>> {
    let cfg = ConfigFile::parse(text)?;
    cfg.check_keys(&SPEC_KEYS).map_err(|e| CgcvError::Spec(e.to_string()))?;
    let need = |k: &str| cfg.parsed::<usize>(k)?.ok_or_else(|| CgcvError::Spec(format!("spec lacks {k}")));
    let (width, height) = (need("width")?, need("height")?);
    let seed = cfg.parsed::<u64>("seed")?.unwrap_or(0);
    let count = cfg.parsed::<usize>("count")?.unwrap_or(1);
    let duplicate_patch = cfg.get("duplicate_patch").map(parse_switch).transpose()?.unwrap_or(false);
    let motion_text = cfg.get("motion").unwrap_or("translation 0 0");
    let mut words = motion_text.split_whitespace();
    let kind = words.next().unwrap_or("");
    let nums: Vec<f64> = words
        .map(|w| w.parse().map_err(|_| CgcvError::Spec(format!("bad number {w:?} in motion"))))
        .collect::<Result<_>>()?;
    let arity = |n: usize| {
        if nums.len() == n {
            Ok(())
        } else {
            Err(CgcvError::Spec(format!("motion {kind} takes {n} numbers, got {}", nums.len())))
        }
    };
    match kind {
        "translation" => {
            arity(2)?;
            let motion = Motion::Translation { dx: nums[0], dy: nums[1] };
            Ok((0..count)
                .map(|i| SynthSpec { width, height, seed: seed.wrapping_add(i as u64), motion, duplicate_patch })
                .collect())
        }
        "affine" => {
            arity(6)?;
            let motion = Motion::Affine([[nums[0], nums[1], nums[2]], [nums[3], nums[4], nums[5]]]);
            Ok((0..count)
                .map(|i| SynthSpec { width, height, seed: seed.wrapping_add(i as u64), motion, duplicate_patch })
                .collect())
        }
        "random-translation" => {
            arity(1)?;
            let max = nums[0];
            if !(max >= 0.0) {
                return Err(CgcvError::Spec("random-translation needs a non-negative bound".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..count)
                .map(|i| {
                    let (dx, dy) = loop {
                        let dx = rng.gen_range(-max..=max);
                        let dy = rng.gen_range(-max..=max);
                        if dx * dx + dy * dy <= max * max {
                            break (dx, dy);
                        }
                    };
                    SynthSpec {
                        width,
                        height,
                        seed: seed.wrapping_add(i as u64),
                        motion: Motion::Translation { dx, dy },
                        duplicate_patch,
                    }
                })
                .collect())
        }
        _ => Err(CgcvError::Spec(format!("unknown motion {kind:?}"))),
    }
}

fn stem(dir: &Path, i: usize) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(format!("{i:04}_ref.ppm")), dir.join(format!("{i:04}_tgt.ppm")), dir.join(format!("{i:04}_flow.flo")))
}

/// Writes `NNNN_ref.ppm`, `NNNN_tgt.ppm` and `NNNN_flow.flo` per pair.
pub fn write_dataset(dir: &Path, pairs: &[SynthPair]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, p) in pairs.iter().enumerate() {
        let (r, t, f) = stem(dir, i);
        write_atomic(&r, |w| write_ppm(&p.pair.reference, w))?;
        write_atomic(&t, |w| write_ppm(&p.pair.target, w))?;
        write_atomic(&f, |w| write_flo(&p.flow.cast(), w))?;
    }
    Ok(())
}

/// Loads every `NNNN_*` triple written by [`write_dataset`], in index order.
pub fn read_dataset(dir: &Path) -> Result<Vec<(ImagePair, FlowField<f32>)>> {
    let mut out = Vec::new();
    loop {
        let (r, t, f) = stem(dir, out.len());
        if !r.exists() {
            break;
        }
        let pair = ImagePair::new(read_image(&r)?, read_image(&t)?)?;
        let flow = read_flo(std::fs::File::open(&f)?)?;
        if (flow.height(), flow.width()) != (pair.reference.height, pair.reference.width) {
            return Err(CgcvError::Dimension(format!("{} does not match its frames", f.display())));
        }
        out.push((pair, flow));
    }
    if out.is_empty() {
        return Err(CgcvError::Usage(format!("no 0000_ref.ppm in {}", dir.display())));
    }
    Ok(out)
}
