//! Flow color coding, volume plane dumps and feature channel images.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::encoder::Image;
use crate::error::{CgcvError, Result};
use crate::flow::FlowField;
use crate::io::pnm::GrayImage;
use crate::model::VolumeParts;
use crate::tensor::{CorrVolume4, FeatureMap, Real};

/// Middlebury color wheel: red, yellow, green, cyan, blue, magenta segments.
fn color_wheel() -> Vec<[f64; 3]> {
    const SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
        (15, [255.0, 0.0, 0.0], [0.0, 255.0, 0.0]),
        (6, [255.0, 255.0, 0.0], [-255.0, 0.0, 0.0]),
        (4, [0.0, 255.0, 0.0], [0.0, 0.0, 255.0]),
        (11, [0.0, 255.0, 255.0], [0.0, -255.0, 0.0]),
        (13, [0.0, 0.0, 255.0], [255.0, 0.0, 0.0]),
        (6, [255.0, 0.0, 255.0], [0.0, 0.0, -255.0]),
    ];
    let mut wheel = Vec::with_capacity(55);
    for (n, base, step) in SEGMENTS {
        for i in 0..n {
            let f = (255.0 * i as f64 / n as f64).floor() / 255.0;
            wheel.push([base[0] + step[0] * f, base[1] + step[1] * f, base[2] + step[2] * f]);
        }
    }
    wheel
}

/// Color for a displacement already divided by the field's maximum magnitude.
fn wheel_color(wheel: &[[f64; 3]], u: f64, v: f64) -> [f32; 3] {
    let ncols = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
    let k0 = (fk.floor() as usize) % ncols;
    let k1 = (k0 + 1) % ncols;
    let f = fk - fk.floor();
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        out[c] = col as f32;
    }
    out
}

/// Standard flow color coding: hue from direction, saturation from magnitude
/// normalized by the largest magnitude in the field. Zero flow is white.
pub fn flow_to_color<T: Real>(flow: &FlowField<T>) -> Image {
    let wheel = color_wheel();
    let mut max_rad = 0.0f64;
    for (u, v) in flow.u().iter().zip(flow.v()) {
        let (u, v) = (u.to_f64_lossless(), v.to_f64_lossless());
        if u.is_finite() && v.is_finite() {
            max_rad = max_rad.max((u * u + v * v).sqrt());
        }
    }
    Image::from_fn(flow.height(), flow.width(), |y, x| {
        let (u, v) = flow.get(y, x);
        let (u, v) = (u.to_f64_lossless(), v.to_f64_lossless());
        if max_rad == 0.0 || !u.is_finite() || !v.is_finite() {
            return [1.0; 3];
        }
        wheel_color(&wheel, u / max_rad, v / max_rad)
    })
}

pub fn write_png<W: Write>(img: &Image, w: W) -> Result<()> {
    let to_err = |e: png::EncodingError| CgcvError::Io(std::io::Error::other(e));
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(to_err)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    writer.write_image_data(&bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(())
}

/// Term of the volume assembly to visualize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeSource {
    C,
    A,
    M,
    S,
    V,
}

impl fmt::Display for VolumeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::C => "C",
            Self::A => "A",
            Self::M => "M",
            Self::S => "S",
            Self::V => "V",
        };
        f.write_str(s)
    }
}

impl FromStr for VolumeSource {
    type Err = CgcvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C" | "c" => Ok(Self::C),
            "A" | "a" => Ok(Self::A),
            "M" | "m" => Ok(Self::M),
            "S" | "s" => Ok(Self::S),
            "V" | "v" => Ok(Self::V),
            _ => Err(CgcvError::Usage(format!("unknown volume term {s:?}, expected C, A, M, S or V"))),
        }
    }
}

impl VolumeSource {
    pub fn select<'a, T>(&self, parts: &'a VolumeParts<T>) -> Result<&'a CorrVolume4<T>> {
        let missing = |what: &str| CgcvError::Config(format!("{self} is not computed when {what} is off"));
        match self {
            Self::C => Ok(&parts.c),
            Self::A => parts.a.as_ref().ok_or_else(|| missing("gating")),
            Self::M => parts.m.as_ref().ok_or_else(|| missing("gating")),
            Self::S => parts.s.as_ref().ok_or_else(|| missing("lifting")),
            Self::V => Ok(&parts.v),
        }
    }
}

/// Min-max normalization to `0..=255`; a constant input maps to 128.
pub fn normalize_to_gray<T: Real>(height: usize, width: usize, values: &[T]) -> GrayImage {
    let vals: Vec<f64> = values.iter().map(|v| v.to_f64_lossless()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = if !(hi > lo) {
        vec![128; vals.len()]
    } else {
        vals.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
    };
    GrayImage { height, width, data }
}

/// The target-grid plane of reference cell `(y1, x1)` as a grayscale image.
pub fn dump_plane<T: Real>(vol: &CorrVolume4<T>, y1: usize, x1: usize) -> Result<GrayImage> {
    let [h1, w1, h2, w2] = vol.dims();
    if y1 >= h1 || x1 >= w1 {
        return Err(CgcvError::Index(format!("query ({y1}, {x1}) outside the {h1}x{w1} reference grid")));
    }
    Ok(normalize_to_gray(h2, w2, vol.plane(y1, x1)))
}

pub fn channel_image<T: Real>(map: &FeatureMap<T>, c: usize) -> Result<GrayImage> {
    if c >= map.channels() {
        return Err(CgcvError::Index(format!("channel {c} of {}", map.channels())));
    }
    Ok(normalize_to_gray(map.height(), map.width(), map.channel(c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hue(p: [f32; 3]) -> f64 {
        let [r, g, b] = p.map(|v| v as f64);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        let h = if max == r {
            ((g - b) / d).rem_euclid(6.0)
        } else if max == g {
            (b - r) / d + 2.0
        } else {
            (r - g) / d + 4.0
        };
        h * 60.0
    }

    #[test]
    fn wheel_has_55_entries_starting_red() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [255.0, 0.0, 0.0]);
        assert_eq!(w[15], [255.0, 255.0, 0.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::<f32>::zeros(3, 4));
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_direction_is_one_color() {
        let img = flow_to_color(&FlowField::from_fn(3, 3, |y, x| (1.0 + (y * 3 + x) as f32, 0.0)));
        let first = hue(img.pixel(0, 0));
        for y in 0..3 {
            for x in 0..3 {
                assert!((hue(img.pixel(y, x)) - first).abs() < 1e-6);
            }
        }
        // the largest vector sits on the rim of the wheel, fully saturated
        let rim = img.pixel(2, 2);
        assert!(rim.iter().any(|&c| c < 1e-6));
    }

    #[test]
    fn opposite_vectors_are_complementary() {
        for (u, v) in [(1.0f32, 0.0), (0.0, 1.0), (0.6, -0.8), (-0.3, 0.95)] {
            let img = flow_to_color(&FlowField::from_fn(1, 2, |_, x| if x == 0 { (u, v) } else { (-u, -v) }));
            let d = (hue(img.pixel(0, 0)) - hue(img.pixel(0, 1))).rem_euclid(360.0);
            assert!((d - 180.0).abs() < 35.0, "({u}, {v}) hue gap {d}");
        }
    }

    #[test]
    fn plane_normalization() {
        let flat = CorrVolume4::<f64>::filled([1, 1, 2, 3], 0.7);
        assert!(dump_plane(&flat, 0, 0).unwrap().data.iter().all(|&v| v == 128));
        let spike = CorrVolume4::from_fn([1, 1, 2, 3], |_, _, y, x| if (y, x) == (1, 0) { 5.0 } else { -1.0 });
        let g = dump_plane(&spike, 0, 0).unwrap();
        assert_eq!(g.data, vec![0, 0, 0, 255, 0, 0]);
        assert!(matches!(dump_plane(&spike, 1, 0), Err(CgcvError::Index(_))));
    }

    #[test]
    fn plane_dump_ignores_positive_affine_rescaling() {
        let v = CorrVolume4::from_fn([2, 2, 3, 3], |a, b, c, d| ((a * 7 + b * 5 + c * 3 + d) as f64).sin());
        let w = v.map(|x| 3.5 * x - 2.0);
        for (y, x) in [(0, 0), (1, 1)] {
            let (a, b) = (dump_plane(&v, y, x).unwrap(), dump_plane(&w, y, x).unwrap());
            assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.abs_diff(*q) <= 1));
        }
    }

    #[test]
    fn png_signature() {
        let mut buf = Vec::new();
        write_png(&Image::from_fn(2, 2, |_, _| [1.0, 0.0, 0.5]), &mut buf).unwrap();
        assert_eq!(&buf[..8], b"\x89PNG\r\n\x1a\n");
    }
}
