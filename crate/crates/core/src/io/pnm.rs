//! Binary PPM (P6) and PGM (P5).

use std::io::Write;

use crate::encoder::Image;
use crate::error::{CgcvError, Result};

/// 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
    token: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.buf.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.buf.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        self.token = start;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(CgcvError::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| CgcvError::format(start, format!("{what} out of range")))
    }
}

/// Decodes P5/P6 into an RGB image in `[0, 1]`; grayscale is replicated.
pub fn decode_image(buf: &[u8]) -> Result<Image> {
    let channels = match buf.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(CgcvError::format(0, "expected P5 or P6 magic")),
    };
    let mut h = Header { buf, pos: 2, token: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maximum value")?;
    if maxval == 0 || maxval > 65535 {
        return Err(CgcvError::format(h.token, format!("maximum value {maxval} not in 1..=65535")));
    }
    match buf.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(CgcvError::format(h.pos, "expected whitespace after header")),
    }
    if width == 0 || height == 0 {
        return Err(CgcvError::format(2, format!("empty image {width}x{height}")));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels * bytes_per))
        .ok_or_else(|| CgcvError::format(2, "dimensions overflow"))?;
    let payload = &buf[h.pos..];
    if payload.len() < expected {
        return Err(CgcvError::format(
            h.pos,
            format!("payload truncated: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let scale = 1.0 / maxval as f32;
    let sample = |i: usize| -> Result<f32> {
        let v = if bytes_per == 2 {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as usize
        } else {
            payload[i] as usize
        };
        if v > maxval {
            return Err(CgcvError::format(h.pos + i * bytes_per, format!("sample {v} exceeds maximum {maxval}")));
        }
        Ok(v as f32 * scale)
    };
    let mut data = Vec::with_capacity(width * height * 3);
    for p in 0..width * height {
        if channels == 3 {
            for c in 0..3 {
                data.push(sample(3 * p + c)?);
            }
        } else {
            let g = sample(p)?;
            data.extend_from_slice(&[g, g, g]);
        }
    }
    Image::new(height, width, data)
}

pub fn read_image(path: &std::path::Path) -> Result<Image> {
    let buf = std::fs::read(path)?;
    decode_image(&buf)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm<W: Write>(img: &Image, mut w: W) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend(img.data.iter().map(|&v| quantize(v)));
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_pgm<W: Write>(img: &GrayImage, mut w: W) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.data);
    w.write_all(&buf)?;
    Ok(())
}

pub fn decode_gray(buf: &[u8]) -> Result<GrayImage> {
    if buf.get(..2) != Some(b"P5") {
        return Err(CgcvError::format(0, "expected P5 magic"));
    }
    let img = decode_image(buf)?;
    let data = img.data.chunks_exact(3).map(|p| quantize(p[0])).collect();
    Ok(GrayImage { height: img.height, width: img.width, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_p6() {
        let mut buf = b"P6\n2 2\n255\n".to_vec();
        buf.extend([255u8; 12]);
        let img = decode_image(&buf).unwrap();
        assert_eq!((img.height, img.width), (2, 2));
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn p5_replicates_and_skips_comments() {
        let buf = b"P5 # made by hand\n3 1\n# max\n255\n\x00\x80\xff";
        let img = decode_image(buf).unwrap();
        for x in 0..3 {
            let [r, g, b] = img.pixel(0, x);
            assert_eq!(r, g);
            assert_eq!(g, b);
        }
        assert_eq!(img.pixel(0, 1)[0], 128.0 / 255.0);
    }

    #[test]
    fn truncated_payload_names_counts() {
        let mut buf = b"P6\n2 2\n255\n".to_vec();
        buf.extend([0u8; 11]);
        match decode_image(&buf) {
            Err(CgcvError::Format { offset, message }) => {
                assert_eq!(offset, 11);
                assert!(message.contains("12") && message.contains("11"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_headers() {
        assert!(matches!(decode_image(b"P3\n1 1\n255\n"), Err(CgcvError::Format { offset: 0, .. })));
        assert!(matches!(decode_image(b"P6\nx 1\n255\n"), Err(CgcvError::Format { offset: 3, .. })));
        assert!(matches!(decode_image(b"P6\n1 1\n0\n\0\0\0"), Err(CgcvError::Format { offset: 7, .. })));
        assert!(matches!(decode_image(b"P5\n1 1\n200\n\xff"), Err(CgcvError::Format { offset: 11, .. })));
    }

    #[test]
    fn sixteen_bit_samples() {
        let buf = b"P5\n1 1\n65535\n\xff\xff";
        assert_eq!(decode_image(buf).unwrap().data, vec![1.0; 3]);
    }

    #[test]
    fn write_then_read() {
        let img = Image::from_fn(3, 2, |y, x| [y as f32 / 2.0, x as f32, 0.2]);
        let mut buf = Vec::new();
        write_ppm(&img, &mut buf).unwrap();
        let back = decode_image(&buf).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let g = GrayImage { height: 1, width: 2, data: vec![7, 200] };
        let mut buf = Vec::new();
        write_pgm(&g, &mut buf).unwrap();
        assert_eq!(decode_gray(&buf).unwrap(), g);
    }
}
