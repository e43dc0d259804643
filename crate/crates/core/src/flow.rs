use crate::error::{CgcvError, Result};
use crate::tensor::Real;

/// Per-cell displacement `(u, v)`: `u` along columns, `v` along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    height: usize,
    width: usize,
    u: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> FlowField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, u: vec![T::zero(); height * width], v: vec![T::zero(); height * width] }
    }

    pub fn constant(height: usize, width: usize, u: T, v: T) -> Self {
        Self { height, width, u: vec![u; height * width], v: vec![v; height * width] }
    }

    pub fn from_parts(height: usize, width: usize, u: Vec<T>, v: Vec<T>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(CgcvError::Dimension(format!(
                "flow {height}x{width} needs {} values per component, got {} and {}",
                height * width,
                u.len(),
                v.len()
            )));
        }
        Ok(Self { height, width, u, v })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (T, T)) -> Self {
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                out.u[y * width + x] = u;
                out.v[y * width + x] = v;
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[T] {
        &self.u
    }

    pub fn v(&self) -> &[T] {
        &self.v
    }

    pub fn u_mut(&mut self) -> &mut [T] {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut [T] {
        &mut self.v
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (T, T) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.height, self.width), (other.height, other.width));
        for (a, &b) in self.u.iter_mut().zip(&other.u) {
            *a += b;
        }
        for (a, &b) in self.v.iter_mut().zip(&other.v) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|x| U::lit(x.to_f64_lossless())).collect(),
            v: self.v.iter().map(|x| U::lit(x.to_f64_lossless())).collect(),
        }
    }

    /// Mean endpoint error against `other`, in double precision.
    pub fn epe(&self, other: &Self) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(CgcvError::Dimension(format!(
                "EPE between {}x{} and {}x{} flows",
                self.height, self.width, other.height, other.width
            )));
        }
        let n = self.u.len();
        if n == 0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for i in 0..n {
            let du = self.u[i].to_f64_lossless() - other.u[i].to_f64_lossless();
            let dv = self.v[i].to_f64_lossless() - other.v[i].to_f64_lossless();
            total += (du * du + dv * dv).sqrt();
        }
        Ok(total / n as f64)
    }

    /// Keeps the top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(CgcvError::Dimension(format!(
                "cannot crop {}x{} flow to {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x| self.get(y, x)))
    }
}
