//! Minimal dense 4-d tensor in NCHW layout.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{RelitError, Result};

/// Contiguous `f64` tensor indexed as (batch, channel, row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(RelitError::DimensionMismatch(format!(
                "tensor {}x{}x{}x{} needs {} values, got {}",
                n,
                c,
                h,
                w,
                n * c * h * w,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(RelitError::InvalidArgument(
                "tensor data contains a non-finite value".into(),
            ));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        *t.at_mut(ni, ci, y, x) = f(ni, ci, y, x);
                    }
                }
            }
        }
        t
    }

    /// Entries drawn i.i.d. from `N(0, scale^2)`.
    pub fn seeded_normal(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        for v in t.data.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v = scale * g;
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && y < self.h && x < self.w);
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.index(n, c, y, x);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Tensor4) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = f(*v);
        }
        out
    }

    /// Elementwise combine; dims must match.
    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_dims(other) {
            return Err(RelitError::DimensionMismatch(format!(
                "tensor dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let mut out = self.clone();
        for (v, o) in out.data.iter_mut().zip(&other.data) {
            *v = f(*v, *o);
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor4) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
