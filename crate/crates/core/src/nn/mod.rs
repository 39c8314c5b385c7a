//! Minimal CPU neural-network layers in f64 with hand-written backward
//! passes. Every layer caches what its backward needs during forward;
//! gradients accumulate into [`Param::g`] until explicitly zeroed.

pub mod layers;

use rand::Rng;

use crate::grid::Grid2;
use crate::rng::SeedRng;

/// Channel-major dense tensor, `data[(c * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    /// 1-channel tensor from a grid.
    pub fn from_grid(g: &Grid2<f64>) -> Self {
        Self {
            c: 1,
            h: g.rows(),
            w: g.cols(),
            data: g.as_slice().to_vec(),
        }
    }

    /// Feature vector as a `(n, 1, 1)` tensor.
    pub fn from_vec(v: Vec<f64>) -> Self {
        Self {
            c: v.len(),
            h: 1,
            w: 1,
            data: v,
        }
    }

    /// First channel as a grid (for single-channel outputs).
    pub fn to_grid(&self) -> Grid2<f64> {
        Grid2::from_vec(self.h, self.w, self.data[..self.h * self.w].to_vec()).unwrap()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Channel concatenation.
    pub fn concat(parts: &[&Tensor]) -> Tensor {
        let (h, w) = (parts[0].h, parts[0].w);
        debug_assert!(parts.iter().all(|p| p.h == h && p.w == w));
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor { c, h, w, data }
    }

    /// Splits channels at `at`, returning the two halves.
    pub fn split(&self, at: usize) -> (Tensor, Tensor) {
        debug_assert!(at <= self.c);
        let plane = self.h * self.w;
        let a = Tensor {
            c: at,
            h: self.h,
            w: self.w,
            data: self.data[..at * plane].to_vec(),
        };
        let b = Tensor {
            c: self.c - at,
            h: self.h,
            w: self.w,
            data: self.data[at * plane..].to_vec(),
        };
        (a, b)
    }
}

/// Trainable tensor: values plus a gradient accumulator of equal length.
#[derive(Debug, Clone)]
pub struct Param {
    pub w: Vec<f64>,
    pub g: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            w: vec![0.0; n],
            g: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    /// Fan-in-scaled uniform init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(shape: &[usize], fan_in: usize, rng: &mut SeedRng) -> Self {
        let mut p = Self::zeros(shape);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        for w in p.w.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.g.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Callback receiving every named parameter of a module tree.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

/// Smooth GELU activation (tanh approximation).
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sinusoidal position encoding of a timestep index.
pub fn time_embedding(i: usize, dim: usize) -> Vec<f64> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64).ln() * j as f64 / half as f64).exp();
        out[2 * j] = (i as f64 * freq).sin();
        out[2 * j + 1] = (i as f64 * freq).cos();
    }
    out
}
