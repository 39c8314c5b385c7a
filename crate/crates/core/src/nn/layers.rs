//! Layer implementations. Forward passes cache what backward needs; backward
//! returns the input gradient and accumulates parameter gradients.

use super::{gelu, gelu_grad, sigmoid, Param, ParamVisitor, Tensor};
use crate::rng::SeedRng;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything holding trainable parameters.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor);

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

/// Border handling for out-of-range taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// Standard 2-D convolution, square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
    pub w: Param,
    pub b: Param,
    cache_x: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
        rng: &mut SeedRng,
    ) -> Self {
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            padding,
            w: Param::uniform(&[out_c, in_c, k, k], in_c * k * k, rng),
            b: Param::zeros(&[out_c]),
            cache_x: None,
        }
    }

    /// Zero-initialized variant (offset branches, residual projections).
    pub fn new_zero(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Self {
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            padding,
            w: Param::zeros(&[out_c, in_c, k, k]),
            b: Param::zeros(&[out_c]),
            cache_x: None,
        }
    }

    /// Input cached by the most recent forward, if any.
    pub fn cached_input(&self) -> Option<&Tensor> {
        self.cache_x.as_ref()
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_c);
        let (oh, ow) = self.out_dims(x.h, x.w);
        let mut out = Tensor::zeros(self.out_c, oh, ow);

        if self.k == 1 && self.stride == 1 && self.pad == 0 {
            // 1x1: pure channel mixing over the plane.
            let plane = x.h * x.w;
            for oc in 0..self.out_c {
                let dst = &mut out.data[oc * plane..(oc + 1) * plane];
                dst.fill(self.b.w[oc]);
                for ic in 0..self.in_c {
                    let wv = self.w.w[oc * self.in_c + ic];
                    let src = &x.data[ic * plane..(ic + 1) * plane];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d += wv * s;
                    }
                }
            }
        } else if self.stride == 1 && self.padding == Padding::Zero {
            // Row-major accumulation: for each (oc, ic, ky, kx) the inner
            // loop is a shifted row AXPY over contiguous memory.
            let (h, w) = (x.h, x.w);
            let pad = self.pad as isize;
            for oc in 0..self.out_c {
                let out_plane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
                out_plane.fill(self.b.w[oc]);
                for ic in 0..self.in_c {
                    let x_plane = &x.data[ic * h * w..(ic + 1) * h * w];
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let wv =
                                self.w.w[((oc * self.in_c + ic) * self.k + ky) * self.k + kx];
                            let dy = ky as isize - pad;
                            let dx = kx as isize - pad;
                            for oy in 0..oh {
                                let iy = oy as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let ox_lo = (-dx).max(0) as usize;
                                let ox_hi = ow.min((w as isize - dx) as usize);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let src =
                                    &x_plane[(iy as usize * w) + (ox_lo as isize + dx) as usize..];
                                let dst = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        } else {
            let (h, w) = (x.h as isize, x.w as isize);
            for oc in 0..self.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = self.b.w[oc];
                        for ic in 0..self.in_c {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    let v = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                        x.at(ic, iy as usize, ix as usize)
                                    } else {
                                        match self.padding {
                                            Padding::Zero => 0.0,
                                            Padding::Replicate => x.at(
                                                ic,
                                                iy.clamp(0, h - 1) as usize,
                                                ix.clamp(0, w - 1) as usize,
                                            ),
                                        }
                                    };
                                    acc += self.w.w
                                        [((oc * self.in_c + ic) * self.k + ky) * self.k + kx]
                                        * v;
                                }
                            }
                        }
                        *out.at_mut(oc, oy, ox) = acc;
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("forward before backward");
        let (oh, ow) = (gout.h, gout.w);
        let mut gx = Tensor::zeros(x.c, x.h, x.w);

        if self.k == 1 && self.stride == 1 && self.pad == 0 {
            let plane = x.h * x.w;
            for oc in 0..self.out_c {
                let go = &gout.data[oc * plane..(oc + 1) * plane];
                self.b.g[oc] += go.iter().sum::<f64>();
                for ic in 0..self.in_c {
                    let src = &x.data[ic * plane..(ic + 1) * plane];
                    let mut wg = 0.0;
                    let wv = self.w.w[oc * self.in_c + ic];
                    let dst = &mut gx.data[ic * plane..(ic + 1) * plane];
                    for ((g, s), d) in go.iter().zip(src.iter()).zip(dst.iter_mut()) {
                        wg += g * s;
                        *d += g * wv;
                    }
                    self.w.g[oc * self.in_c + ic] += wg;
                }
            }
            return gx;
        }

        if self.stride == 1 && self.padding == Padding::Zero {
            let (h, w) = (x.h, x.w);
            let pad = self.pad as isize;
            for oc in 0..self.out_c {
                let go_plane = &gout.data[oc * oh * ow..(oc + 1) * oh * ow];
                self.b.g[oc] += go_plane.iter().sum::<f64>();
                for ic in 0..self.in_c {
                    let x_plane = &x.data[ic * h * w..(ic + 1) * h * w];
                    let gx_plane = &mut gx.data[ic * h * w..(ic + 1) * h * w];
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let widx = ((oc * self.in_c + ic) * self.k + ky) * self.k + kx;
                            let wv = self.w.w[widx];
                            let dy = ky as isize - pad;
                            let dx = kx as isize - pad;
                            let mut wg = 0.0;
                            for oy in 0..oh {
                                let iy = oy as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let ox_lo = (-dx).max(0) as usize;
                                let ox_hi = ow.min((w as isize - dx) as usize);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let base = (iy as usize * w) as isize + dx;
                                let src = &x_plane
                                    [(base + ox_lo as isize) as usize..(base + ox_hi as isize) as usize];
                                let go_row = &go_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                let dst = &mut gx_plane
                                    [(base + ox_lo as isize) as usize..(base + ox_hi as isize) as usize];
                                for ((g, s), d) in go_row.iter().zip(src.iter()).zip(dst.iter_mut())
                                {
                                    wg += g * s;
                                    *d += g * wv;
                                }
                            }
                            self.w.g[widx] += wg;
                        }
                    }
                }
            }
            return gx;
        }

        let (h, w) = (x.h as isize, x.w as isize);
        for oc in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = gout.at(oc, oy, ox);
                    self.b.g[oc] += go;
                    for ic in 0..self.in_c {
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                let widx = ((oc * self.in_c + ic) * self.k + ky) * self.k + kx;
                                let (vy, vx, inside) = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                    (iy as usize, ix as usize, true)
                                } else {
                                    match self.padding {
                                        Padding::Zero => (0, 0, false),
                                        Padding::Replicate => (
                                            iy.clamp(0, h - 1) as usize,
                                            ix.clamp(0, w - 1) as usize,
                                            true,
                                        ),
                                    }
                                };
                                if inside {
                                    self.w.g[widx] += go * x.at(ic, vy, vx);
                                    *gx.at_mut(ic, vy, vx) += go * self.w.w[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// DepthwiseConv2d
// ---------------------------------------------------------------------------

/// Per-channel convolution, stride 1, same zero padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub c: usize,
    pub k: usize,
    pub w: Param,
    pub b: Param,
    cache_x: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new(c: usize, k: usize, rng: &mut SeedRng) -> Self {
        Self {
            c,
            k,
            w: Param::uniform(&[c, k, k], k * k, rng),
            b: Param::zeros(&[c]),
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.c);
        let pad = (self.k / 2) as isize;
        let (h, w) = (x.h, x.w);
        let mut out = Tensor::zeros(self.c, h, w);
        for c in 0..self.c {
            let x_plane = &x.data[c * h * w..(c + 1) * h * w];
            let out_plane = &mut out.data[c * h * w..(c + 1) * h * w];
            out_plane.fill(self.b.w[c]);
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let wv = self.w.w[(c * self.k + ky) * self.k + kx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = w.min((w as isize - dx) as usize);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let src = &x_plane[(iy as usize * w) as usize + (ox_lo as isize + dx) as usize..];
                        let dst = &mut out_plane[oy * w + ox_lo..oy * w + ox_hi];
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("forward before backward");
        let pad = (self.k / 2) as isize;
        let (h, w) = (x.h, x.w);
        let mut gx = Tensor::zeros(x.c, h, w);
        for c in 0..self.c {
            let go_plane = &gout.data[c * h * w..(c + 1) * h * w];
            self.b.g[c] += go_plane.iter().sum::<f64>();
            let x_plane = &x.data[c * h * w..(c + 1) * h * w];
            let gx_plane = &mut gx.data[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let widx = (c * self.k + ky) * self.k + kx;
                    let wv = self.w.w[widx];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let mut wg = 0.0;
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = w.min((w as isize - dx) as usize);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let base = (iy as usize * w) as isize + dx;
                        let src =
                            &x_plane[(base + ox_lo as isize) as usize..(base + ox_hi as isize) as usize];
                        let go_row = &go_plane[oy * w + ox_lo..oy * w + ox_hi];
                        let dst = &mut gx_plane
                            [(base + ox_lo as isize) as usize..(base + ox_hi as isize) as usize];
                        for ((g, s), d) in go_row.iter().zip(src.iter()).zip(dst.iter_mut()) {
                            wg += g * s;
                            *d += g * wv;
                        }
                    }
                    self.w.g[widx] += wg;
                }
            }
        }
        gx
    }
}

impl Module for DepthwiseConv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// DeformConv2d
// ---------------------------------------------------------------------------

/// Deformable convolution: a regular convolution branch predicts per-position,
/// per-tap 2-D offsets; taps sample the input bilinearly at
/// `p + g_k + offset_k(p)` with coordinates clamped at the borders.
///
/// With the offset branch at its zero init this is exactly a standard
/// convolution with replicate padding (shared accumulation order, bit for bit).
#[derive(Debug, Clone)]
pub struct DeformConv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub offset_conv: Conv2d,
    pub w: Param,
    pub b: Param,
    cache: Option<(Tensor, Tensor)>,
}

impl DeformConv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, rng: &mut SeedRng) -> Self {
        debug_assert!(k % 2 == 1, "deformable kernels are odd-sized");
        Self {
            in_c,
            out_c,
            k,
            offset_conv: Conv2d::new_zero(in_c, 2 * k * k, k, 1, k / 2, Padding::Zero),
            w: Param::uniform(&[out_c, in_c, k, k], in_c * k * k, rng),
            b: Param::zeros(&[out_c]),
            cache: None,
        }
    }

    /// Bilinear sample with clamped coordinates. Returns the value and the
    /// pieces backward needs: corner indices, fractions, and whether each
    /// coordinate was inside the border (clamp kills its gradient).
    #[inline]
    #[allow(clippy::type_complexity)]
    fn sample(x: &Tensor, c: usize, sy: f64, sx: f64) -> (f64, (usize, usize, f64, f64, bool, bool)) {
        let (h, w) = (x.h, x.w);
        let inside_y = sy >= 0.0 && sy <= (h - 1) as f64;
        let inside_x = sx >= 0.0 && sx <= (w - 1) as f64;
        let cy = sy.clamp(0.0, (h - 1) as f64);
        let cx = sx.clamp(0.0, (w - 1) as f64);
        let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
        let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
        let fy = cy - y0 as f64;
        let fx = cx - x0 as f64;
        let v00 = x.at(c, y0, x0);
        let v01 = x.at(c, y0, x0 + 1);
        let v10 = x.at(c, y0 + 1, x0);
        let v11 = x.at(c, y0 + 1, x0 + 1);
        let v = v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx;
        (v, (y0, x0, fy, fx, inside_y, inside_x))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_c);
        debug_assert!(x.h >= 2 && x.w >= 2 && x.h >= self.k && x.w >= self.k);
        let off = self.offset_conv.forward(x);
        let pad = (self.k / 2) as f64;
        let kk = self.k * self.k;
        let mut out = Tensor::zeros(self.out_c, x.h, x.w);
        // Sample buffer per position, shared across out channels: [ic * kk + t].
        let mut samples = vec![0.0f64; self.in_c * kk];
        for oy in 0..x.h {
            for ox in 0..x.w {
                for t in 0..kk {
                    let (ky, kx) = (t / self.k, t % self.k);
                    let sy = oy as f64 + ky as f64 - pad + off.at(2 * t, oy, ox);
                    let sx = ox as f64 + kx as f64 - pad + off.at(2 * t + 1, oy, ox);
                    for ic in 0..self.in_c {
                        samples[ic * kk + t] = Self::sample(x, ic, sy, sx).0;
                    }
                }
                for oc in 0..self.out_c {
                    let row = &self.w.w[oc * self.in_c * kk..(oc + 1) * self.in_c * kk];
                    let mut acc = self.b.w[oc];
                    for (wv, s) in row.iter().zip(samples.iter()) {
                        acc += wv * s;
                    }
                    *out.at_mut(oc, oy, ox) = acc;
                }
            }
        }
        self.cache = Some((x.clone(), off));
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let (x, off) = self.cache.take().expect("forward before backward");
        let pad = (self.k / 2) as f64;
        let kk = self.k * self.k;
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        let mut goff = Tensor::zeros(off.c, off.h, off.w);
        let mut samples = vec![0.0f64; self.in_c * kk];
        let mut gsample = vec![0.0f64; self.in_c * kk];
        let mut geometry = vec![(0usize, 0usize, 0.0f64, 0.0f64, false, false); self.in_c * kk];

        for oy in 0..x.h {
            for ox in 0..x.w {
                for t in 0..kk {
                    let (ky, kx) = (t / self.k, t % self.k);
                    let sy = oy as f64 + ky as f64 - pad + off.at(2 * t, oy, ox);
                    let sx = ox as f64 + kx as f64 - pad + off.at(2 * t + 1, oy, ox);
                    for ic in 0..self.in_c {
                        let (v, geo) = Self::sample(&x, ic, sy, sx);
                        samples[ic * kk + t] = v;
                        geometry[ic * kk + t] = geo;
                    }
                }
                gsample.iter_mut().for_each(|g| *g = 0.0);
                for oc in 0..self.out_c {
                    let go = gout.at(oc, oy, ox);
                    self.b.g[oc] += go;
                    let row = &self.w.w[oc * self.in_c * kk..(oc + 1) * self.in_c * kk];
                    let grow = &mut self.w.g[oc * self.in_c * kk..(oc + 1) * self.in_c * kk];
                    for k in 0..self.in_c * kk {
                        grow[k] += go * samples[k];
                        gsample[k] += go * row[k];
                    }
                }
                for t in 0..kk {
                    let mut goff_y = 0.0;
                    let mut goff_x = 0.0;
                    for ic in 0..self.in_c {
                        let gs = gsample[ic * kk + t];
                        let (y0, x0, fy, fx, iny, inx) = geometry[ic * kk + t];
                        let v00 = x.at(ic, y0, x0);
                        let v01 = x.at(ic, y0, x0 + 1);
                        let v10 = x.at(ic, y0 + 1, x0);
                        let v11 = x.at(ic, y0 + 1, x0 + 1);
                        *gx.at_mut(ic, y0, x0) += gs * (1.0 - fy) * (1.0 - fx);
                        *gx.at_mut(ic, y0, x0 + 1) += gs * (1.0 - fy) * fx;
                        *gx.at_mut(ic, y0 + 1, x0) += gs * fy * (1.0 - fx);
                        *gx.at_mut(ic, y0 + 1, x0 + 1) += gs * fy * fx;
                        if iny {
                            goff_y += gs * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                        }
                        if inx {
                            goff_x += gs * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                        }
                    }
                    *goff.at_mut(2 * t, oy, ox) += goff_y;
                    *goff.at_mut(2 * t + 1, oy, ox) += goff_x;
                }
            }
        }
        gx.add_assign(&self.offset_conv.backward(&goff));
        gx
    }
}

impl Module for DeformConv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.offset_conv.visit_params(&join(prefix, "offset"), f);
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// LayerNorm2d
// ---------------------------------------------------------------------------

/// Layer normalization over the channel dimension at each spatial position,
/// with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub c: usize,
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
    cache: Option<(Tensor, Vec<f64>, Vec<f64>)>,
}

impl LayerNorm2d {
    pub fn new(c: usize) -> Self {
        let mut gamma = Param::zeros(&[c]);
        gamma.w.iter_mut().for_each(|w| *w = 1.0);
        Self {
            c,
            gamma,
            beta: Param::zeros(&[c]),
            eps: 1e-6,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.c);
        let plane = x.h * x.w;
        let cf = self.c as f64;
        // Channel-sequential accumulation keeps memory access contiguous.
        let mut means = vec![0.0; plane];
        let mut inv_stds = vec![0.0; plane];
        for c in 0..self.c {
            let src = &x.data[c * plane..(c + 1) * plane];
            for (m, v) in means.iter_mut().zip(src.iter()) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= cf);
        for c in 0..self.c {
            let src = &x.data[c * plane..(c + 1) * plane];
            for ((acc, v), m) in inv_stds.iter_mut().zip(src.iter()).zip(means.iter()) {
                let d = v - m;
                *acc += d * d;
            }
        }
        for v in inv_stds.iter_mut() {
            *v = 1.0 / (*v / cf + self.eps).sqrt();
        }
        let mut out = Tensor::zeros(x.c, x.h, x.w);
        for c in 0..self.c {
            let src = &x.data[c * plane..(c + 1) * plane];
            let dst = &mut out.data[c * plane..(c + 1) * plane];
            let (g, b) = (self.gamma.w[c], self.beta.w[c]);
            for (((d, v), m), inv) in dst.iter_mut().zip(src).zip(&means).zip(&inv_stds) {
                *d = g * (v - m) * inv + b;
            }
        }
        self.cache = Some((x.clone(), means, inv_stds));
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let (x, means, inv_stds) = self.cache.take().expect("forward before backward");
        let plane = x.h * x.w;
        let cf = self.c as f64;
        let mut sum_dxhat = vec![0.0; plane];
        let mut sum_dxhat_xhat = vec![0.0; plane];
        for c in 0..self.c {
            let xs = &x.data[c * plane..(c + 1) * plane];
            let gs = &gout.data[c * plane..(c + 1) * plane];
            let gamma = self.gamma.w[c];
            let mut ggamma = 0.0;
            let mut gbeta = 0.0;
            for p in 0..plane {
                let xhat = (xs[p] - means[p]) * inv_stds[p];
                ggamma += gs[p] * xhat;
                gbeta += gs[p];
                let dxhat = gs[p] * gamma;
                sum_dxhat[p] += dxhat;
                sum_dxhat_xhat[p] += dxhat * xhat;
            }
            self.gamma.g[c] += ggamma;
            self.beta.g[c] += gbeta;
        }
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        for c in 0..self.c {
            let xs = &x.data[c * plane..(c + 1) * plane];
            let gs = &gout.data[c * plane..(c + 1) * plane];
            let dst = &mut gx.data[c * plane..(c + 1) * plane];
            let gamma = self.gamma.w[c];
            for p in 0..plane {
                let xhat = (xs[p] - means[p]) * inv_stds[p];
                let dxhat = gs[p] * gamma;
                dst[p] = inv_stds[p] * (dxhat - sum_dxhat[p] / cf - xhat * sum_dxhat_xhat[p] / cf);
            }
        }
        gx
    }
}

impl Module for LayerNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer on feature vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub w: Param,
    pub b: Param,
    cache_x: Option<Vec<f64>>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut SeedRng) -> Self {
        Self {
            in_f,
            out_f,
            w: Param::uniform(&[out_f, in_f], in_f, rng),
            b: Param::zeros(&[out_f]),
            cache_x: None,
        }
    }

    pub fn new_zero(in_f: usize, out_f: usize) -> Self {
        Self {
            in_f,
            out_f,
            w: Param::zeros(&[out_f, in_f]),
            b: Param::zeros(&[out_f]),
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_f);
        let mut out = vec![0.0; self.out_f];
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w.w[o * self.in_f..(o + 1) * self.in_f];
            *out_v = self.b.w[o] + row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>();
        }
        self.cache_x = Some(x.to_vec());
        out
    }

    pub fn backward(&mut self, gout: &[f64]) -> Vec<f64> {
        let x = self.cache_x.take().expect("forward before backward");
        let mut gx = vec![0.0; self.in_f];
        for (o, go) in gout.iter().enumerate() {
            self.b.g[o] += go;
            for i in 0..self.in_f {
                self.w.g[o * self.in_f + i] += go * x[i];
                gx[i] += go * self.w.w[o * self.in_f + i];
            }
        }
        gx
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Elementwise GELU over a tensor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Gelu {
    cache_x: Option<Tensor>,
}

impl Gelu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.cache_x = Some(x.clone());
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let x = self.cache_x.take().expect("forward before backward");
        let mut gx = gout.clone();
        for (g, v) in gx.data.iter_mut().zip(x.data.iter()) {
            *g *= gelu_grad(*v);
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// SimpleGate
// ---------------------------------------------------------------------------

/// Channel-split elementwise product: `(a, b) -> a * b`, halving channels.
#[derive(Debug, Clone, Default)]
pub struct SimpleGate {
    cache_x: Option<Tensor>,
}

impl SimpleGate {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        debug_assert!(x.c % 2 == 0, "simple gate needs an even channel count");
        let half = x.c / 2;
        let plane = x.h * x.w;
        let mut out = Tensor::zeros(half, x.h, x.w);
        for c in 0..half {
            for p in 0..plane {
                out.data[c * plane + p] =
                    x.data[c * plane + p] * x.data[(half + c) * plane + p];
            }
        }
        self.cache_x = Some(x.clone());
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let x = self.cache_x.take().expect("forward before backward");
        let half = x.c / 2;
        let plane = x.h * x.w;
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        for c in 0..half {
            for p in 0..plane {
                let go = gout.data[c * plane + p];
                gx.data[c * plane + p] = go * x.data[(half + c) * plane + p];
                gx.data[(half + c) * plane + p] = go * x.data[c * plane + p];
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Simple channel attention (global pool -> 1x1 projection -> multiply)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Sca {
    pub c: usize,
    pub w: Param,
    pub b: Param,
    cache: Option<(Tensor, Vec<f64>, Vec<f64>)>,
}

impl Sca {
    pub fn new(c: usize, rng: &mut SeedRng) -> Self {
        Self {
            c,
            w: Param::uniform(&[c, c], c, rng),
            b: Param::zeros(&[c]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.c);
        let plane = x.h * x.w;
        let pool: Vec<f64> = (0..self.c)
            .map(|c| x.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let gate: Vec<f64> = (0..self.c)
            .map(|o| {
                self.b.w[o]
                    + self.w.w[o * self.c..(o + 1) * self.c]
                        .iter()
                        .zip(pool.iter())
                        .map(|(w, p)| w * p)
                        .sum::<f64>()
            })
            .collect();
        let mut out = x.clone();
        for c in 0..self.c {
            for v in out.data[c * plane..(c + 1) * plane].iter_mut() {
                *v *= gate[c];
            }
        }
        self.cache = Some((x.clone(), pool, gate));
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let (x, pool, gate) = self.cache.take().expect("forward before backward");
        let plane = x.h * x.w;
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        let mut dgate = vec![0.0; self.c];
        for c in 0..self.c {
            let go = &gout.data[c * plane..(c + 1) * plane];
            let xs = &x.data[c * plane..(c + 1) * plane];
            let mut acc = 0.0;
            for ((g, xv), d) in go
                .iter()
                .zip(xs.iter())
                .zip(gx.data[c * plane..(c + 1) * plane].iter_mut())
            {
                acc += g * xv;
                *d = g * gate[c];
            }
            dgate[c] = acc;
        }
        let mut dpool = vec![0.0; self.c];
        for (o, dg) in dgate.iter().enumerate() {
            self.b.g[o] += dg;
            for i in 0..self.c {
                self.w.g[o * self.c + i] += dg * pool[i];
                dpool[i] += dg * self.w.w[o * self.c + i];
            }
        }
        for c in 0..self.c {
            let add = dpool[c] / plane as f64;
            for d in gx.data[c * plane..(c + 1) * plane].iter_mut() {
                *d += add;
            }
        }
        gx
    }
}

impl Module for Sca {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Channel attention with a bottleneck MLP and sigmoid gates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub c: usize,
    pub l1: Linear,
    pub l2: Linear,
    cache: Option<(Tensor, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl ChannelAttention {
    pub fn new(c: usize, reduction: usize, rng: &mut SeedRng) -> Self {
        let mid = (c / reduction).max(1);
        Self {
            c,
            l1: Linear::new(c, mid, rng),
            l2: Linear::new(mid, c, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.c);
        let plane = x.h * x.w;
        let pool: Vec<f64> = (0..self.c)
            .map(|c| x.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let a1 = self.l1.forward(&pool);
        let a1g: Vec<f64> = a1.iter().map(|v| gelu(*v)).collect();
        let a2 = self.l2.forward(&a1g);
        let gate: Vec<f64> = a2.iter().map(|v| sigmoid(*v)).collect();
        let mut out = x.clone();
        for c in 0..self.c {
            for v in out.data[c * plane..(c + 1) * plane].iter_mut() {
                *v *= gate[c];
            }
        }
        self.cache = Some((x.clone(), a1, gate.clone(), pool));
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let (x, a1, gate, _pool) = self.cache.take().expect("forward before backward");
        let plane = x.h * x.w;
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        let mut dgate = vec![0.0; self.c];
        for c in 0..self.c {
            let go = &gout.data[c * plane..(c + 1) * plane];
            let xs = &x.data[c * plane..(c + 1) * plane];
            let mut acc = 0.0;
            for ((g, xv), d) in go
                .iter()
                .zip(xs.iter())
                .zip(gx.data[c * plane..(c + 1) * plane].iter_mut())
            {
                acc += g * xv;
                *d = g * gate[c];
            }
            dgate[c] = acc;
        }
        let da2: Vec<f64> = dgate
            .iter()
            .zip(gate.iter())
            .map(|(d, s)| d * s * (1.0 - s))
            .collect();
        let da1g = self.l2.backward(&da2);
        let da1: Vec<f64> = da1g
            .iter()
            .zip(a1.iter())
            .map(|(d, v)| d * gelu_grad(*v))
            .collect();
        let dpool = self.l1.backward(&da1);
        for c in 0..self.c {
            let add = dpool[c] / plane as f64;
            for d in gx.data[c * plane..(c + 1) * plane].iter_mut() {
                *d += add;
            }
        }
        gx
    }
}

impl Module for ChannelAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.l1.visit_params(&join(prefix, "down"), f);
        self.l2.visit_params(&join(prefix, "up"), f);
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsampling
// ---------------------------------------------------------------------------

pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.c, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                let v = x.at(c, y, xx);
                *out.at_mut(c, 2 * y, 2 * xx) = v;
                *out.at_mut(c, 2 * y, 2 * xx + 1) = v;
                *out.at_mut(c, 2 * y + 1, 2 * xx) = v;
                *out.at_mut(c, 2 * y + 1, 2 * xx + 1) = v;
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(gout: &Tensor) -> Tensor {
    let (h, w) = (gout.h / 2, gout.w / 2);
    let mut gx = Tensor::zeros(gout.c, h, w);
    for c in 0..gout.c {
        for y in 0..h {
            for x in 0..w {
                *gx.at_mut(c, y, x) = gout.at(c, 2 * y, 2 * x)
                    + gout.at(c, 2 * y, 2 * x + 1)
                    + gout.at(c, 2 * y + 1, 2 * x)
                    + gout.at(c, 2 * y + 1, 2 * x + 1);
            }
        }
    }
    gx
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn conv2d_gradients() {
        let mut rng = rng_from_seed(1);
        for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (2, 2, 0), (3, 1, 1)] {
            let mut conv = Conv2d::new(3, 4, k, stride, pad, Padding::Zero, &mut rng);
            let x = random_tensor(3, 6, 6, &mut rng);
            let xc = x.clone();
            fd_check_params(
                &mut conv,
                &mut |c| quad_loss(&c.forward(&xc)),
                &mut |c| {
                    let out = c.forward(&x);
                    c.backward(&out);
                },
                20,
                1e-5,
                &mut rng,
            );
        }
    }

    #[test]
    fn conv2d_input_gradients() {
        let mut rng = rng_from_seed(2);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, Padding::Zero, &mut rng);
        let x = random_tensor(2, 5, 5, &mut rng);
        let out = conv.forward(&x);
        conv.zero_grads();
        let gx = conv.backward(&out);
        let h = 1e-5;
        for idx in [0, 7, 24, 49] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let lp = quad_loss(&conv.forward(&xp));
            xp.data[idx] -= 2.0 * h;
            let lm = quad_loss(&conv.forward(&xp));
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx.data[idx]).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn depthwise_gradients() {
        let mut rng = rng_from_seed(3);
        for k in [3, 5, 7] {
            let mut dwc = DepthwiseConv2d::new(3, k, &mut rng);
            let x = random_tensor(3, 8, 8, &mut rng);
            let xc = x.clone();
            fd_check_params(
                &mut dwc,
                &mut |c| quad_loss(&c.forward(&xc)),
                &mut |c| {
                    let out = c.forward(&x);
                    c.backward(&out);
                },
                20,
                1e-5,
                &mut rng,
            );
        }
    }

    #[test]
    fn deform_zero_offsets_is_standard_replicate_conv() {
        let mut rng = rng_from_seed(4);
        for _ in 0..10 {
            let in_c = rng.gen_range(1..4);
            let out_c = rng.gen_range(1..4);
            let mut deform = DeformConv2d::new(in_c, out_c, 3, &mut rng);
            let mut conv = Conv2d::new(in_c, out_c, 3, 1, 1, Padding::Replicate, &mut rng);
            conv.w.w.copy_from_slice(&deform.w.w);
            conv.b.w.copy_from_slice(&deform.b.w);
            let x = random_tensor(in_c, 6, 7, &mut rng);
            let a = deform.forward(&x);
            let b = conv.forward(&x);
            // Shared accumulation order: bit-for-bit equality.
            for (va, vb) in a.data.iter().zip(b.data.iter()) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }

    #[test]
    fn deform_identity_kernel_passthrough() {
        let mut rng = rng_from_seed(5);
        let mut deform = DeformConv2d::new(1, 1, 1, &mut rng);
        deform.w.w[0] = 1.0;
        deform.b.w[0] = 0.0;
        let x = random_tensor(1, 5, 5, &mut rng);
        let out = deform.forward(&x);
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn deform_constant_offset_shifts_ramp() {
        // f(x, y) = x sampled at (+1, 0) offset equals f(x) one column over,
        // checked against direct bilinear evaluation.
        let mut rng = rng_from_seed(6);
        let mut deform = DeformConv2d::new(1, 1, 1, &mut rng);
        deform.w.w[0] = 1.0;
        // Constant +1 column offset via the offset branch bias.
        deform.offset_conv.b.w[1] = 1.0;
        let x = Tensor {
            c: 1,
            h: 8,
            w: 8,
            data: (0..64).map(|i| (i % 8) as f64).collect(),
        };
        let out = deform.forward(&x);
        for y in 0..8 {
            for xx in 0..8 {
                let expect = (xx as f64 + 1.0).min(7.0);
                assert!((out.at(0, y, xx) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deform_gradients() {
        let mut rng = rng_from_seed(7);
        let mut deform = DeformConv2d::new(2, 3, 3, &mut rng);
        // Move offsets off the integer grid so the bilinear kink is avoided.
        randomize_params(&mut deform, 0.3, &mut rng);
        let x = random_tensor(2, 6, 6, &mut rng);
        let xc = x.clone();
        fd_check_params(
            &mut deform,
            &mut |c| quad_loss(&c.forward(&xc)),
            &mut |c| {
                let out = c.forward(&x);
                c.backward(&out);
            },
            25,
            1e-4,
            &mut rng,
        );
    }

    #[test]
    fn deform_input_gradients() {
        let mut rng = rng_from_seed(8);
        let mut deform = DeformConv2d::new(1, 2, 3, &mut rng);
        randomize_params(&mut deform, 0.3, &mut rng);
        let x = random_tensor(1, 5, 5, &mut rng);
        let out = deform.forward(&x);
        deform.zero_grads();
        let gx = deform.backward(&out);
        let h = 1e-6;
        for idx in [0, 6, 12, 24] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let lp = quad_loss(&deform.forward(&xp));
            xp.data[idx] -= 2.0 * h;
            let lm = quad_loss(&deform.forward(&xp));
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - gx.data[idx]).abs() < 1e-4 * fd.abs().max(1.0),
                "input grad {idx}: fd={fd} vs {}",
                gx.data[idx]
            );
        }
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = rng_from_seed(9);
        let mut ln = LayerNorm2d::new(5);
        randomize_params(&mut ln, 1.0, &mut rng);
        let x = random_tensor(5, 4, 4, &mut rng);
        let xc = x.clone();
        fd_check_params(
            &mut ln,
            &mut |c| quad_loss(&c.forward(&xc)),
            &mut |c| {
                let out = c.forward(&x);
                c.backward(&out);
            },
            10,
            1e-5,
            &mut rng,
        );
        // Input gradient check.
        let out = ln.forward(&x);
        ln.zero_grads();
        let gx = ln.backward(&out);
        let h = 1e-6;
        for idx in [0, 13, 40, 79] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let lp = quad_loss(&ln.forward(&xp));
            xp.data[idx] -= 2.0 * h;
            let lm = quad_loss(&ln.forward(&xp));
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx.data[idx]).abs() < 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = rng_from_seed(10);
        let mut lin = Linear::new(6, 4, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xc = x.clone();
        fd_check_params(
            &mut lin,
            &mut |l| {
                let out = l.forward(&xc);
                0.5 * out.iter().map(|v| v * v).sum::<f64>()
            },
            &mut |l| {
                let out = l.forward(&x);
                l.backward(&out);
            },
            24,
            1e-6,
            &mut rng,
        );
    }

    #[test]
    fn simple_gate_matches_elementwise_product() {
        let mut rng = rng_from_seed(11);
        let x = random_tensor(6, 3, 3, &mut rng);
        let mut sg = SimpleGate::default();
        let out = sg.forward(&x);
        assert_eq!(out.c, 3);
        let (a, b) = x.split(3);
        for i in 0..out.data.len() {
            assert_eq!(out.data[i], a.data[i] * b.data[i]);
        }
        // Gradient identity: d(a*b)/da = b.
        let mut gout = Tensor::zeros(3, 3, 3);
        gout.data.iter_mut().for_each(|v| *v = 1.0);
        let gx = sg.backward(&gout);
        let (ga, gb) = gx.split(3);
        assert_eq!(ga.data, b.data);
        assert_eq!(gb.data, a.data);
    }

    #[test]
    fn sca_gradients() {
        let mut rng = rng_from_seed(12);
        let mut sca = Sca::new(4, &mut rng);
        let x = random_tensor(4, 4, 4, &mut rng);
        let xc = x.clone();
        fd_check_params(
            &mut sca,
            &mut |c| quad_loss(&c.forward(&xc)),
            &mut |c| {
                let out = c.forward(&x);
                c.backward(&out);
            },
            16,
            1e-5,
            &mut rng,
        );
        // Input gradient.
        let out = sca.forward(&x);
        sca.zero_grads();
        let gx = sca.backward(&out);
        let h = 1e-6;
        for idx in [0, 17, 50] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let lp = quad_loss(&sca.forward(&xp));
            xp.data[idx] -= 2.0 * h;
            let lm = quad_loss(&sca.forward(&xp));
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx.data[idx]).abs() < 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn channel_attention_identity_when_gates_saturate() {
        let mut rng = rng_from_seed(13);
        let mut cab = ChannelAttention::new(4, 2, &mut rng);
        // Force gates to 1 with a huge bias on the output layer.
        cab.l2.b.w.iter_mut().for_each(|b| *b = 50.0);
        let x = random_tensor(4, 3, 3, &mut rng);
        let out = cab.forward(&x);
        for (a, b) in out.data.iter().zip(x.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // Zero input stays zero under multiplicative gating.
        let zero = Tensor::zeros(4, 3, 3);
        let out = cab.forward(&zero);
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn channel_attention_monotone_in_channel_scale() {
        let mut rng = rng_from_seed(14);
        let mut cab = ChannelAttention::new(3, 2, &mut rng);
        for _ in 0..20 {
            let x = random_tensor(3, 4, 4, &mut rng);
            let base = cab.forward(&x);
            let mut x2 = x.clone();
            // Scale channel 1 by 2: its output must scale by 2x the gate ratio.
            let plane = 16;
            for v in x2.data[plane..2 * plane].iter_mut() {
                *v *= 2.0;
            }
            let scaled = cab.forward(&x2);
            for p in 0..plane {
                let a = base.data[plane + p];
                let b = scaled.data[plane + p];
                if a.abs() > 1e-9 {
                    assert!((b / a).abs() > 1.0, "channel response not monotone");
                }
            }
        }
    }

    #[test]
    fn channel_attention_gradients() {
        let mut rng = rng_from_seed(15);
        let mut cab = ChannelAttention::new(4, 2, &mut rng);
        let x = random_tensor(4, 4, 4, &mut rng);
        let xc = x.clone();
        fd_check_params(
            &mut cab,
            &mut |c| quad_loss(&c.forward(&xc)),
            &mut |c| {
                let out = c.forward(&x);
                c.backward(&out);
            },
            16,
            1e-5,
            &mut rng,
        );
    }

    #[test]
    fn upsample_nearest_round_trip_gradient() {
        let mut rng = rng_from_seed(16);
        let x = random_tensor(2, 3, 3, &mut rng);
        let up = upsample_nearest2(&x);
        assert_eq!((up.h, up.w), (6, 6));
        assert_eq!(up.at(0, 0, 0), x.at(0, 0, 0));
        assert_eq!(up.at(0, 5, 5), x.at(0, 2, 2));
        // Backward of a constant-1 gradient sums the 4 replicas.
        let mut g = Tensor::zeros(2, 6, 6);
        g.data.iter_mut().for_each(|v| *v = 1.0);
        let gx = upsample_nearest2_backward(&g);
        assert!(gx.data.iter().all(|v| *v == 4.0));
    }

    #[test]
    fn gelu_layer_gradients() {
        let mut rng = rng_from_seed(17);
        let x = random_tensor(2, 3, 3, &mut rng);
        let mut act = Gelu::default();
        let out = act.forward(&x);
        let gx = act.backward(&out);
        let h = 1e-6;
        for idx in [0, 5, 11] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let lp = quad_loss(&act.forward(&xp));
            xp.data[idx] -= 2.0 * h;
            let lm = quad_loss(&act.forward(&xp));
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gx.data[idx]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
