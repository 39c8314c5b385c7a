//! Degradation pipeline: resolution reduction, random-walk void injection,
//! and construction of the conditional mean by bicubic upsampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::raster::{normalize_with, HeightGrid, NormRecord, NormalizedPatch};
use crate::rng::rng_from_seed;

/// Parameters of the random-walk void generator: `n_center` seed squares of
/// side `r_v`, each spread by an independent walk of `t_walk` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub n_center: usize,
    pub t_walk: usize,
    pub r_v: usize,
}

impl MaskSpec {
    pub fn new(n_center: usize, t_walk: usize, r_v: usize) -> Result<Self> {
        if r_v == 0 {
            return Err(Error::BadParam("r_v must be positive".into()));
        }
        Ok(Self {
            n_center,
            t_walk,
            r_v,
        })
    }

    /// Upper bound on voided cells: every stamped square disjoint.
    pub fn max_void_cells(&self) -> usize {
        self.n_center * (self.t_walk + 1) * self.r_v * self.r_v
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    /// Parses preset names of the form `M-<n><t><r>` (single digits each),
    /// e.g. `M-533` -> `(5, 3, 3)`.
    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix("M-")
            .ok_or_else(|| Error::BadParam(format!("mask preset {s:?} must start with 'M-'")))?;
        let ds: Vec<u32> = digits.chars().filter_map(|c| c.to_digit(10)).collect();
        if ds.len() != 3 || digits.chars().count() != 3 {
            return Err(Error::BadParam(format!(
                "mask preset {s:?} must be M-<n><t><r> with single digits"
            )));
        }
        MaskSpec::new(ds[0] as usize, ds[1] as usize, ds[2] as usize)
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M-{}{}{}", self.n_center, self.t_walk, self.r_v)
    }
}

/// Boolean void mask, `true` = void.
#[derive(Debug, Clone)]
pub struct VoidMask {
    pub mask: Grid2<bool>,
}

impl VoidMask {
    pub fn void_count(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }

    pub fn void_fraction(&self) -> f64 {
        self.void_count() as f64 / self.mask.len() as f64
    }
}

/// Training/inference unit bundling target, degraded input, conditional mean,
/// and the void mask expanded to target resolution.
#[derive(Debug, Clone)]
pub struct PatchPair {
    /// Target patch at full resolution, normalized in the degraded patch's
    /// frame — the same frame restoration sees. Extremes lost to block
    /// averaging make the target exceed `[0, 1]` by a few percent, so this
    /// patch alone among the three is not clamped.
    pub d_hq: NormalizedPatch,
    /// Degraded patch (downsampled, voided) at reduced resolution.
    pub d_lq: NormalizedPatch,
    /// Bicubic lift of `d_lq` back to full resolution: the terminal mean of
    /// the forward diffusion.
    pub mu: NormalizedPatch,
    /// Void mask nearest-neighbor-expanded to full resolution.
    pub mask_hq: VoidMask,
    pub scale: usize,
}

/// Reduces resolution by `scale`: each coarse cell is the arithmetic mean of
/// its `scale x scale` block. Blocks with some voids average the valid
/// members; fully void blocks stay void.
pub fn downsample(hq: &HeightGrid, scale: usize) -> Result<HeightGrid> {
    if scale == 0 {
        return Err(Error::BadParam("scale must be positive".into()));
    }
    if hq.rows() % scale != 0 || hq.cols() % scale != 0 {
        return Err(Error::NotDivisible {
            rows: hq.rows(),
            cols: hq.cols(),
            scale,
        });
    }
    let rows = hq.rows() / scale;
    let cols = hq.cols() / scale;
    let mut values = Grid2::filled(rows, cols, 0.0f64);
    let mut valid = Grid2::filled(rows, cols, false);
    for r in 0..rows {
        for c in 0..cols {
            let mut sum = 0.0;
            let mut n = 0usize;
            for dr in 0..scale {
                for dc in 0..scale {
                    let (hr, hc) = (r * scale + dr, c * scale + dc);
                    if hq.valid[(hr, hc)] {
                        sum += hq.values[(hr, hc)];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                values[(r, c)] = sum / n as f64;
                valid[(r, c)] = true;
            }
        }
    }
    HeightGrid::new(values, valid, hq.cell_size * scale as f64)
}

/// Catmull-Rom cubic kernel (a = -0.5).
#[inline]
fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Symmetric reflection of an out-of-range index into `[0, n)`.
#[inline]
fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = idx;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        } else {
            i = 2 * n - 1 - i;
        }
    }
    i as usize
}

/// One separable bicubic pass along a row-major axis.
fn bicubic_axis(input: &[f64], n: usize, stride: usize, scale: usize, out: &mut [f64]) {
    for j in 0..n * scale {
        let src = (j as f64 + 0.5) / scale as f64 - 0.5;
        let j0 = src.floor();
        let f = src - j0;
        let j0 = j0 as isize;
        let w = [
            cubic_kernel(1.0 + f),
            cubic_kernel(f),
            cubic_kernel(1.0 - f),
            cubic_kernel(2.0 - f),
        ];
        let mut acc = 0.0;
        for (k, wk) in w.iter().enumerate() {
            let idx = reflect(j0 - 1 + k as isize, n);
            acc += wk * input[idx * stride];
        }
        out[j * stride] = acc;
    }
}

/// Bicubic interpolation of a value grid by an integer factor, with
/// reflect-padding at the borders. Row and column passes are separable.
pub fn bicubic_scale(values: &Grid2<f64>, scale: usize) -> Grid2<f64> {
    let (rows, cols) = (values.rows(), values.cols());
    if scale == 1 {
        return values.clone();
    }
    // Columns pass: (rows, cols) -> (rows, cols * scale).
    let mut wide = Grid2::filled(rows, cols * scale, 0.0f64);
    for r in 0..rows {
        let row_in = &values.as_slice()[r * cols..(r + 1) * cols];
        let row_out = &mut wide.as_mut_slice()[r * cols * scale..(r + 1) * cols * scale];
        bicubic_axis(row_in, cols, 1, scale, row_out);
    }
    // Rows pass: (rows, cols * scale) -> (rows * scale, cols * scale).
    let out_cols = cols * scale;
    let mut out = Grid2::filled(rows * scale, out_cols, 0.0f64);
    let mut col_in = vec![0.0f64; rows];
    let mut col_out = vec![0.0f64; rows * scale];
    for c in 0..out_cols {
        for r in 0..rows {
            col_in[r] = wide.as_slice()[r * out_cols + c];
        }
        bicubic_axis(&col_in, rows, 1, scale, &mut col_out);
        for r in 0..rows * scale {
            out.as_mut_slice()[r * out_cols + c] = col_out[r];
        }
    }
    out
}

/// Bicubic upsampling of an elevation grid by an integer factor.
///
/// Void cells contribute their stored fill values to the interpolation (the
/// caller is expected to have filled them meaningfully); the output grid is
/// fully valid.
pub fn upsample_bicubic(lq: &HeightGrid, scale: usize) -> Result<HeightGrid> {
    if scale == 0 {
        return Err(Error::BadParam("scale must be positive".into()));
    }
    if lq.rows() < 4 || lq.cols() < 4 {
        return Err(Error::TooSmall(format!(
            "bicubic needs >= 4x4 input, got {}x{}",
            lq.rows(),
            lq.cols()
        )));
    }
    let values = bicubic_scale(&lq.values, scale);
    HeightGrid::from_values(values, lq.cell_size / scale as f64)
}

/// Anchor trajectory of one walk: `t_walk + 1` top-left square positions.
pub type WalkTrace = Vec<(usize, usize)>;

/// Void-mask generation with the per-walk anchor trace exposed, so callers
/// can verify the mask by independently enumerating the stamped squares.
pub fn gen_void_mask_trace(
    spec: &MaskSpec,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<(VoidMask, Vec<WalkTrace>)> {
    if spec.r_v > rows.min(cols) {
        return Err(Error::BadParam(format!(
            "r_v {} exceeds grid {}x{}",
            spec.r_v, rows, cols
        )));
    }
    let max_r = rows - spec.r_v;
    let max_c = cols - spec.r_v;
    let positions = (max_r + 1) * (max_c + 1);
    if spec.n_center > positions {
        return Err(Error::BadParam(format!(
            "{} centers do not fit {} distinct anchor positions",
            spec.n_center, positions
        )));
    }

    let mut rng = rng_from_seed(seed);
    let mut mask = Grid2::filled(rows, cols, false);
    let mut traces = Vec::with_capacity(spec.n_center);
    let mut anchors: Vec<(usize, usize)> = Vec::with_capacity(spec.n_center);

    for _ in 0..spec.n_center {
        // Centers are distinct so the initial squares are n_center in number.
        let (mut r, mut c) = loop {
            let cand = (rng.gen_range(0..=max_r), rng.gen_range(0..=max_c));
            if !anchors.contains(&cand) {
                break cand;
            }
        };
        anchors.push((r, c));

        let mut trace = Vec::with_capacity(spec.t_walk + 1);
        stamp(&mut mask, r, c, spec.r_v);
        trace.push((r, c));
        for _ in 0..spec.t_walk {
            match rng.gen_range(0..4u8) {
                0 => r = r.saturating_sub(1),
                1 => {
                    if r < max_r {
                        r += 1;
                    }
                }
                2 => c = c.saturating_sub(1),
                _ => {
                    if c < max_c {
                        c += 1;
                    }
                }
            }
            stamp(&mut mask, r, c, spec.r_v);
            trace.push((r, c));
        }
        traces.push(trace);
    }
    Ok((VoidMask { mask }, traces))
}

fn stamp(mask: &mut Grid2<bool>, r: usize, c: usize, r_v: usize) {
    for dr in 0..r_v {
        for dc in 0..r_v {
            mask[(r + dr, c + dc)] = true;
        }
    }
}

/// Generates a void mask: `n_center` distinct anchor cells each stamp an
/// `r_v x r_v` square, then spread it along an independent `t_walk`-step
/// 4-neighbor uniform random walk (clamped at borders), stamping a square at
/// every visited position. Overlapping squares merge.
pub fn gen_void_mask(spec: &MaskSpec, rows: usize, cols: usize, seed: u64) -> Result<VoidMask> {
    gen_void_mask_trace(spec, rows, cols, seed).map(|(m, _)| m)
}

/// Marks masked cells void: `valid = false`, value `0.0` in normalized space.
pub fn apply_voids(patch: &NormalizedPatch, mask: &VoidMask) -> Result<NormalizedPatch> {
    if !patch.values.same_dims(&mask.mask) {
        return Err(Error::DimMismatch(format!(
            "patch {}x{} vs mask {}x{}",
            patch.rows(),
            patch.cols(),
            mask.mask.rows(),
            mask.mask.cols()
        )));
    }
    let values = patch.values.zip_map(&mask.mask, |v, m| if *m { 0.0 } else { *v });
    let valid = patch.valid.zip_map(&mask.mask, |ok, m| *ok && !*m);
    Ok(NormalizedPatch {
        values,
        valid,
        record: patch.record,
    })
}

/// Builds a training/inference pair from a fully valid target patch.
///
/// Degradation runs first (downsample, then voids), and the normalization
/// record comes from the valid cells of the degraded patch — exactly the
/// record restoration recovers from its input, so training and inference
/// share one normalized frame. The target is mapped through the same record
/// without clamping; the conditional mean is the bicubic lift of the voided
/// degraded patch with cubic overshoot saturated into `[0, 1]`.
pub fn make_pair(hq: &HeightGrid, scale: usize, spec: &MaskSpec, seed: u64) -> Result<PatchPair> {
    if hq.valid_count() != hq.values.len() {
        return Err(Error::BadParam("make_pair requires a fully valid target".into()));
    }
    let mut lq_grid = downsample(hq, scale)?;
    let mask = gen_void_mask(spec, lq_grid.rows(), lq_grid.cols(), seed)?;
    for r in 0..lq_grid.rows() {
        for c in 0..lq_grid.cols() {
            if mask.mask[(r, c)] {
                lq_grid.valid[(r, c)] = false;
                lq_grid.values[(r, c)] = 0.0;
            }
        }
    }
    let (lo, hi) = lq_grid.valid_range().ok_or(Error::EmptyPatch)?;
    let record = NormRecord::new(lo, hi)?;

    let d_lq = normalize_with(&lq_grid, record);
    let d_hq = NormalizedPatch {
        values: hq.values.map(|v| record.to_norm(*v)),
        valid: hq.valid.clone(),
        record,
    };

    let mu_values = if scale == 1 {
        d_lq.values.clone()
    } else {
        bicubic_scale(&d_lq.values, scale).map(|v| v.clamp(0.0, 1.0))
    };
    let mu = NormalizedPatch {
        values: mu_values,
        valid: Grid2::filled(hq.rows(), hq.cols(), true),
        record,
    };

    let mask_hq = VoidMask {
        mask: Grid2::from_fn(hq.rows(), hq.cols(), |r, c| mask.mask[(r / scale, c / scale)]),
    };

    Ok(PatchPair {
        d_hq,
        d_lq,
        mu,
        mask_hq,
        scale,
    })
}
