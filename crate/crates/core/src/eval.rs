//! Metric suite (MAE, RMSE, PSNR, SSIM), the bicubic baseline restoration,
//! and tile-set evaluation reports.
//!
//! MAE and RMSE are reported in meters on denormalized grids; PSNR and SSIM
//! run on `[0, 1]`-normalized values (peak 1.0, capped at 99 dB for zero
//! error).

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degrade::upsample_bicubic;
use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::raster::{HeightGrid, NormRecord, TileSet};

/// PSNR reported when the mean squared error is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;

/// SSIM window parameters (Gaussian window 11x11, sigma 1.5, K1/K2 per the
/// standard definition, dynamic range 1.0).
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_cells: usize,
    pub config_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileMetrics {
    pub tile_id: usize,
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn check_dims(a: &Grid2<f64>, b: &Grid2<f64>) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Mean absolute error over all cells.
pub fn mae(pred: &Grid2<f64>, gt: &Grid2<f64>) -> Result<f64> {
    check_dims(pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Root mean squared error over all cells.
pub fn rmse(pred: &Grid2<f64>, gt: &Grid2<f64>) -> Result<f64> {
    check_dims(pred, gt)?;
    let n = pred.len() as f64;
    Ok((pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// Peak signal-to-noise ratio: `20 log10(peak) - 10 log10(mse)`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(pred: &Grid2<f64>, gt: &Grid2<f64>, peak: f64) -> Result<f64> {
    check_dims(pred, gt)?;
    let n = pred.len() as f64;
    let mse = pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * peak.log10() - 10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Gaussian-windowed structural similarity, mean over all fully interior
/// window positions.
pub fn ssim(pred: &Grid2<f64>, gt: &Grid2<f64>) -> Result<f64> {
    check_dims(pred, gt)?;
    if pred.rows() < SSIM_WINDOW || pred.cols() < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "ssim needs >= {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            pred.rows(),
            pred.cols()
        )));
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in half..pred.rows() - half {
        for cx in half..pred.cols() - half {
            let (mut mx, mut my) = (0.0, 0.0);
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let w = kernel[wy] * kernel[wx];
                    let a = pred[(cy + wy - half, cx + wx - half)];
                    let b = gt[(cy + wy - half, cx + wx - half)];
                    mx += w * a;
                    my += w * b;
                    sxx += w * a * a;
                    syy += w * b * b;
                    sxy += w * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let half = (n / 2) as f64;
    let mut k: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Void-fill strategies for the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoidFill {
    /// Nearest valid neighbor by breadth-first distance (default).
    Nearest,
    /// Inverse-distance-squared weighting over all valid cells.
    Idw,
}

/// Fills void cells from the nearest valid cell (multi-source BFS,
/// deterministic scan-order tie-break).
pub fn fill_voids_nearest(grid: &HeightGrid) -> Result<HeightGrid> {
    if grid.valid_count() == 0 {
        return Err(Error::EmptyPatch);
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut values = grid.values.clone();
    let mut filled = grid.valid.clone();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for r in 0..rows {
        for c in 0..cols {
            if filled[(r, c)] {
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let v = values[(r, c)];
        let mut push = |rr: usize, cc: usize, values: &mut Grid2<f64>, filled: &mut Grid2<bool>| {
            if !filled[(rr, cc)] {
                values[(rr, cc)] = v;
                filled[(rr, cc)] = true;
                queue.push_back((rr, cc));
            }
        };
        if r > 0 {
            push(r - 1, c, &mut values, &mut filled);
        }
        if r + 1 < rows {
            push(r + 1, c, &mut values, &mut filled);
        }
        if c > 0 {
            push(r, c - 1, &mut values, &mut filled);
        }
        if c + 1 < cols {
            push(r, c + 1, &mut values, &mut filled);
        }
    }
    HeightGrid::from_values(values, grid.cell_size)
}

/// Fills voids by inverse-distance-squared interpolation over valid cells.
pub fn fill_voids_idw(grid: &HeightGrid) -> Result<HeightGrid> {
    if grid.valid_count() == 0 {
        return Err(Error::EmptyPatch);
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let valid_cells: Vec<(usize, usize, f64)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| grid.valid[(r, c)])
        .map(|(r, c)| (r, c, grid.values[(r, c)]))
        .collect();
    let values = Grid2::from_fn(rows, cols, |r, c| {
        if grid.valid[(r, c)] {
            grid.values[(r, c)]
        } else {
            let mut num = 0.0;
            let mut den = 0.0;
            for &(vr, vc, v) in &valid_cells {
                let d2 = ((vr as f64 - r as f64).powi(2) + (vc as f64 - c as f64).powi(2)).max(1.0);
                num += v / d2;
                den += 1.0 / d2;
            }
            num / den
        }
    });
    HeightGrid::from_values(values, grid.cell_size)
}

/// Traditional baseline: fill voids, then bicubic upsampling. Emits a
/// complete raster so it can be scored against the ground truth.
pub fn bicubic_baseline(d_lq: &HeightGrid, scale: usize) -> Result<HeightGrid> {
    bicubic_baseline_with(d_lq, scale, VoidFill::Nearest)
}

pub fn bicubic_baseline_with(d_lq: &HeightGrid, scale: usize, fill: VoidFill) -> Result<HeightGrid> {
    let filled = if d_lq.valid_count() == d_lq.values.len() {
        d_lq.clone()
    } else {
        match fill {
            VoidFill::Nearest => fill_voids_nearest(d_lq)?,
            VoidFill::Idw => fill_voids_idw(d_lq)?,
        }
    };
    upsample_bicubic(&filled, scale)
}

/// Per-tile metrics for aligned prediction/ground-truth tile sets plus the
/// aggregate report. MAE/RMSE in meters; PSNR/SSIM on values normalized by
/// the ground-truth tile's own range (both inputs share the record).
pub fn evaluate(pred: &TileSet, gt: &TileSet) -> Result<(MetricReport, Vec<TileMetrics>)> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch(format!(
            "{} prediction tiles vs {} ground-truth tiles",
            pred.len(),
            gt.len()
        )));
    }
    let mut per_tile = Vec::with_capacity(gt.len());
    let mut n_cells = 0usize;
    for (id, (p, g)) in pred.tiles.iter().zip(gt.tiles.iter()).enumerate() {
        let m = evaluate_tile(p, g)?;
        n_cells += g.values.len();
        per_tile.push(TileMetrics {
            tile_id: id,
            mae: m.0,
            rmse: m.1,
            psnr: m.2,
            ssim: m.3,
        });
    }
    let n = per_tile.len().max(1) as f64;
    let report = MetricReport {
        mae: per_tile.iter().map(|m| m.mae).sum::<f64>() / n,
        rmse: per_tile.iter().map(|m| m.rmse).sum::<f64>() / n,
        psnr: per_tile.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per_tile.iter().map(|m| m.ssim).sum::<f64>() / n,
        n_cells,
        config_digest: config_digest(),
    };
    Ok((report, per_tile))
}

/// MAE and RMSE in meters; PSNR and SSIM on normalized values.
fn evaluate_tile(pred: &HeightGrid, gt: &HeightGrid) -> Result<(f64, f64, f64, f64)> {
    let mae_m = mae(&pred.values, &gt.values)?;
    let rmse_m = rmse(&pred.values, &gt.values)?;
    let (lo, hi) = gt.valid_range().ok_or(Error::EmptyPatch)?;
    let record = NormRecord::new(lo, hi)?;
    let gt_n = gt.values.map(|v| record.to_norm(*v));
    let pred_n = pred.values.map(|v| record.to_norm(*v));
    let psnr_db = psnr(&pred_n, &gt_n, 1.0)?;
    let ssim_v = ssim(&pred_n, &gt_n)?;
    Ok((mae_m, rmse_m, psnr_db, ssim_v))
}

/// Digest of the metric conventions baked into this module, recorded in every
/// report so scores are comparable only within identical conventions.
fn config_digest() -> String {
    let desc = format!(
        "psnr_peak=1.0;psnr_cap={PSNR_CAP_DB};ssim_window={SSIM_WINDOW};ssim_sigma={SSIM_SIGMA};k1=0.01;k2=0.03"
    );
    format!("{:016x}", fnv1a(desc.as_bytes()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Writes the per-tile CSV with a trailing aggregate row.
pub fn write_metrics_csv(
    path: &Path,
    per_tile: &[TileMetrics],
    aggregate: &MetricReport,
) -> Result<()> {
    let mut out = String::from("tile_id,mae,rmse,psnr,ssim\n");
    for m in per_tile {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.4},{:.6}\n",
            m.tile_id, m.mae, m.rmse, m.psnr, m.ssim
        ));
    }
    out.push_str(&format!(
        "aggregate,{:.6},{:.6},{:.4},{:.6}\n",
        aggregate.mae, aggregate.rmse, aggregate.psnr, aggregate.ssim
    ));
    fs::write(path, out)?;
    Ok(())
}

/// Absolute error map normalized to `[0, 1]` by its own maximum (all zeros
/// when the prediction is exact). Used for grayscale difference heatmaps.
pub fn error_map(pred: &Grid2<f64>, gt: &Grid2<f64>) -> Result<Grid2<f64>> {
    check_dims(pred, gt)?;
    let abs = pred.zip_map(gt, |a, b| (a - b).abs());
    let max = abs.iter().fold(0.0f64, |m, v| m.max(*v));
    if max == 0.0 {
        return Ok(abs);
    }
    Ok(abs.map(|v| v / max))
}
