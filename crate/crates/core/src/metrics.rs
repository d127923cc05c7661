//! RMSE, PSNR and SSIM between a reference and a test image.

use serde::Serialize;

use crate::error::{param_err, shape_err, Result};

/// Fixed HU span used for PSNR and the SSIM stabilizers.
pub const DEFAULT_DATA_RANGE: f64 = 2000.0;
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

pub fn rmse(reference: &[f64], test: &[f64]) -> Result<f64> {
    if reference.len() != test.len() || reference.is_empty() {
        return Err(shape_err!("metric inputs of {} and {} values", reference.len(), test.len()));
    }
    let mse = reference.iter().zip(test).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / reference.len() as f64;
    Ok(mse.sqrt())
}

pub fn psnr_from_rmse(rmse: f64, data_range: f64) -> f64 {
    if rmse < data_range * 10f64.powf(-PSNR_CAP_DB / 20.0) {
        PSNR_CAP_DB
    } else {
        20.0 * (data_range / rmse).log10()
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..k).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..k).map(|t| g[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid positions. Images
/// smaller than the window use the largest odd window that fits.
pub fn ssim(reference: &[f64], test: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    if reference.len() != h * w || test.len() != h * w || h == 0 || w == 0 {
        return Err(shape_err!("ssim inputs do not match {h}x{w}"));
    }
    if !(data_range > 0.0) {
        return Err(param_err!("data range must be positive"));
    }
    let mut k = SSIM_WINDOW.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let g = gaussian_window(k, SSIM_SIGMA);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_x = filter_valid(reference, h, w, &g);
    let mu_y = filter_valid(test, h, w, &g);
    let sxx = filter_valid(&prod(reference, reference), h, w, &g);
    let syy = filter_valid(&prod(test, test), h, w, &g);
    let sxy = filter_valid(&prod(reference, test), h, w, &g);
    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = sxx[i] - mx * mx;
        let vy = syy[i] - my * my;
        let cov = sxy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / n as f64)
}

pub fn metrics(reference: &[f64], test: &[f64], h: usize, w: usize, data_range: f64) -> Result<Metrics> {
    if !(data_range > 0.0) {
        return Err(param_err!("data range must be positive"));
    }
    let r = rmse(reference, test)?;
    Ok(Metrics {
        psnr: psnr_from_rmse(r, data_range),
        ssim: ssim(reference, test, h, w, data_range)?,
        rmse: r,
    })
}
