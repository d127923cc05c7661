//! Noise power spectrum: noise-pair extraction, the 2D NPS, radial averaging and
//! the Pearson similarity used to compare radial curves.

use crate::error::{param_err, shape_err, Error, Result};
use crate::fft;

/// Reference and predicted noise realizations, in HU.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    pub height: usize,
    pub width: usize,
    /// LDCT minus NDCT.
    pub noise_gt: Vec<f64>,
    /// LDCT minus prediction.
    pub noise_pred: Vec<f64>,
}

pub fn extract_noise_pair(
    ldct: &[f64],
    ndct: &[f64],
    pred: &[f64],
    height: usize,
    width: usize,
) -> Result<NoisePair> {
    let n = height * width;
    if ldct.len() != n || ndct.len() != n || pred.len() != n {
        return Err(shape_err!(
            "noise pair inputs must all be {height}x{width}, got {}, {}, {} values",
            ldct.len(),
            ndct.len(),
            pred.len()
        ));
    }
    Ok(NoisePair {
        height,
        width,
        noise_gt: ldct.iter().zip(ndct).map(|(a, b)| a - b).collect(),
        noise_pred: ldct.iter().zip(pred).map(|(a, b)| a - b).collect(),
    })
}

/// Two-dimensional NPS in unshifted DFT layout (DC at index 0).
#[derive(Clone, Debug, PartialEq)]
pub struct Nps2D {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Pixel pitch along columns, mm.
    pub px: f64,
    /// Pixel pitch along rows, mm.
    pub py: f64,
}

impl Nps2D {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub(crate) fn check_pitch(px: f64, py: f64) -> Result<()> {
    if !(px.is_finite() && py.is_finite() && px > 0.0 && py > 0.0) {
        return Err(param_err!("pixel pitch must be positive, got {px} x {py}"));
    }
    Ok(())
}

/// `NPS(u, v) = px·py / (Nx·Ny) · |DFT(noise)|²`, optionally after removing the ROI mean.
pub fn nps2d(noise: &[f64], height: usize, width: usize, px: f64, py: f64, detrend: bool) -> Result<Nps2D> {
    check_pitch(px, py)?;
    if height == 0 || width == 0 {
        return Err(param_err!("NPS region must be non-empty"));
    }
    if noise.len() != height * width {
        return Err(shape_err!("noise has {} values, expected {height}x{width}", noise.len()));
    }
    let spectrum = if detrend {
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let centered: Vec<f64> = noise.iter().map(|v| v - mean).collect();
        fft::fft2_real(&centered, height, width)
    } else {
        fft::fft2_real(noise, height, width)
    };
    let scale = px * py / (height * width) as f64;
    Ok(Nps2D {
        height,
        width,
        values: spectrum.iter().map(|c| scale * c.norm_sqr()).collect(),
        px,
        py,
    })
}

/// Uniform annular binning: bin 0 holds the DC sample, bin `k ≥ 1` covers radii in
/// `((k-1)·spacing, k·spacing]`; radii beyond the last edge fold into the last bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialBins {
    pub count: usize,
    /// Bin width in cycles/mm.
    pub spacing: f64,
}

impl RadialBins {
    /// `⌊min(H, W)/2⌋ + 1` bins spanning DC to Nyquist of an isotropic grid.
    pub fn default_for(height: usize, width: usize, pitch: f64) -> Self {
        let half = height.min(width) / 2;
        let nyquist = 0.5 / pitch;
        Self {
            count: half + 1,
            spacing: if half == 0 { nyquist } else { nyquist / half as f64 },
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count)
            .map(|k| if k == 0 { 0.0 } else { (k as f64 - 0.5) * self.spacing })
            .collect()
    }
}

/// Precomputed sample-to-bin assignment for a given grid, pitch and binning.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialLayout {
    pub bins: RadialBins,
    pub bin_of: Vec<usize>,
    pub counts: Vec<usize>,
}

impl RadialLayout {
    pub fn new(height: usize, width: usize, px: f64, py: f64, bins: Option<RadialBins>) -> Result<Self> {
        check_pitch(px, py)?;
        let bins = match bins {
            Some(b) => {
                if b.count == 0 || !(b.spacing > 0.0) {
                    return Err(param_err!("radial bins need a positive count and spacing"));
                }
                b
            }
            None => {
                if (px - py).abs() > 1e-12 * px.max(py) {
                    return Err(param_err!(
                        "anisotropic pitch {px} x {py} needs an explicit radial bin spec"
                    ));
                }
                RadialBins::default_for(height, width, px)
            }
        };
        let mut bin_of = Vec::with_capacity(height * width);
        let mut counts = vec![0usize; bins.count];
        for u in 0..height {
            let fy = fft::signed_index(u, height) / (height as f64 * py);
            for v in 0..width {
                let fx = fft::signed_index(v, width) / (width as f64 * px);
                let k = if u == 0 && v == 0 {
                    0
                } else {
                    let ratio = (fx * fx + fy * fy).sqrt() / bins.spacing;
                    ((ratio - 1e-9).ceil().max(1.0) as usize).min(bins.count - 1)
                };
                bin_of.push(k);
                counts[k] += 1;
            }
        }
        Ok(Self {
            bins,
            bin_of,
            counts,
        })
    }

    /// Mean of `values` per bin; empty bins are 0.
    pub fn average(&self, values: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.bins.count];
        for (&k, &v) in self.bin_of.iter().zip(values) {
            sums[k] += v;
        }
        sums.iter()
            .zip(&self.counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

/// One-dimensional radial NPS curve.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialNps {
    /// Spatial frequency of each bin, cycles/mm.
    pub bin_centers: Vec<f64>,
    pub values: Vec<f64>,
    /// Number of 2D samples averaged into each bin; zero marks an empty bin.
    pub counts: Vec<usize>,
}

impl RadialNps {
    pub fn empty_bins(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c == 0).collect()
    }
}

pub fn radialize(nps: &Nps2D) -> Result<RadialNps> {
    radialize_with(nps, None)
}

pub fn radialize_with(nps: &Nps2D, bins: Option<RadialBins>) -> Result<RadialNps> {
    let layout = RadialLayout::new(nps.height, nps.width, nps.px, nps.py, bins)?;
    Ok(RadialNps {
        bin_centers: layout.bins.centers(),
        values: layout.average(&nps.values),
        counts: layout.counts,
    })
}

/// Sample Pearson correlation; errors on zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err!("pearson inputs differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(param_err!("pearson needs at least two samples"));
    }
    let stats = pearson_stats(a, b);
    if stats.degenerate {
        return Err(Error::Degenerate("zero variance in pearson input".into()));
    }
    Ok(stats.rho)
}

pub(crate) struct PearsonStats {
    pub rho: f64,
    pub saa: f64,
    pub sbb: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub degenerate: bool,
}

pub(crate) fn pearson_stats(a: &[f64], b: &[f64]) -> PearsonStats {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let tiny = f64::MIN_POSITIVE.sqrt();
    let degenerate = !(saa > tiny && sbb > tiny) || !(saa * sbb).is_finite();
    let rho = if degenerate {
        0.0
    } else if a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        1.0
    } else {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    };
    PearsonStats {
        rho,
        saa,
        sbb,
        mean_a,
        mean_b,
        degenerate,
    }
}
