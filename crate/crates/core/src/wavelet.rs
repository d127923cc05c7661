//! One-level orthonormal Haar analysis/synthesis and the Fourier-domain gain gate.

use rustfft::num_complex::Complex64;

use crate::error::{param_err, shape_err, Result};
use crate::fft;

/// The four sub-bands of a one-level 2D decomposition, each `(H/2) x (W/2)`.
///
/// `lh` holds horizontal detail, `hl` vertical detail and `hh` diagonal detail.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub height: usize,
    pub width: usize,
    pub ll: Vec<f64>,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

impl WaveletBands {
    /// Band dimensions (half the source grid).
    pub fn band_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Haar analysis of an `h x w` plane into the four bands, appended to the output buffers.
pub(crate) fn haar_forward(grid: &[f64], h: usize, w: usize, out: [&mut [f64]; 4]) {
    let (bh, bw) = (h / 2, w / 2);
    let [ll, lh, hl, hh] = out;
    for i in 0..bh {
        for j in 0..bw {
            let a = grid[2 * i * w + 2 * j];
            let b = grid[2 * i * w + 2 * j + 1];
            let c = grid[(2 * i + 1) * w + 2 * j];
            let d = grid[(2 * i + 1) * w + 2 * j + 1];
            let k = i * bw + j;
            ll[k] = 0.5 * (a + b + c + d);
            lh[k] = 0.5 * (a - b + c - d);
            hl[k] = 0.5 * (a + b - c - d);
            hh[k] = 0.5 * (a - b - c + d);
        }
    }
}

/// Haar synthesis; the exact inverse (and adjoint) of [`haar_forward`].
pub(crate) fn haar_inverse(bands: [&[f64]; 4], bh: usize, bw: usize, grid: &mut [f64]) {
    let [ll, lh, hl, hh] = bands;
    let w = 2 * bw;
    for i in 0..bh {
        for j in 0..bw {
            let k = i * bw + j;
            let (s, x, y, z) = (ll[k], lh[k], hl[k], hh[k]);
            grid[2 * i * w + 2 * j] = 0.5 * (s + x + y + z);
            grid[2 * i * w + 2 * j + 1] = 0.5 * (s - x + y - z);
            grid[(2 * i + 1) * w + 2 * j] = 0.5 * (s + x - y - z);
            grid[(2 * i + 1) * w + 2 * j + 1] = 0.5 * (s - x - y + z);
        }
    }
}

pub fn dwt2(grid: &[f64], height: usize, width: usize) -> Result<WaveletBands> {
    if grid.len() != height * width {
        return Err(shape_err!("grid has {} cells, expected {height}x{width}", grid.len()));
    }
    if height == 0 || width == 0 || height % 2 == 1 || width % 2 == 1 {
        return Err(param_err!("wavelet split needs even positive dimensions, got {height}x{width}"));
    }
    let n = height * width / 4;
    let mut bands = WaveletBands {
        height: height / 2,
        width: width / 2,
        ll: vec![0.0; n],
        lh: vec![0.0; n],
        hl: vec![0.0; n],
        hh: vec![0.0; n],
    };
    haar_forward(
        grid,
        height,
        width,
        [&mut bands.ll, &mut bands.lh, &mut bands.hl, &mut bands.hh],
    );
    Ok(bands)
}

pub fn idwt2(bands: &WaveletBands) -> Result<Vec<f64>> {
    let n = bands.height * bands.width;
    if n == 0 || [&bands.ll, &bands.lh, &bands.hl, &bands.hh].iter().any(|b| b.len() != n) {
        return Err(shape_err!(
            "bands must all hold {}x{} values",
            bands.height,
            bands.width
        ));
    }
    let mut grid = vec![0.0; 4 * n];
    haar_inverse(
        [&bands.ll, &bands.lh, &bands.hl, &bands.hh],
        bands.height,
        bands.width,
        &mut grid,
    );
    Ok(grid)
}

/// Nonnegative gains over the half-spectrum `H x (W/2 + 1)` of a real-input DFT.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierGate {
    height: usize,
    width: usize,
    gains: Vec<f64>,
}

impl FourierGate {
    /// `width` is the spatial width of the grid the gate applies to.
    pub fn new(height: usize, width: usize, gains: Vec<f64>) -> Result<Self> {
        if gains.len() != half_spectrum_len(height, width) {
            return Err(shape_err!(
                "gate for {height}x{width} needs {} gains, got {}",
                half_spectrum_len(height, width),
                gains.len()
            ));
        }
        if gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(param_err!("gate gains must be finite and nonnegative"));
        }
        Ok(Self {
            height,
            width,
            gains,
        })
    }

    pub fn uniform(height: usize, width: usize, gain: f64) -> Result<Self> {
        Self::new(height, width, vec![gain; half_spectrum_len(height, width)])
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn gains_mut(&mut self) -> &mut [f64] {
        &mut self.gains
    }
}

pub fn half_spectrum_len(height: usize, width: usize) -> usize {
    height * (width / 2 + 1)
}

/// Index into the half-spectrum gain array for full-spectrum bin `(u, v)`, using the
/// conjugate symmetry `G(u, v) = G(-u, -v)` for the missing columns.
#[inline]
pub(crate) fn gain_index(u: usize, v: usize, h: usize, w: usize) -> usize {
    let half = w / 2 + 1;
    if v < half {
        u * half + v
    } else {
        ((h - u) % h) * half + (w - v)
    }
}

/// Applies `gains` to the spectrum of one plane; also returns the spectrum for reuse.
pub(crate) fn gate_plane(plane: &[f64], h: usize, w: usize, gains: &[f64]) -> (Vec<f64>, Vec<Complex64>) {
    let spectrum = fft::fft2_real(plane, h, w);
    let mut buf = spectrum.clone();
    for u in 0..h {
        for v in 0..w {
            buf[u * w + v] *= gains[gain_index(u, v, h, w)];
        }
    }
    fft::ifft2_unnormalized(&mut buf, h, w);
    let scale = 1.0 / (h * w) as f64;
    (buf.iter().map(|c| c.re * scale).collect(), spectrum)
}

/// Real-input 2D DFT, elementwise gain, inverse DFT.
pub fn fourier_gate(grid: &[f64], height: usize, width: usize, gate: &FourierGate) -> Result<Vec<f64>> {
    if grid.len() != height * width || gate.height != height || gate.width != width {
        return Err(shape_err!(
            "gate for {}x{} applied to a {height}x{width} grid of {} cells",
            gate.height,
            gate.width,
            grid.len()
        ));
    }
    Ok(gate_plane(grid, height, width, &gate.gains).0)
}
