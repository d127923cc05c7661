//! Forward and adjoint kernels for the structured ops recorded on the tape.

/// Geometry of a 2D convolution over `[C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Range of output columns whose tap `kx` lands inside the input.
    #[inline]
    fn ox_range(&self, kx: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kx = kx as isize;
        let lo = ((p - kx).max(0) + s - 1) / s;
        let hi = (self.w as isize - 1 + p - kx).div_euclid(s) + 1;
        (lo as usize, (hi.max(0) as usize).min(wo))
    }
}

/// Iterates every (output channel, input channel, tap, output row) combination with a
/// valid input row, handing the callback flat offsets and the valid column range.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize))) {
    let (ho, wo) = g.out_hw();
    let cig = g.c_in / g.groups;
    let cog = g.c_out / g.groups;
    for co in 0..g.c_out {
        let grp = co / cog;
        for cl in 0..cig {
            let ci = grp * cig + cl;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((co * cig + cl) * g.k + ky) * g.k + kx;
                    let range = g.ox_range(kx, wo);
                    if range.0 >= range.1 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let x_row = (ci * g.h + iy as usize) * g.w;
                        let y_row = (co * ho + oy) * wo;
                        // Input column for output column ox is ox*stride + kx - pad.
                        let x_off = x_row + kx;
                        f(widx, x_off, y_row, ky, kx, range);
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut y = vec![0.0; g.c_out * ho * wo];
    if let Some(b) = b {
        for co in 0..g.c_out {
            y[co * ho * wo..(co + 1) * ho * wo].fill(b[co]);
        }
    }
    let (s, pad) = (g.stride, g.pad);
    for_each_tap(g, |widx, x_off, y_row, _, _, (lo, hi)| {
        let wv = w[widx];
        if s == 1 {
            let xs = &x[x_off + lo - pad..x_off + hi - pad];
            let ys = &mut y[y_row + lo..y_row + hi];
            for (yv, xv) in ys.iter_mut().zip(xs) {
                *yv += wv * xv;
            }
        } else {
            for ox in lo..hi {
                y[y_row + ox] += wv * x[x_off + ox * s - pad];
            }
        }
    });
    y
}

/// Accumulates `dx` and `dw` for `dy`; either output may be skipped.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (s, pad) = (g.stride, g.pad);
    for_each_tap(g, |widx, x_off, y_row, _, _, (lo, hi)| {
        if let Some(dx) = dx.as_deref_mut() {
            let wv = w[widx];
            if s == 1 {
                let dxs = &mut dx[x_off + lo - pad..x_off + hi - pad];
                for (d, gy) in dxs.iter_mut().zip(&dy[y_row + lo..y_row + hi]) {
                    *d += wv * gy;
                }
            } else {
                for ox in lo..hi {
                    dx[x_off + ox * s - pad] += wv * dy[y_row + ox];
                }
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let acc: f64 = if s == 1 {
                x[x_off + lo - pad..x_off + hi - pad]
                    .iter()
                    .zip(&dy[y_row + lo..y_row + hi])
                    .map(|(a, b)| a * b)
                    .sum()
            } else {
                (lo..hi).map(|ox| x[x_off + ox * s - pad] * dy[y_row + ox]).sum()
            };
            dw[widx] += acc;
        }
    });
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm across channels at every spatial site of a `[C, P]` buffer.
/// Returns `(y, xhat, rstd)`.
pub fn layer_norm_forward(
    x: &[f64],
    c: usize,
    p: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; p];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(&x[ch * p..(ch + 1) * p]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= c as f64;
    }
    let mut var = vec![0.0; p];
    for ch in 0..c {
        for ((s, v), m) in var.iter_mut().zip(&x[ch * p..(ch + 1) * p]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let rstd: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v / c as f64 + LAYER_NORM_EPS).sqrt())
        .collect();
    let mut xhat = vec![0.0; c * p];
    let mut y = vec![0.0; c * p];
    for ch in 0..c {
        for i in 0..p {
            let k = ch * p + i;
            xhat[k] = (x[k] - mean[i]) * rstd[i];
            y[k] = gamma[ch] * xhat[k] + beta[ch];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    c: usize,
    p: usize,
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    if let Some(dg) = dgamma {
        for ch in 0..c {
            dg[ch] += (0..p).map(|i| dy[ch * p + i] * xhat[ch * p + i]).sum::<f64>();
        }
    }
    if let Some(db) = dbeta {
        for ch in 0..c {
            db[ch] += dy[ch * p..(ch + 1) * p].iter().sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        let mut sum_d = vec![0.0; p];
        let mut sum_dx = vec![0.0; p];
        for ch in 0..c {
            for i in 0..p {
                let d = dy[ch * p + i] * gamma[ch];
                sum_d[i] += d;
                sum_dx[i] += d * xhat[ch * p + i];
            }
        }
        let inv_c = 1.0 / c as f64;
        for ch in 0..c {
            for i in 0..p {
                let k = ch * p + i;
                let d = dy[k] * gamma[ch];
                dx[k] += rstd[i] * (d - inv_c * sum_d[i] - xhat[k] * inv_c * sum_dx[i]);
            }
        }
    }
}

/// `[C, H, W] -> [4C, H/2, W/2]`, channel `4c + 2dy + dx` holds pixel `(2i+dy, 2j+dx)`.
pub fn space_to_depth(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let oc = ch * 4 + dy * 2 + dx;
                for i in 0..h2 {
                    for j in 0..w2 {
                        y[(oc * h2 + i) * w2 + j] = x[(ch * h + 2 * i + dy) * w + 2 * j + dx];
                    }
                }
            }
        }
    }
    y
}

/// Inverse of [`space_to_depth`]; `c`, `h`, `w` describe the output.
pub fn depth_to_space(y: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut x = vec![0.0; y.len()];
    for ch in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let oc = ch * 4 + dy * 2 + dx;
                for i in 0..h2 {
                    for j in 0..w2 {
                        x[(ch * h + 2 * i + dy) * w + 2 * j + dx] = y[(oc * h2 + i) * w2 + j];
                    }
                }
            }
        }
    }
    x
}

pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut y = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let base = (ch * h + 2 * i) * w + 2 * j;
                y[(ch * h2 + i) * w2 + j] = 0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (h2, w2) = (h / 2, w / 2);
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let g = 0.25 * dy[(ch * h2 + i) * w2 + j];
                let base = (ch * h + 2 * i) * w + 2 * j;
                dx[base] += g;
                dx[base + 1] += g;
                dx[base + w] += g;
                dx[base + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling; `h`, `w` describe the input.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                y[(ch * h2 + i) * w2 + j] = x[(ch * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[(ch * h + i / 2) * w + j / 2] += dy[(ch * h2 + i) * w2 + j];
            }
        }
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * crate::ssm::sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = crate::ssm::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (ho, wo) = g.out_hw();
        let cig = g.c_in / g.groups;
        let cog = g.c_out / g.groups;
        let mut y = vec![0.0; g.c_out * ho * wo];
        for co in 0..g.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for cl in 0..cig {
                        let ci = (co / cog) * cig + cl;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += w[((co * cig + cl) * g.k + ky) * g.k + kx]
                                        * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_for_strides_groups_and_padding() {
        let cases = [
            ConvGeom { c_in: 2, h: 5, w: 6, c_out: 3, k: 3, stride: 1, pad: 1, groups: 1 },
            ConvGeom { c_in: 4, h: 6, w: 6, c_out: 4, k: 3, stride: 1, pad: 1, groups: 4 },
            ConvGeom { c_in: 2, h: 7, w: 8, c_out: 2, k: 3, stride: 2, pad: 1, groups: 1 },
            ConvGeom { c_in: 3, h: 4, w: 4, c_out: 5, k: 1, stride: 1, pad: 0, groups: 1 },
        ];
        for g in cases {
            let x: Vec<f64> = (0..g.c_in * g.h * g.w).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            let wl = g.c_out * (g.c_in / g.groups) * g.k * g.k;
            let w: Vec<f64> = (0..wl).map(|i| ((i * 5 % 11) as f64) / 7.0 - 0.6).collect();
            assert_eq!(conv2d_forward(&g, &x, &w, None), naive_conv(&g, &x, &w));
        }
    }

    #[test]
    fn space_to_depth_round_trip() {
        let x: Vec<f64> = (0..2 * 4 * 6).map(|v| v as f64).collect();
        let y = space_to_depth(&x, 2, 4, 6);
        assert_eq!(depth_to_space(&y, 2, 4, 6), x);
        // channel 1 of the first input channel holds the (0, 1) phase
        assert_eq!(y[6], x[1]);
    }
}
