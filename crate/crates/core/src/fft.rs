//! Two-dimensional complex DFT helpers over row-major planes.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform_2d(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    debug_assert_eq!(buf.len(), h * w);
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row = planner.plan_fft(w, direction);
        let col = planner.plan_fft(h, direction);
        if w > 1 {
            row.process(buf);
        }
        if h > 1 {
            let mut column = vec![Complex64::new(0.0, 0.0); h];
            for x in 0..w {
                for y in 0..h {
                    column[y] = buf[y * w + x];
                }
                col.process(&mut column);
                for y in 0..h {
                    buf[y * w + x] = column[y];
                }
            }
        }
    });
}

/// Unnormalized forward DFT of a real plane.
pub fn fft2_real(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut buf, h, w, FftDirection::Forward);
    buf
}

/// Unnormalized forward DFT in place.
pub fn fft2(buf: &mut [Complex64], h: usize, w: usize) {
    transform_2d(buf, h, w, FftDirection::Forward);
}

/// Unnormalized inverse DFT in place (no 1/(h*w) factor).
pub fn ifft2_unnormalized(buf: &mut [Complex64], h: usize, w: usize) {
    transform_2d(buf, h, w, FftDirection::Inverse);
}

/// Signed frequency index of DFT bin `k` out of `n`.
pub fn signed_index(k: usize, n: usize) -> f64 {
    if 2 * k > n {
        k as f64 - n as f64
    } else {
        k as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        acc += plane[y * w + x] * Complex64::new(phase.cos(), phase.sin());
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft_on_rectangular_plane() {
        let (h, w) = (3, 5);
        let plane: Vec<f64> = (0..h * w).map(|i| ((i * 7 % 11) as f64) - 4.0).collect();
        let fast = fft2_real(&plane, h, w);
        let slow = naive_dft(&plane, h, w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let (h, w) = (4, 6);
        let plane: Vec<f64> = (0..h * w).map(|i| (i as f64).sin()).collect();
        let mut buf = fft2_real(&plane, h, w);
        ifft2_unnormalized(&mut buf, h, w);
        for (a, b) in buf.iter().zip(&plane) {
            assert!((a.re / (h * w) as f64 - b).abs() < 1e-12);
            assert!(a.im.abs() < 1e-9);
        }
    }

    #[test]
    fn signed_indices() {
        assert_eq!(signed_index(0, 8), 0.0);
        assert_eq!(signed_index(4, 8), 4.0);
        assert_eq!(signed_index(5, 8), -3.0);
        assert_eq!(signed_index(2, 5), 2.0);
        assert_eq!(signed_index(3, 5), -2.0);
    }
}
