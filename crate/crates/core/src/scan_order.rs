//! 2D → 1D traversal orders: the Z-shaped (JPEG zigzag) scan, the row-major and
//! serpentine baselines, locality statistics and the four-path scan merge.

use std::fmt;
use std::str::FromStr;

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Traversal family used to unfold a grid into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    Zigzag,
    RowMajor,
    Serpentine,
}

impl FromStr for ScanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zigzag" => Ok(ScanKind::Zigzag),
            "row_major" | "row-major" => Ok(ScanKind::RowMajor),
            "serpentine" => Ok(ScanKind::Serpentine),
            other => Err(param_err!("unknown scan kind {other:?}")),
        }
    }
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanKind::Zigzag => "zigzag",
            ScanKind::RowMajor => "row_major",
            ScanKind::Serpentine => "serpentine",
        })
    }
}

/// Non-zigzag orders used as ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    RowMajor,
    Serpentine,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<ScanKind>()? {
            ScanKind::RowMajor => Ok(BaselineKind::RowMajor),
            ScanKind::Serpentine => Ok(BaselineKind::Serpentine),
            ScanKind::Zigzag => Err(param_err!("zigzag is not a baseline order")),
        }
    }
}

/// A bijection between the cells of an `height x width` grid and sequence positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    height: usize,
    width: usize,
    perm: Vec<(usize, usize)>,
    inv: Vec<usize>,
}

impl ScanOrder {
    /// Validates that `perm` visits every cell exactly once.
    pub fn from_coords(height: usize, width: usize, perm: Vec<(usize, usize)>) -> Result<Self> {
        check_dims(height, width)?;
        if perm.len() != height * width {
            return Err(shape_err!(
                "order has {} entries for a {}x{} grid",
                perm.len(),
                height,
                width
            ));
        }
        let mut inv = vec![usize::MAX; height * width];
        for (i, &(r, c)) in perm.iter().enumerate() {
            if r >= height || c >= width {
                return Err(param_err!("cell ({r}, {c}) outside {height}x{width} grid"));
            }
            let slot = &mut inv[r * width + c];
            if *slot != usize::MAX {
                return Err(param_err!("cell ({r}, {c}) visited twice"));
            }
            *slot = i;
        }
        Ok(Self {
            height,
            width,
            perm,
            inv,
        })
    }

    pub fn generate(kind: ScanKind, height: usize, width: usize) -> Result<Self> {
        match kind {
            ScanKind::Zigzag => zigzag_order(height, width),
            ScanKind::RowMajor => baseline_orders(height, width, BaselineKind::RowMajor),
            ScanKind::Serpentine => baseline_orders(height, width, BaselineKind::Serpentine),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.perm
    }

    /// Sequence position of cell `(row, col)`.
    pub fn position_of(&self, row: usize, col: usize) -> usize {
        self.inv[row * self.width + col]
    }

    /// Row-major flat index of every visited cell, in visiting order.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.perm.iter().map(|&(r, c)| r * self.width + c).collect()
    }

    pub fn reversed(&self) -> Self {
        let perm: Vec<_> = self.perm.iter().rev().copied().collect();
        let n = perm.len();
        let inv = self.inv.iter().map(|&i| n - 1 - i).collect();
        Self {
            height: self.height,
            width: self.width,
            perm,
            inv,
        }
    }

    /// Reads an order generated on the transposed `width x height` grid back onto this grid.
    pub fn transposed(&self) -> Self {
        let perm = self.perm.iter().map(|&(r, c)| (c, r)).collect();
        Self::from_coords(self.width, self.height, perm).expect("transpose of a bijection")
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(param_err!("grid dimensions must be positive, got {height}x{width}"));
    }
    Ok(())
}

/// JPEG-style anti-diagonal traversal starting at `(0, 0)`.
pub fn zigzag_order(height: usize, width: usize) -> Result<ScanOrder> {
    check_dims(height, width)?;
    let mut perm = Vec::with_capacity(height * width);
    for s in 0..(height + width - 1) {
        let lo = s.saturating_sub(width - 1);
        let hi = s.min(height - 1);
        if s % 2 == 0 {
            // up-right: row decreasing
            for r in (lo..=hi).rev() {
                perm.push((r, s - r));
            }
        } else {
            for r in lo..=hi {
                perm.push((r, s - r));
            }
        }
    }
    ScanOrder::from_coords(height, width, perm)
}

pub fn baseline_orders(height: usize, width: usize, kind: BaselineKind) -> Result<ScanOrder> {
    check_dims(height, width)?;
    let mut perm = Vec::with_capacity(height * width);
    for r in 0..height {
        let reverse = kind == BaselineKind::Serpentine && r % 2 == 1;
        if reverse {
            perm.extend((0..width).rev().map(|c| (r, c)));
        } else {
            perm.extend((0..width).map(|c| (r, c)));
        }
    }
    ScanOrder::from_coords(height, width, perm)
}

pub fn flatten(grid: &[f64], order: &ScanOrder) -> Result<Vec<f64>> {
    if grid.len() != order.len() {
        return Err(shape_err!(
            "grid has {} cells, order expects {}",
            grid.len(),
            order.len()
        ));
    }
    Ok(order
        .perm
        .iter()
        .map(|&(r, c)| grid[r * order.width + c])
        .collect())
}

pub fn unflatten(seq: &[f64], order: &ScanOrder) -> Result<Vec<f64>> {
    if seq.len() != order.len() {
        return Err(shape_err!(
            "sequence has {} entries, order expects {}",
            seq.len(),
            order.len()
        ));
    }
    let mut grid = vec![0.0; seq.len()];
    for (&(r, c), &v) in order.perm.iter().zip(seq) {
        grid[r * order.width + c] = v;
    }
    Ok(grid)
}

/// Jump statistics between consecutive cells of an order, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityProfile {
    pub max_jump_chebyshev: f64,
    pub mean_jump_chebyshev: f64,
    pub max_jump_euclidean: f64,
}

pub fn locality_profile(order: &ScanOrder) -> Result<LocalityProfile> {
    if order.len() < 2 {
        return Err(param_err!("locality needs at least two cells"));
    }
    let mut max_cheb = 0usize;
    let mut sum_cheb = 0usize;
    let mut max_euc = 0.0f64;
    for w in order.perm.windows(2) {
        let dr = w[0].0.abs_diff(w[1].0);
        let dc = w[0].1.abs_diff(w[1].1);
        let cheb = dr.max(dc);
        max_cheb = max_cheb.max(cheb);
        sum_cheb += cheb;
        max_euc = max_euc.max(((dr * dr + dc * dc) as f64).sqrt());
    }
    Ok(LocalityProfile {
        max_jump_chebyshev: max_cheb as f64,
        mean_jump_chebyshev: sum_cheb as f64 / (order.len() - 1) as f64,
        max_jump_euclidean: max_euc,
    })
}

/// The four traversals of the Z-SSM: forward and reversed `kind`, then forward and
/// reversed `kind` generated on the transposed grid.
pub fn four_paths(kind: ScanKind, height: usize, width: usize) -> Result<[ScanOrder; 4]> {
    let base = ScanOrder::generate(kind, height, width)?;
    let transposed = ScanOrder::generate(kind, width, height)?.transposed();
    let base_rev = base.reversed();
    let transposed_rev = transposed.reversed();
    Ok([base, base_rev, transposed, transposed_rev])
}

/// Runs `runner` along the four paths of a `[C, H, W]` feature grid and merges the
/// restored grids by their elementwise mean.
///
/// The runner receives the path index and the unfolded `[L, C]` sequence and must
/// return a sequence of the same shape.
pub fn zssm_four_path<F>(features: &Tensor, kind: ScanKind, mut runner: F) -> Result<Tensor>
where
    F: FnMut(usize, &Tensor) -> Result<Tensor>,
{
    let (ch, h, w) = features.chw()?;
    let plane = h * w;
    let paths = four_paths(kind, h, w)?;
    let mut merged = vec![0.0; ch * plane];
    for (index, order) in paths.iter().enumerate() {
        let flat = order.flat_indices();
        let mut seq = vec![0.0; plane * ch];
        for (t, &p) in flat.iter().enumerate() {
            for c in 0..ch {
                seq[t * ch + c] = features.data()[c * plane + p];
            }
        }
        let out = runner(index, &Tensor::new(&[plane, ch], seq)?)?;
        if out.shape() != [plane, ch] {
            return Err(shape_err!(
                "runner returned {:?} for a [{plane}, {ch}] sequence",
                out.shape()
            ));
        }
        for (t, &p) in flat.iter().enumerate() {
            for c in 0..ch {
                merged[c * plane + p] += out.data()[t * ch + c];
            }
        }
    }
    for v in &mut merged {
        *v /= 4.0;
    }
    Tensor::new(features.shape(), merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zigzag_small_grids() {
        assert_eq!(
            zigzag_order(2, 2).unwrap().coords(),
            &[(0, 0), (0, 1), (1, 0), (1, 1)]
        );
        assert_eq!(
            zigzag_order(3, 3).unwrap().coords(),
            &[(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (1, 2), (2, 1), (2, 2)]
        );
        assert_eq!(
            zigzag_order(1, 5).unwrap().coords(),
            &[(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)]
        );
        assert!(zigzag_order(0, 3).is_err());
    }

    #[test]
    fn baseline_examples() {
        let rm = baseline_orders(2, 3, BaselineKind::RowMajor).unwrap();
        assert_eq!(rm.coords(), &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
        assert_eq!(locality_profile(&rm).unwrap().max_jump_chebyshev, 2.0);
        let sp = baseline_orders(2, 3, BaselineKind::Serpentine).unwrap();
        assert_eq!(sp.coords(), &[(0, 0), (0, 1), (0, 2), (1, 2), (1, 1), (1, 0)]);
        assert_eq!(locality_profile(&sp).unwrap().max_jump_chebyshev, 1.0);
        assert_eq!(
            baseline_orders(1, 1, BaselineKind::RowMajor).unwrap().coords(),
            &[(0, 0)]
        );
        assert!("diagonal".parse::<BaselineKind>().is_err());
        assert!("zigzag".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn flatten_examples() {
        let z = zigzag_order(2, 2).unwrap();
        assert_eq!(flatten(&[1.0, 2.0, 3.0, 4.0], &z).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let sp = baseline_orders(2, 3, BaselineKind::Serpentine).unwrap();
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(flatten(&g, &sp).unwrap(), vec![1.0, 2.0, 3.0, 6.0, 5.0, 4.0]);
        assert!(flatten(&g[..5], &sp).is_err());
        assert!(unflatten(&g[..4], &sp).is_err());
    }

    #[test]
    fn locality_rejects_singleton() {
        assert!(locality_profile(&zigzag_order(1, 1).unwrap()).is_err());
    }

    #[test]
    fn from_coords_rejects_non_bijections() {
        assert!(ScanOrder::from_coords(1, 2, vec![(0, 0), (0, 0)]).is_err());
        assert!(ScanOrder::from_coords(1, 2, vec![(0, 0), (0, 2)]).is_err());
        assert!(ScanOrder::from_coords(1, 2, vec![(0, 0)]).is_err());
    }

    #[test]
    fn four_paths_are_forward_reverse_and_transposed() {
        let p = four_paths(ScanKind::Zigzag, 3, 4).unwrap();
        let base = zigzag_order(3, 4).unwrap();
        assert_eq!(p[0], base);
        assert_eq!(p[1], base.reversed());
        assert_eq!(p[2].coords()[1], (1, 0));
        assert_eq!(p[3], p[2].reversed());
        for o in &p {
            assert_eq!(locality_profile(o).unwrap().max_jump_chebyshev, 1.0);
        }
    }

    #[test]
    fn four_path_identity_zero_and_scaled_runners() {
        let g = Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap();
        let same = zssm_four_path(&g, ScanKind::Zigzag, |_, s| Ok(s.clone())).unwrap();
        assert_eq!(same, g);
        let zero = zssm_four_path(&g, ScanKind::Zigzag, |_, s| Ok(Tensor::zeros(s.shape()))).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        // Path k multiplies by k: mean over k = 0..3 is 1.5.
        let ones = Tensor::full(&[1, 2, 2], 1.0);
        let scaled =
            zssm_four_path(&ones, ScanKind::Zigzag, |k, s| Ok(s.map(|v| v * k as f64))).unwrap();
        assert!(scaled.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn four_path_rejects_bad_runner_output() {
        let g = Tensor::full(&[1, 2, 2], 1.0);
        let r = zssm_four_path(&g, ScanKind::Zigzag, |_, _| Ok(Tensor::zeros(&[3, 1])));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn generated_orders_round_trip(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
            let grid: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64).collect();
            for kind in [ScanKind::Zigzag, ScanKind::RowMajor, ScanKind::Serpentine] {
                let o = ScanOrder::generate(kind, h, w).unwrap();
                let seq = flatten(&grid, &o).unwrap();
                prop_assert_eq!(&unflatten(&seq, &o).unwrap(), &grid);
                // permutation commutes with pointwise maps
                let mapped: Vec<f64> = seq.iter().map(|v| v.sqrt() - 1.0).collect();
                let direct: Vec<f64> = grid.iter().map(|v| v.sqrt() - 1.0).collect();
                prop_assert_eq!(unflatten(&mapped, &o).unwrap(), direct);
                for i in 0..o.len() {
                    let (r, c) = o.coords()[i];
                    prop_assert_eq!(o.position_of(r, c), i);
                }
            }
        }

        #[test]
        fn four_path_mean_is_symmetric_in_paths(h in 1usize..6, w in 1usize..6, a in -2.0f64..2.0) {
            let g = Tensor::new(&[2, h, w], (0..2 * h * w).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            // A path-independent runner: the merge should not depend on which index is which.
            let run = |_: usize, s: &Tensor| Ok(s.map(|v| a * v + v * v));
            let out = zssm_four_path(&g, ScanKind::Zigzag, run).unwrap();
            let expect = g.map(|v| a * v + v * v);
            for (x, y) in out.data().iter().zip(expect.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
