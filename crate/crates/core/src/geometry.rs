//! Rectangular grids, rasterized regions and volume arithmetic.
//!
//! Cells are indexed row-major with dimension 0 varying fastest: the cell
//! with per-dimension indices `(i_0, ..., i_{d-1})` has linear index
//! `i_0 + c_0 * (i_1 + c_1 * (i_2 + ...))`. Membership of a cell is the
//! membership of its center `lower_j + (i_j + 1/2) * width_j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::DensityEstimate;
use crate::error::{Error, Result};

/// Samples drawn from each independent PRNG stream in [`mc_volume`].
pub const MC_CHUNK: usize = 4096;

/// Cells per dimension used when the caller does not choose a resolution.
pub fn default_resolution(dim: usize) -> Result<usize> {
    match dim {
        1 | 2 => Ok(200),
        3 => Ok(64),
        0 => Err(Error::invalid("dimension must be at least 1")),
        _ => Err(Error::invalid(format!(
            "grids are not supported in dimension {dim}; use Monte-Carlo volume"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
    centers: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || cells.len() != d {
            return Err(Error::invalid(
                "grid bounds and cell counts must be nonempty and of equal length",
            ));
        }
        for j in 0..d {
            if !lower[j].is_finite() || !upper[j].is_finite() || !(lower[j] < upper[j]) {
                return Err(Error::invalid(format!(
                    "grid bounds in dimension {j} must be finite with lower < upper"
                )));
            }
            if cells[j] == 0 {
                return Err(Error::invalid("grid cell counts must be at least 1"));
            }
        }
        let total = cells
            .iter()
            .try_fold(1usize, |acc, &c| acc.checked_mul(c))
            .ok_or_else(|| Error::invalid("grid has too many cells"))?;
        if total > 1 << 28 {
            return Err(Error::invalid(format!("grid has {total} cells; too many")));
        }
        let centers = (0..d)
            .map(|j| {
                let w = (upper[j] - lower[j]) / cells[j] as f64;
                (0..cells[j])
                    .map(|i| lower[j] + (i as f64 + 0.5) * w)
                    .collect()
            })
            .collect();
        Ok(Grid {
            lower,
            upper,
            cells,
            centers,
        })
    }

    /// Default grid for an estimate: data range expanded by `h` plus one cell
    /// on each side, `cells_per_dim` cells in every dimension.
    pub fn covering(est: &DensityEstimate, cells_per_dim: usize) -> Result<Self> {
        if cells_per_dim < 3 {
            return Err(Error::invalid("covering grids need at least 3 cells per dimension"));
        }
        let (lo, hi) = est.support_bounds();
        let n = cells_per_dim as f64;
        let mut lower = Vec::with_capacity(lo.len());
        let mut upper = Vec::with_capacity(lo.len());
        for j in 0..lo.len() {
            let w = (hi[j] - lo[j]) / (n - 2.0);
            lower.push(lo[j] - w);
            upper.push(hi[j] + w);
        }
        Grid::new(lower, upper, vec![cells_per_dim; lo.len()])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self, j: usize) -> f64 {
        (self.upper[j] - self.lower[j]) / self.cells[j] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|j| self.width(j)).product()
    }

    pub fn box_volume(&self) -> f64 {
        (0..self.dim()).map(|j| self.upper[j] - self.lower[j]).product()
    }

    /// Writes the center of cell `index` into `out`.
    #[inline]
    pub fn center_into(&self, mut index: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let c = self.cells[j];
            *o = self.centers[j][index % c];
            index /= c;
        }
    }

    pub fn center(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.center_into(index, &mut out);
        out
    }

    /// Per-dimension cell indices of a linear index.
    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        self.cells
            .iter()
            .map(|&c| {
                let i = index % c;
                index /= c;
                i
            })
            .collect()
    }

    fn same_as(&self, other: &Grid) -> bool {
        self.lower == other.lower && self.upper == other.upper && self.cells == other.cells
    }

    /// `sum_i K((c - Y_i)/h)` at every cell center `c`.
    ///
    /// Contributions are scattered point by point over the cells inside each
    /// kernel's support, in data order. Skipped cells would have received an
    /// exact `+ 0.0`, so the result is bitwise equal to calling
    /// [`DensityEstimate::kernel_sum`] at each center.
    pub fn kernel_sums(&self, est: &DensityEstimate) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(d, est.data().dim(), "grid and estimate dimensions differ");
        let h = est.bandwidth() * est.kernel().support_radius();
        let mut sums = vec![0.0; self.len()];
        let mut ranges = vec![(0usize, 0usize); d];
        let mut idx = vec![0usize; d];
        let mut center = vec![0.0; d];
        let strides: Vec<usize> = (0..d)
            .scan(1usize, |s, j| {
                let cur = *s;
                *s *= self.cells[j];
                Some(cur)
            })
            .collect();

        'points: for p in est.data().points() {
            for j in 0..d {
                let w = self.width(j);
                let lo = ((p[j] - h - self.lower[j]) / w - 0.5).floor() - 1.0;
                let hi = ((p[j] + h - self.lower[j]) / w - 0.5).ceil() + 1.0;
                let c = self.cells[j] as f64;
                if hi < 0.0 || lo >= c {
                    continue 'points;
                }
                ranges[j] = (lo.max(0.0) as usize, (hi.min(c - 1.0)) as usize);
            }
            for j in 0..d {
                idx[j] = ranges[j].0;
            }
            loop {
                let mut lin = 0;
                for j in 0..d {
                    center[j] = self.centers[j][idx[j]];
                    lin += idx[j] * strides[j];
                }
                let k = est.kernel_at(&center, p);
                if k != 0.0 {
                    sums[lin] += k;
                }
                let mut j = 0;
                loop {
                    if j == d {
                        continue 'points;
                    }
                    if idx[j] < ranges[j].1 {
                        idx[j] += 1;
                        break;
                    }
                    idx[j] = ranges[j].0;
                    j += 1;
                }
            }
        }
        sums
    }
}

/// A subset of a grid, one membership bit per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRegion {
    grid: Grid,
    mask: Vec<bool>,
}

impl GridRegion {
    pub fn new(grid: Grid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::invalid(format!(
                "mask has {} entries but the grid has {} cells",
                mask.len(),
                grid.len()
            )));
        }
        Ok(GridRegion { grid, mask })
    }

    pub fn full(grid: Grid) -> Self {
        let n = grid.len();
        GridRegion {
            grid,
            mask: vec![true; n],
        }
    }

    pub fn empty(grid: Grid) -> Self {
        let n = grid.len();
        GridRegion {
            grid,
            mask: vec![false; n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.grid.cell_volume()
    }

    fn check_same_grid(&self, other: &GridRegion) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn is_subset_of(&self, other: &GridRegion) -> Result<bool> {
        self.check_same_grid(other)?;
        Ok(self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b))
    }

    /// Number of cells in `self` but not in `other`.
    pub fn cells_outside(&self, other: &GridRegion) -> Result<usize> {
        self.check_same_grid(other)?;
        Ok(self
            .mask
            .iter()
            .zip(&other.mask)
            .filter(|(&a, &b)| a && !b)
            .count())
    }

    pub fn intersection_volume(&self, other: &GridRegion) -> Result<f64> {
        self.check_same_grid(other)?;
        let both = self
            .mask
            .iter()
            .zip(&other.mask)
            .filter(|(&a, &b)| a && b)
            .count();
        Ok(both as f64 * self.grid.cell_volume())
    }

    /// Whether any set cell lies on the outer layer of the grid.
    pub fn touches_boundary(&self) -> bool {
        let d = self.grid.dim();
        self.mask.iter().enumerate().any(|(i, &set)| {
            set && {
                let idx = self.grid.unravel(i);
                (0..d).any(|j| idx[j] == 0 || idx[j] + 1 == self.grid.cells[j])
            }
        })
    }
}

/// Evaluates `membership` at every cell center.
pub fn rasterize<F>(membership: F, grid: &Grid) -> GridRegion
where
    F: Fn(&[f64]) -> bool + Sync,
{
    let d = grid.dim();
    let mask = (0..grid.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; d],
            |buf, i| {
                grid.center_into(i, buf);
                membership(buf)
            },
        )
        .collect();
    GridRegion {
        grid: grid.clone(),
        mask,
    }
}

pub fn volume(r: &GridRegion) -> f64 {
    r.volume()
}

/// `mu(a xor b)`.
pub fn symmetric_difference_volume(a: &GridRegion, b: &GridRegion) -> Result<f64> {
    a.check_same_grid(b)?;
    let diff = a.mask.iter().zip(&b.mask).filter(|(&x, &y)| x != y).count();
    Ok(diff as f64 * a.grid.cell_volume())
}

/// `mu(c) - mu(oracle)`, signed.
pub fn excess_loss(c: &GridRegion, oracle: &GridRegion) -> Result<f64> {
    c.check_same_grid(oracle)?;
    Ok(c.volume() - oracle.volume())
}

/// Monte-Carlo volume of `membership` inside the box `[lower, upper]`.
///
/// Returns `(estimate, standard error)` with
/// `estimate = box volume * hit fraction` and
/// `SE = box volume * sqrt(p (1 - p) / samples)`. Samples are drawn in chunks
/// of [`MC_CHUNK`]; chunk `k` uses ChaCha8 stream `k` of `seed`, so the
/// result does not depend on the number of worker threads.
pub fn mc_volume<F>(
    membership: F,
    lower: &[f64],
    upper: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> bool + Sync,
{
    if samples < 100 {
        return Err(Error::invalid("Monte-Carlo volume needs at least 100 samples"));
    }
    let d = lower.len();
    if d == 0 || upper.len() != d || (0..d).any(|j| !(lower[j] < upper[j])) {
        return Err(Error::invalid("Monte-Carlo box must have lower < upper in every dimension"));
    }
    let box_volume: f64 = (0..d).map(|j| upper[j] - lower[j]).product();
    let chunks = samples.div_ceil(MC_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let len = MC_CHUNK.min(samples - k * MC_CHUNK);
            let mut y = vec![0.0; d];
            let mut hit = 0;
            for _ in 0..len {
                for j in 0..d {
                    y[j] = lower[j] + rng.random::<f64>() * (upper[j] - lower[j]);
                }
                hit += membership(&y) as usize;
            }
            hit
        })
        .sum();
    let p = hits as f64 / samples as f64;
    let se = box_volume * (p * (1.0 - p) / samples as f64).sqrt();
    Ok((box_volume * p, se))
}

/// Wire form of a [`GridRegion`].
///
/// `rle` holds alternating run lengths over the cells in linear order,
/// starting with a run of unset cells (possibly of length 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRegionJson {
    pub format: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
    pub set_cells: usize,
    pub volume: f64,
    pub rle: Vec<usize>,
}

pub const GRID_REGION_FORMAT: &str = "grid-region-v1";

impl GridRegion {
    pub fn to_wire(&self) -> GridRegionJson {
        let mut rle = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &b in &self.mask {
            if b == current {
                run += 1;
            } else {
                rle.push(run);
                current = b;
                run = 1;
            }
        }
        rle.push(run);
        GridRegionJson {
            format: GRID_REGION_FORMAT.to_string(),
            lower: self.grid.lower.clone(),
            upper: self.grid.upper.clone(),
            cells: self.grid.cells.clone(),
            set_cells: self.count(),
            volume: self.volume(),
            rle,
        }
    }

    pub fn from_wire(w: &GridRegionJson) -> Result<Self> {
        if w.format != GRID_REGION_FORMAT {
            return Err(Error::invalid(format!("unsupported region format `{}`", w.format)));
        }
        let grid = Grid::new(w.lower.clone(), w.upper.clone(), w.cells.clone())?;
        let mut mask = Vec::with_capacity(grid.len());
        let mut value = false;
        for &run in &w.rle {
            mask.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
        let region = GridRegion::new(grid, mask)?;
        if region.count() != w.set_cells {
            return Err(Error::invalid("set_cells does not match the decoded mask"));
        }
        Ok(region)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Dataset;
    use crate::kernels::{product_kernel, KernelFamily};
    use proptest::prelude::*;

    fn square(lo: f64, hi: f64, n: usize) -> Grid {
        Grid::new(vec![lo, lo], vec![hi, hi], vec![n, n]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![0.0], vec![0.0], vec![4]).is_err());
        assert!(Grid::new(vec![0.0], vec![1.0], vec![0]).is_err());
        assert!(Grid::new(vec![0.0, 0.0], vec![1.0], vec![2, 2]).is_err());
        assert!(Grid::new(vec![f64::NAN], vec![1.0], vec![2]).is_err());
        let g = Grid::new(vec![0.0, -1.0], vec![2.0, 1.0], vec![4, 2]).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g.cell_volume(), 0.5);
        assert_eq!(g.center(0), vec![0.25, -0.5]);
        assert_eq!(g.center(5), vec![0.75, 0.5]);
        assert_eq!(g.unravel(5), vec![1, 1]);
    }

    #[test]
    fn full_and_empty() {
        let g = square(0.0, 1.0, 10);
        let full = rasterize(|_| true, &g);
        let empty = rasterize(|_| false, &g);
        assert_eq!(full.count(), 100);
        assert_eq!(empty.count(), 0);
        assert!((volume(&full) - 1.0).abs() < 1e-12);
        assert_eq!(volume(&empty), 0.0);
        assert_eq!(symmetric_difference_volume(&full, &full).unwrap(), 0.0);
        assert!((symmetric_difference_volume(&full, &empty).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_disk_area() {
        let g = square(-2.0, 2.0, 400);
        let disk = rasterize(|y| y[0] * y[0] + y[1] * y[1] <= 1.0, &g);
        assert!((disk.volume() - std::f64::consts::PI).abs() < 0.01);
    }

    #[test]
    fn half_space() {
        let g = square(-1.0, 1.0, 201);
        let half = rasterize(|y| y[0] >= 0.0, &g);
        let tol = g.cell_volume() * 201.0;
        assert!((half.volume() - 2.0).abs() <= tol);
    }

    #[test]
    fn refinement_on_disk() {
        // Error bound: on the order of one cell width times the perimeter.
        let disk = |y: &[f64]| y[0] * y[0] + y[1] * y[1] <= 1.0;
        let coarse_grid = square(-2.0, 2.0, 100);
        let fine_grid = square(-2.0, 2.0, 200);
        let coarse = rasterize(disk, &coarse_grid).volume();
        let fine = rasterize(disk, &fine_grid).volume();
        let surface = 2.0 * std::f64::consts::PI * coarse_grid.width(0);
        assert!((fine - coarse).abs() < 2.0 * surface);
    }

    #[test]
    fn excess_loss_identities() {
        let g = square(-2.0, 2.0, 50);
        let small = rasterize(|y| y[0].hypot(y[1]) <= 1.0, &g);
        let big = rasterize(|y| y[0].hypot(y[1]) <= 1.5, &g);
        assert_eq!(excess_loss(&small, &small).unwrap(), 0.0);
        let e = excess_loss(&big, &small).unwrap();
        let outside = big.cells_outside(&small).unwrap() as f64 * g.cell_volume();
        assert!((e - outside).abs() < 1e-9);
        assert!(e <= symmetric_difference_volume(&big, &small).unwrap() + 1e-12);
        assert!(excess_loss(&small, &big).unwrap() < 0.0);
        let other = rasterize(|_| true, &square(-2.0, 2.0, 51));
        assert!(matches!(excess_loss(&small, &other), Err(Error::GridMismatch)));
        assert!(matches!(symmetric_difference_volume(&small, &other), Err(Error::GridMismatch)));
    }

    #[test]
    fn boundary_detection() {
        let g = square(-1.0, 1.0, 10);
        assert!(!rasterize(|y| y[0].hypot(y[1]) < 0.5, &g).touches_boundary());
        assert!(rasterize(|y| y[0] > 0.85, &g).touches_boundary());
    }

    #[test]
    fn mc_volume_contract() {
        let lo = [-2.0, -2.0];
        let hi = [2.0, 2.0];
        let (v, se) = mc_volume(|_| true, &lo, &hi, 1000, 1).unwrap();
        assert_eq!((v, se), (16.0, 0.0));
        let disk = |y: &[f64]| y[0] * y[0] + y[1] * y[1] <= 1.0;
        let (v, se) = mc_volume(disk, &lo, &hi, 1_000_000, 42).unwrap();
        assert!((v - std::f64::consts::PI).abs() < 3.0 * se, "{v} ± {se}");
        assert_eq!(mc_volume(disk, &lo, &hi, 5000, 9).unwrap(), mc_volume(disk, &lo, &hi, 5000, 9).unwrap());
        assert!(mc_volume(disk, &lo, &hi, 99, 9).is_err());
    }

    #[test]
    fn splatted_sums_are_bitwise_direct() {
        for (d, h) in [(1usize, 0.3), (2, 0.45), (2, 0.05), (3, 0.6)] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(d as u64);
            let pts = (0..40 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let data = Dataset::from_flat(d, pts).unwrap();
            let est = DensityEstimate::new(data, product_kernel(KernelFamily::UniformBox, d).unwrap(), h).unwrap();
            let grid = Grid::covering(&est, if d == 3 { 20 } else { 60 }).unwrap();
            let sums = grid.kernel_sums(&est);
            for (i, &s) in sums.iter().enumerate() {
                assert_eq!(s.to_bits(), est.kernel_sum(&grid.center(i)).to_bits());
            }
        }
        // Points outside a grid that does not cover them.
        let data = Dataset::new(vec![vec![5.0, 5.0], vec![0.1, 0.0]]).unwrap();
        let est = DensityEstimate::new(data, product_kernel(KernelFamily::Epanechnikov, 2).unwrap(), 0.5).unwrap();
        let grid = square(-1.0, 1.0, 30);
        let sums = grid.kernel_sums(&est);
        for (i, &s) in sums.iter().enumerate() {
            assert_eq!(s.to_bits(), est.kernel_sum(&grid.center(i)).to_bits());
        }
    }

    #[test]
    fn wire_roundtrip_and_layout() {
        let g = Grid::new(vec![0.0], vec![6.0], vec![6]).unwrap();
        let r = GridRegion::new(g, vec![true, true, false, false, false, true]).unwrap();
        let w = r.to_wire();
        assert_eq!(w.rle, vec![0, 2, 3, 1]);
        assert_eq!(w.set_cells, 3);
        assert_eq!(GridRegion::from_wire(&w).unwrap(), r);
        let mut bad = w.clone();
        bad.set_cells = 2;
        assert!(GridRegion::from_wire(&bad).is_err());
    }

    proptest! {
        #[test]
        fn set_identities(bits in prop::collection::vec(any::<(bool, bool)>(), 64)) {
            let g = square(0.0, 2.0, 8);
            let a = GridRegion::new(g.clone(), bits.iter().map(|p| p.0).collect()).unwrap();
            let b = GridRegion::new(g, bits.iter().map(|p| p.1).collect()).unwrap();
            let sd = symmetric_difference_volume(&a, &b).unwrap();
            let ident = a.volume() + b.volume() - 2.0 * a.intersection_volume(&b).unwrap();
            prop_assert_eq!(sd, ident);
            if a.is_subset_of(&b).unwrap() {
                prop_assert!(a.volume() <= b.volume());
            }
            prop_assert_eq!(GridRegion::from_wire(&a.to_wire()).unwrap(), a);
        }
    }
}
