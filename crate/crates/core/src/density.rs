//! Kernel density estimation and the augmented estimator used as the
//! conformity score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::kernels::KernelSpec;

/// An ordered sample of `n >= 1` finite points in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("dataset must contain at least one point"))?;
        let mut values = Vec::with_capacity(dim * points.len());
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::invalid(format!(
                    "point {i} has dimension {}, expected {dim}",
                    p.len()
                )));
            }
            values.extend_from_slice(p);
        }
        Self::from_flat(dim, values)
    }

    /// Builds a dataset from row-major coordinates.
    pub fn from_flat(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("points must have dimension at least 1"));
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} coordinates cannot form points of dimension {dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "point {} has a non-finite coordinate",
                pos / dim
            )));
        }
        Ok(Dataset { dim, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    /// `aug(Y, y)`: the sample with `y` appended.
    pub fn augmented(&self, y: &[f64]) -> Result<Dataset> {
        self.check_dim(y)?;
        let mut values = self.values.clone();
        values.extend_from_slice(y);
        Dataset::from_flat(self.dim, values)
    }

    /// The points at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.point(i));
        }
        Dataset::from_flat(self.dim, values)
    }

    /// Componentwise `(min, max)`.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in self.points() {
            for j in 0..self.dim {
                lo[j] = lo[j].min(p[j]);
                hi[j] = hi[j].max(p[j]);
            }
        }
        (lo, hi)
    }

    pub(crate) fn check_dim(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: u.len(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<f64>>> for Dataset {
    type Error = Error;

    fn try_from(points: Vec<Vec<f64>>) -> Result<Self> {
        Dataset::new(points)
    }
}

impl From<Dataset> for Vec<Vec<f64>> {
    fn from(d: Dataset) -> Self {
        d.points().map(<[f64]>::to_vec).collect()
    }
}

/// The fixed-bandwidth kernel density estimate
/// `p_n(u) = (1 / (n h^d)) sum_i K((u - Y_i) / h)`.
///
/// Sums run over the data in their stored order; nothing is reordered, so
/// equal inputs always produce bitwise equal sums.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    data: Dataset,
    kernel: KernelSpec,
    bandwidth: f64,
    h_pow_d: f64,
}

impl DensityEstimate {
    pub fn new(data: Dataset, kernel: KernelSpec, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::invalid(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        if kernel.dim() != data.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                found: kernel.dim(),
            });
        }
        let h_pow_d = bandwidth.powi(data.dim() as i32);
        if !(h_pow_d > 0.0) || !h_pow_d.is_finite() {
            return Err(Error::Degenerate(format!(
                "bandwidth {bandwidth} to the power {} is not representable",
                data.dim()
            )));
        }
        Ok(DensityEstimate {
            data,
            kernel,
            bandwidth,
            h_pow_d,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    /// `h^d`.
    pub fn h_pow_d(&self) -> f64 {
        self.h_pow_d
    }

    /// `n h^d`, the factor between kernel sums and density values.
    pub fn normalizer(&self) -> f64 {
        self.n() as f64 * self.h_pow_d
    }

    /// `sum_i K((u - Y_i) / h)`, unnormalized.
    #[inline]
    pub fn kernel_sum(&self, u: &[f64]) -> f64 {
        let h = self.bandwidth;
        let mut s = 0.0;
        for p in self.data.points() {
            s += self.kernel.eval_scaled(u, p, h);
        }
        s
    }

    /// `K((u - y) / h)` for an arbitrary pair of points.
    #[inline]
    pub fn kernel_at(&self, u: &[f64], y: &[f64]) -> f64 {
        self.kernel.eval_scaled(u, y, self.bandwidth)
    }

    /// `p_n(u)`.
    pub fn eval(&self, u: &[f64]) -> Result<f64> {
        self.data.check_dim(u)?;
        Ok(self.density_from_sum(self.kernel_sum(u)))
    }

    #[inline]
    pub(crate) fn density_from_sum(&self, s: f64) -> f64 {
        s / self.normalizer()
    }

    /// The augmented estimate `p_n^y(u) = n/(n+1) p_n(u) + K((u-y)/h) / ((n+1) h^d)`,
    /// i.e. the estimate built on `aug(Y, y)`, evaluated at `u`.
    pub fn augmented_eval(&self, y: &[f64], u: &[f64]) -> Result<f64> {
        self.data.check_dim(y)?;
        let n = self.n() as f64;
        let base = self.eval(u)?;
        Ok((n / (n + 1.0)) * base + self.kernel_at(u, y) / ((n + 1.0) * self.h_pow_d))
    }

    /// Componentwise bounds of the support of `p_n`: data range expanded by
    /// `h` on each side.
    pub fn support_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = self.data.bounds();
        let r = self.bandwidth * self.kernel.support_radius();
        for j in 0..lo.len() {
            lo[j] -= r;
            hi[j] += r;
        }
        (lo, hi)
    }
}

/// Shorthand for [`DensityEstimate::eval`].
pub fn kde_eval(est: &DensityEstimate, u: &[f64]) -> Result<f64> {
    est.eval(u)
}

/// Shorthand for [`DensityEstimate::augmented_eval`].
pub fn augmented_eval(est: &DensityEstimate, y: &[f64], u: &[f64]) -> Result<f64> {
    est.augmented_eval(y, u)
}

/// Midpoint-rule integral of `p_n` over `grid`.
///
/// Returns [`Error::Coverage`] carrying the (truncated) integral when the
/// grid does not contain the data range expanded by `h`.
pub fn kde_normalization_check(est: &DensityEstimate, grid: &Grid) -> Result<f64> {
    if grid.dim() != est.data().dim() {
        return Err(Error::DimensionMismatch {
            expected: est.data().dim(),
            found: grid.dim(),
        });
    }
    let sums = grid.kernel_sums(est);
    let integral = sums.iter().sum::<f64>() * grid.cell_volume() / est.normalizer();
    let (lo, hi) = est.support_bounds();
    let covers = (0..grid.dim()).all(|j| grid.lower()[j] <= lo[j] && grid.upper()[j] >= hi[j]);
    if covers {
        Ok(integral)
    } else {
        Err(Error::Coverage { integral })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{product_kernel, KernelFamily};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn epan(d: usize) -> KernelSpec {
        product_kernel(KernelFamily::Epanechnikov, d).unwrap()
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
        Dataset::from_flat(d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    // Independent double-loop KDE used as the oracle.
    fn brute_kde(points: &[Vec<f64>], h: f64, u: &[f64]) -> f64 {
        let d = u.len();
        let mut total = 0.0;
        for p in points {
            let mut k = 1.0;
            for j in 0..d {
                let x = (u[j] - p[j]) / h;
                k *= if x.abs() <= 1.0 { 0.75 * (1.0 - x * x) } else { 0.0 };
            }
            total += k;
        }
        total / (points.len() as f64 * h.powi(d as i32))
    }

    #[test]
    fn single_point() {
        let est = DensityEstimate::new(Dataset::new(vec![vec![0.0]]).unwrap(), epan(1), 1.0).unwrap();
        assert_eq!(est.eval(&[0.0]).unwrap(), 0.75);
        assert_eq!(est.eval(&[2.0]).unwrap(), 0.0);
        assert_eq!(est.augmented_eval(&[2.0], &[0.0]).unwrap(), 0.375);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![]).is_err());
        assert!(Dataset::new(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(Dataset::new(vec![vec![f64::NAN]]).is_err());
        assert!(Dataset::from_flat(2, vec![1.0, 2.0, 3.0]).is_err());
        let d = Dataset::new(vec![vec![1.0, 5.0], vec![-1.0, 2.0]]).unwrap();
        assert_eq!(d.bounds(), (vec![-1.0, 2.0], vec![1.0, 5.0]));
        assert!(DensityEstimate::new(d.clone(), epan(2), 0.0).is_err());
        assert!(DensityEstimate::new(d.clone(), epan(1), 1.0).is_err());
        let est = DensityEstimate::new(d, epan(2), 1.0).unwrap();
        assert!(matches!(est.eval(&[0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(est.augmented_eval(&[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_data(&mut rng, 50, 2);
        let points: Vec<Vec<f64>> = data.clone().into();
        let est = DensityEstimate::new(data, epan(2), 0.7).unwrap();
        for _ in 0..20 {
            let u = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            let got = est.eval(&u).unwrap();
            assert!((got - brute_kde(&points, 0.7, &u)).abs() < 1e-12);
        }
    }

    #[test]
    fn self_term_far_from_data() {
        let data = Dataset::new(vec![vec![0.0, 0.0], vec![0.1, 0.1], vec![0.2, 0.0]]).unwrap();
        let est = DensityEstimate::new(data, epan(2), 0.5).unwrap();
        let y = [10.0, 10.0];
        let v = est.augmented_eval(&y, &y).unwrap();
        assert_eq!(v, 0.5625 / (4.0 * 0.25));
    }

    #[test]
    fn augmented_matches_explicit_augmentation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let data = random_data(&mut rng, 30, 2);
            let h = rng.random_range(0.2..1.5);
            let est = DensityEstimate::new(data.clone(), epan(2), h).unwrap();
            let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let aug = DensityEstimate::new(data.augmented(&y).unwrap(), epan(2), h).unwrap();
            for _ in 0..10 {
                let u = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
                let a = est.augmented_eval(&y, &u).unwrap();
                let b = aug.eval(&u).unwrap();
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_data(&mut rng, 200, 2);
        let est = DensityEstimate::new(data, epan(2), 0.5).unwrap();
        let grid = Grid::covering(&est, 200).unwrap();
        let total = kde_normalization_check(&est, &grid).unwrap();
        assert!((total - 1.0).abs() < 1e-3, "{total}");

        let truncated = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![100, 100]).unwrap();
        match kde_normalization_check(&est, &truncated) {
            Err(Error::Coverage { integral }) => assert!(integral < 1.0),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn normalization_1d_fine_grid() {
        let data = Dataset::new(vec![vec![0.0], vec![0.3], vec![2.0]]).unwrap();
        let est = DensityEstimate::new(data, epan(1), 0.4).unwrap();
        let grid = Grid::new(vec![-1.0], vec![3.0], vec![4000]).unwrap();
        let total = kde_normalization_check(&est, &grid).unwrap();
        assert!((total - 1.0).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn augmented_identity_is_exact(
            seed in any::<u64>(),
            h in 0.1f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_data(&mut rng, 15, 2);
            let est = DensityEstimate::new(data, epan(2), h).unwrap();
            let y = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let u = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let n = 15.0;
            let lhs = est.augmented_eval(&y, &u).unwrap();
            let rhs = (n / (n + 1.0)) * est.eval(&u).unwrap()
                + est.kernel().eval(&[(u[0] - y[0]) / h, (u[1] - y[1]) / h]).unwrap()
                    / ((n + 1.0) * h.powi(2));
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn nonnegative_and_compact(seed in any::<u64>(), h in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_data(&mut rng, 10, 2);
            let est = DensityEstimate::new(data.clone(), epan(2), h).unwrap();
            let u = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let v = est.eval(&u).unwrap();
            prop_assert!(v >= 0.0);
            let far = data.points().all(|p| {
                ((u[0] - p[0]).powi(2) + (u[1] - p[1]).powi(2)).sqrt() > h * 2f64.sqrt()
            });
            if far {
                prop_assert_eq!(v, 0.0);
            }
        }

        #[test]
        fn permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_data(&mut rng, 25, 2);
            let mut rows: Vec<Vec<f64>> = data.clone().into();
            rows.reverse();
            rows.swap(0, 7);
            let a = DensityEstimate::new(data, epan(2), 0.8).unwrap();
            let b = DensityEstimate::new(Dataset::new(rows).unwrap(), epan(2), 0.8).unwrap();
            let u = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            prop_assert!((a.eval(&u).unwrap() - b.eval(&u).unwrap()).abs() < 1e-10);
        }
    }
}
