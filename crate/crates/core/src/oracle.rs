//! Ground-truth distributions and the ideal level-set region they induce.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{rasterize, symmetric_difference_volume, excess_loss, Grid, GridRegion, MC_CHUNK};

/// A distribution the harness can sample from and, for oracle regions,
/// evaluate the density of.
pub trait Truth: Sync {
    fn dim(&self) -> usize;

    /// Density at `y`; `y.len() == self.dim()` is the caller's responsibility.
    fn pdf(&self, y: &[f64]) -> f64;

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]);

    /// `n` i.i.d. draws.
    fn sample_dataset<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Dataset> {
        let d = self.dim();
        let mut values = vec![0.0; n * d];
        for chunk in values.chunks_exact_mut(d) {
            self.sample_into(rng, chunk);
        }
        Dataset::from_flat(d, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    weight: f64,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    /// Lower Cholesky factor, row-major.
    chol: Vec<f64>,
    log_norm: f64,
}

/// A finite Gaussian mixture `sum_k w_k N(mu_k, Sigma_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct MixtureDensity {
    dim: usize,
    components: Vec<Component>,
}

/// Config/wire form of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MixtureSpec> for MixtureDensity {
    type Error = Error;

    fn try_from(s: MixtureSpec) -> Result<Self> {
        MixtureDensity::new(s.weights, s.means, s.covariances)
    }
}

impl From<MixtureDensity> for MixtureSpec {
    fn from(m: MixtureDensity) -> Self {
        MixtureSpec {
            weights: m.components.iter().map(|c| c.weight).collect(),
            means: m.components.iter().map(|c| c.mean.clone()).collect(),
            covariances: m.components.iter().map(|c| c.covariance.clone()).collect(),
        }
    }
}

impl MixtureDensity {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::invalid(
                "mixture needs equally many weights, means and covariances (at least one)",
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be at least 1"));
        }
        let mut components = Vec::with_capacity(k);
        for (i, ((weight, mean), cov)) in weights.into_iter().zip(means).zip(covariances).enumerate() {
            if mean.len() != dim || mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("component {i}: mean must be finite of dimension {dim}")));
            }
            if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
                return Err(Error::invalid(format!("component {i}: covariance must be {dim}x{dim}")));
            }
            let m = DMatrix::from_fn(dim, dim, |r, c| cov[r][c]);
            if (0..dim).any(|r| (0..dim).any(|c| (m[(r, c)] - m[(c, r)]).abs() > 1e-12 * (1.0 + m[(r, c)].abs()))) {
                return Err(Error::invalid(format!("component {i}: covariance is not symmetric")));
            }
            let chol = nalgebra::Cholesky::new(m).ok_or_else(|| {
                Error::invalid(format!("component {i}: covariance is not positive definite"))
            })?;
            let l = chol.l();
            let mut flat = vec![0.0; dim * dim];
            let mut log_det_half = 0.0;
            for r in 0..dim {
                for c in 0..=r {
                    flat[r * dim + c] = l[(r, c)];
                }
                log_det_half += l[(r, r)].ln();
            }
            let log_norm = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() - log_det_half;
            components.push(Component {
                weight,
                mean,
                covariance: cov,
                chol: flat,
                log_norm,
            });
        }
        Ok(MixtureDensity { dim, components })
    }

    /// `N(0, I_d)`.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        let cov = (0..dim)
            .map(|r| (0..dim).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
            .collect();
        MixtureDensity::new(vec![1.0], vec![vec![0.0; dim]], vec![cov])
    }

    /// The repository's reference two-component 2-d mixture. Two elongated,
    /// correlated components meet at a corner so that the 0.9 level set is
    /// L-shaped; its ideal region at `alpha = 0.1` has area about 27.9.
    pub fn reference_l_shape() -> Self {
        MixtureDensity::new(
            vec![0.5, 0.5],
            vec![vec![2.25, 0.0], vec![0.0, 2.25]],
            vec![
                vec![vec![3.2, 0.5], vec![0.5, 0.5]],
                vec![vec![0.5, 0.5], vec![0.5, 3.2]],
            ],
        )
        .expect("reference mixture is valid")
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Density with a dimension check.
    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: y.len(),
            });
        }
        Ok(Truth::pdf(self, y))
    }
}

impl Truth for MixtureDensity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn pdf(&self, y: &[f64]) -> f64 {
        let d = self.dim;
        let mut v = [0.0f64; 8];
        let mut heap;
        let buf: &mut [f64] = if d <= 8 {
            &mut v[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut total = 0.0;
        for c in &self.components {
            // Forward substitution L v = y - mu.
            let mut quad = 0.0;
            for r in 0..d {
                let mut acc = y[r] - c.mean[r];
                for k in 0..r {
                    acc -= c.chol[r * d + k] * buf[k];
                }
                buf[r] = acc / c.chol[r * d + r];
                quad += buf[r] * buf[r];
            }
            total += c.weight * (c.log_norm - 0.5 * quad).exp();
        }
        total
    }

    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let mut z = [0.0f64; 8];
        let mut heap;
        let z: &mut [f64] = if d <= 8 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for r in 0..d {
            let mut acc = chosen.mean[r];
            for k in 0..=r {
                acc += chosen.chol[r * d + k] * z[k];
            }
            out[r] = acc;
        }
    }
}

/// [`MixtureDensity::eval`].
pub fn mixture_pdf(m: &MixtureDensity, y: &[f64]) -> Result<f64> {
    m.eval(y)
}

/// Monte-Carlo estimate of the ideal cutoff `t(alpha)` with `G(t) = alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleCutoff {
    pub cutoff: f64,
    /// Half the spread between the order statistics one binomial standard
    /// deviation either side of the quantile.
    pub se: f64,
    pub samples: usize,
}

/// Draws `mc_samples` points from `truth`, evaluates the density at each, and
/// returns the empirical `alpha`-quantile of those values (the smallest value
/// `v` with at least `alpha * mc_samples` values `<= v`).
///
/// Sampling runs in chunks of [`MC_CHUNK`], chunk `k` on ChaCha8 stream `k`
/// of `seed`, so the result is independent of the worker count. Errors with
/// [`Error::Atom`] if more than 0.1% of the values tie with the cutoff to
/// relative precision `1e-12`.
pub fn oracle_cutoff<T: Truth>(truth: &T, alpha: f64, mc_samples: usize, seed: u64) -> Result<OracleCutoff> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if mc_samples < 10_000 {
        return Err(Error::invalid("oracle cutoff needs at least 10^4 Monte-Carlo samples"));
    }
    let mut values = density_samples(truth, mc_samples, seed);
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let k = ((alpha * n as f64).ceil() as usize).clamp(1, n) - 1;
    let cutoff = values[k];
    let spread = (n as f64 * alpha * (1.0 - alpha)).sqrt().ceil() as usize;
    let lo = values[k.saturating_sub(spread)];
    let hi = values[(k + spread).min(n - 1)];
    let ties = values
        .iter()
        .filter(|&&v| (v - cutoff).abs() <= 1e-12 * cutoff.abs())
        .count();
    let fraction = ties as f64 / n as f64;
    if fraction > 1e-3 {
        return Err(Error::Atom { cutoff, fraction });
    }
    Ok(OracleCutoff {
        cutoff,
        se: 0.5 * (hi - lo),
        samples: n,
    })
}

fn density_samples<T: Truth>(truth: &T, samples: usize, seed: u64) -> Vec<f64> {
    let d = truth.dim();
    let chunks = samples.div_ceil(MC_CHUNK);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let len = MC_CHUNK.min(samples - k * MC_CHUNK);
            let mut y = vec![0.0; d];
            (0..len)
                .map(|_| {
                    truth.sample_into(&mut rng, &mut y);
                    truth.pdf(&y)
                })
                .collect()
        })
        .collect();
    parts.concat()
}

/// The ideal region `{y: p(y) >= t(alpha)}`.
#[derive(Debug, Clone)]
pub struct OracleRegion<T = MixtureDensity> {
    pub density: T,
    pub cutoff: OracleCutoff,
    pub alpha: f64,
}

impl<T: Truth> OracleRegion<T> {
    pub fn contains(&self, y: &[f64]) -> bool {
        self.density.pdf(y) >= self.cutoff.cutoff
    }

    /// Probability mass of `{y: member(y)}` under the truth, by fresh
    /// Monte-Carlo: `(estimate, standard error)`.
    pub fn mass_of<F>(&self, member: F, samples: usize, seed: u64) -> (f64, f64)
    where
        F: Fn(&[f64]) -> bool + Sync,
    {
        probability_mass(&self.density, member, samples, seed)
    }
}

/// `P(member)` under `truth` by Monte-Carlo: `(estimate, standard error)`.
pub fn probability_mass<T, F>(truth: &T, member: F, samples: usize, seed: u64) -> (f64, f64)
where
    T: Truth,
    F: Fn(&[f64]) -> bool + Sync,
{
    let d = truth.dim();
    let chunks = samples.div_ceil(MC_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let len = MC_CHUNK.min(samples - k * MC_CHUNK);
            let mut y = vec![0.0; d];
            (0..len)
                .filter(|_| {
                    truth.sample_into(&mut rng, &mut y);
                    member(&y)
                })
                .count()
        })
        .sum();
    let p = hits as f64 / samples.max(1) as f64;
    (p, (p * (1.0 - p) / samples.max(1) as f64).sqrt())
}

/// Estimates the cutoff and rasterizes the ideal region on `grid`.
///
/// Errors with [`Error::GridTooSmall`] when a set cell lies on the outer
/// layer of the grid.
pub fn oracle_region<T: Truth + Clone>(
    truth: &T,
    alpha: f64,
    grid: &Grid,
    mc_samples: usize,
    seed: u64,
) -> Result<(OracleRegion<T>, GridRegion)> {
    if grid.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            expected: truth.dim(),
            found: grid.dim(),
        });
    }
    let cutoff = oracle_cutoff(truth, alpha, mc_samples, seed)?;
    let region = OracleRegion {
        density: truth.clone(),
        cutoff,
        alpha,
    };
    let raster = rasterize(|y| region.contains(y), grid);
    if raster.touches_boundary() {
        return Err(Error::GridTooSmall);
    }
    Ok((region, raster))
}

/// Losses of an estimated region against the rasterized oracle region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleLoss {
    pub sym_diff: f64,
    pub excess: f64,
}

pub fn loss_against_oracle(estimate: &GridRegion, oracle: &GridRegion) -> Result<OracleLoss> {
    Ok(OracleLoss {
        sym_diff: symmetric_difference_volume(estimate, oracle)?,
        excess: excess_loss(estimate, oracle)?,
    })
}
