//! Conformal p-values, prediction-region membership and the sandwiching
//! plug-in level sets.
//!
//! All comparisons are carried out on unnormalized kernel sums
//! `S(u) = sum_i K((u - Y_i)/h)`, which differ from density values by the
//! positive factor `n h^d`. The comparison `p^y(Y_i) <= p^y(y)` of augmented
//! scores becomes
//!
//! ```text
//! (S(Y_i) - S(y)) + (K((Y_i - y)/h) - K(0)) <= 0
//! ```
//!
//! after multiplying through by `(n + 1) h^d`. Each comparison is decided
//! exactly in terms of the computed kernel values: a rounding-error bound
//! settles almost every case, and the rest fall back to an exact summation.
//! The fast p-value then agrees with the definition, and the inclusions
//! `L- ⊆ C ⊆ L+` hold exactly rather than up to rounding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::density::{Dataset, DensityEstimate};
use crate::error::{Error, Result};
use crate::geometry::{Grid, GridRegion};

/// `floor((n + 1) alpha)`, with a relative slack of a few ulps so that decimal
/// levels such as `0.3` with `n + 1 = 10` land on the intended integer.
pub fn cut_index(n: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let x = (n + 1) as f64 * alpha;
    let i = (x * (1.0 + 8.0 * f64::EPSILON)).floor() as usize;
    Ok(i.min(n))
}

/// `floor((n + 1) alpha) / (n + 1)`.
pub fn alpha_tilde(n: usize, alpha: f64) -> Result<f64> {
    Ok(cut_index(n, alpha)? as f64 / (n + 1) as f64)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Plug-in cutoffs of the inner and outer sandwiching sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichCutoffs {
    /// `p_n(Y_(i_cut))`, or `-inf` when degenerate.
    pub t_minus: f64,
    /// `t_minus - psi_K / (n h^d)`, or `-inf` when degenerate.
    pub t_plus: f64,
    /// `i_cut = 0`: both sets are all of `R^d`.
    pub degenerate: bool,
}

/// Membership of one point in the three regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub inner: bool,
    pub conformal: bool,
    pub outer: bool,
}

/// One of the three regions a model defines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Conformal,
    SandwichInner,
    SandwichOuter,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Conformal, Estimator::SandwichInner, Estimator::SandwichOuter];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Conformal => "conformal",
            Estimator::SandwichInner => "sandwich_inner",
            Estimator::SandwichOuter => "sandwich_outer",
        }
    }

    pub fn pick(self, c: Classification) -> bool {
        match self {
            Estimator::Conformal => c.conformal,
            Estimator::SandwichInner => c.inner,
            Estimator::SandwichOuter => c.outer,
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "conformal" => Ok(Estimator::Conformal),
            "sandwich_inner" | "inner" => Ok(Estimator::SandwichInner),
            "sandwich_outer" | "outer" => Ok(Estimator::SandwichOuter),
            other => Err(Error::invalid(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Rasterized regions sharing one grid.
#[derive(Debug, Clone)]
pub struct SandwichRegions {
    pub inner: GridRegion,
    pub conformal: GridRegion,
    pub outer: GridRegion,
}

impl SandwichRegions {
    pub fn get(&self, e: Estimator) -> &GridRegion {
        match e {
            Estimator::Conformal => &self.conformal,
            Estimator::SandwichInner => &self.inner,
            Estimator::SandwichOuter => &self.outer,
        }
    }
}

/// Unit roundoff of `f64`.
const U: f64 = f64::EPSILON / 2.0;

/// Error bound for a kernel sum of `m` nonnegative terms accumulated in
/// order. Bounds `|computed - exact|` given the computed value.
#[inline]
fn sum_error(m: usize, s: f64) -> f64 {
    (2 * m + 4) as f64 * U * s
}

/// Sign of `v` when the rounding error is known to be below `bound`.
#[inline]
fn certain_sign(v: f64, bound: f64) -> Option<Ordering> {
    if v > bound {
        Some(Ordering::Greater)
    } else if v < -bound {
        Some(Ordering::Less)
    } else {
        None
    }
}

/// Exact expansion of a sum of floats as nonoverlapping partials in
/// increasing magnitude.
fn expansion(terms: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in terms {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        if x != 0.0 || partials.is_empty() {
            partials.push(x);
        }
    }
    partials.retain(|&p| p != 0.0);
    partials
}

/// Exact sign of a sum of floats.
fn exact_sign(terms: impl IntoIterator<Item = f64>) -> Ordering {
    expansion(terms)
        .last()
        .map_or(Ordering::Equal, |p| p.total_cmp(&0.0))
}

/// Exact kernel sum at a query, computed on first use.
struct QuerySum<'a> {
    y: &'a [f64],
    s: f64,
    exact: Option<Vec<f64>>,
}

impl<'a> QuerySum<'a> {
    fn new(y: &'a [f64], s: f64) -> Self {
        QuerySum { y, s, exact: None }
    }

    fn exact(&mut self, est: &DensityEstimate) -> &[f64] {
        let (y, s) = (self.y, self.s);
        self.exact.get_or_insert_with(|| {
            // A sum of nonnegative terms is zero only if every term is.
            if s == 0.0 {
                Vec::new()
            } else {
                expansion(est.data().points().map(|q| est.kernel_at(y, q)))
            }
        })
    }
}

/// Kernel-density conformal predictor at a fixed level.
///
/// Construction scores every sample point (`O(n^2 d)`) and sorts the scores;
/// afterwards the model is immutable and queries are `O(n d)`.
#[derive(Debug, Clone)]
pub struct ConformalModel {
    est: DensityEstimate,
    alpha: f64,
    i_cut: usize,
    scores: Vec<f64>,
    /// Exact expansions of the scores.
    exact: Vec<Vec<f64>>,
    sorted: Vec<f64>,
    /// Data index of `Y_(i_cut)`.
    cut: Option<usize>,
}

impl ConformalModel {
    pub fn new(est: DensityEstimate, alpha: f64) -> Result<Self> {
        let n = est.n();
        let i_cut = cut_index(n, alpha)?;
        let mut scores = Vec::with_capacity(n);
        let mut exact = Vec::with_capacity(n);
        let mut row = Vec::with_capacity(n);
        for p in est.data().points() {
            row.clear();
            row.extend(est.data().points().map(|q| est.kernel_at(p, q)));
            // Same order as `kernel_sum`, so the score is bitwise identical.
            scores.push(row.iter().fold(0.0, |acc, &k| acc + k));
            exact.push(expansion(row.iter().copied()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (scores[a], scores[b]);
            let bound = sum_error(n, sa) + sum_error(n, sb) + U * (sa + sb);
            certain_sign(sa - sb, bound)
                .unwrap_or_else(|| exact_sign(exact[a].iter().copied().chain(exact[b].iter().map(|x| -x))))
        });
        let sorted = order.iter().map(|&i| scores[i]).collect();
        let cut = i_cut.checked_sub(1).map(|i| order[i]);
        Ok(ConformalModel {
            est,
            alpha,
            i_cut,
            scores,
            exact,
            sorted,
            cut,
        })
    }

    pub fn estimate(&self) -> &DensityEstimate {
        &self.est
    }

    pub fn data(&self) -> &Dataset {
        self.est.data()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn i_cut(&self) -> usize {
        self.i_cut
    }

    pub fn alpha_tilde(&self) -> f64 {
        self.i_cut as f64 / (self.est.n() + 1) as f64
    }

    pub fn is_degenerate(&self) -> bool {
        self.i_cut == 0
    }

    /// Estimated densities at the sample points, ascending.
    pub fn sorted_densities(&self) -> Vec<f64> {
        self.sorted
            .iter()
            .map(|&s| self.est.density_from_sum(s))
            .collect()
    }

    /// Whether the region is a bounded set. Far from the data every kernel
    /// sum is zero, so this evaluates the far-query comparison: `L-` is
    /// unbounded only when degenerate, and `C` is unbounded exactly when
    /// `L+` is, i.e. when `S(Y_(i_cut)) <= psi_K`.
    pub fn is_bounded(&self, e: Estimator) -> bool {
        match (e, self.cut) {
            (_, None) => false,
            (Estimator::SandwichInner, Some(_)) => true,
            (Estimator::Conformal | Estimator::SandwichOuter, Some(c)) => {
                let psi = self.est.kernel().oscillation();
                exact_sign(self.exact[c].iter().copied().chain([-psi])) == Ordering::Greater
            }
        }
    }

    pub fn member(&self, e: Estimator, y: &[f64]) -> Result<bool> {
        match e {
            Estimator::Conformal => self.contains(y),
            Estimator::SandwichInner => self.inner_contains(y),
            Estimator::SandwichOuter => self.outer_contains(y),
        }
    }

    pub fn cutoffs(&self) -> SandwichCutoffs {
        match self.cut {
            None => SandwichCutoffs {
                t_minus: f64::NEG_INFINITY,
                t_plus: f64::NEG_INFINITY,
                degenerate: true,
            },
            Some(c) => {
                let t_minus = self.est.density_from_sum(self.scores[c]);
                let t_plus = t_minus - self.est.kernel().oscillation() / self.est.normalizer();
                SandwichCutoffs {
                    t_minus,
                    t_plus,
                    degenerate: false,
                }
            }
        }
    }

    /// Exact sign of `S(Y_i) - S(y) + sum(extra)`.
    fn exact_diff(&self, i: usize, q: &mut QuerySum, extra: &[f64]) -> Ordering {
        let sy = q.exact(&self.est);
        exact_sign(
            self.exact[i]
                .iter()
                .copied()
                .chain(sy.iter().map(|x| -x))
                .chain(extra.iter().copied()),
        )
    }

    /// Number of sample points `i` with `p^y(Y_i) <= p^y(y)`.
    fn count_conforming(&self, q: &mut QuerySum) -> usize {
        let n = self.est.n();
        let peak = self.est.kernel().peak();
        let (y, s_y) = (q.y, q.s);
        let e_y = sum_error(n, s_y);
        let mut count = 0;
        for (i, (p, &s_i)) in self.est.data().points().zip(&self.scores).enumerate() {
            let k = self.est.kernel_at(p, y);
            let v = (s_i - s_y) + (k - peak);
            let bound = sum_error(n, s_i) + e_y + 4.0 * U * (s_i + s_y + peak);
            let sign = certain_sign(v, bound).unwrap_or_else(|| self.exact_diff(i, q, &[k, -peak]));
            if sign != Ordering::Greater {
                count += 1;
            }
        }
        count
    }

    /// `(n + 1) pi(y)`: sample points plus the self-comparison, which always
    /// counts.
    pub fn rank_count(&self, y: &[f64]) -> Result<usize> {
        self.data().check_dim(y)?;
        Ok(1 + self.count_conforming(&mut QuerySum::new(y, self.est.kernel_sum(y))))
    }

    /// `pi(y)` via the linear-time rewrite of the augmented comparisons.
    pub fn pvalue(&self, y: &[f64]) -> Result<f64> {
        Ok(self.rank_count(y)? as f64 / (self.est.n() + 1) as f64)
    }

    /// `(n + 1) pi(y)` straight from the definition: rebuild the estimate on
    /// `aug(Y, y)` and compare all `n + 1` scores. `O(n^2 d)`.
    pub fn rank_count_definitional(&self, y: &[f64]) -> Result<usize> {
        let aug = self.data().augmented(y)?;
        let est = DensityEstimate::new(aug, *self.est.kernel(), self.est.bandwidth())?;
        let m = est.n();
        let z = est.data();
        let own_pt = z.point(m - 1);
        let own = est.kernel_sum(own_pt);
        let mut count = 0;
        for p in z.points() {
            let s = est.kernel_sum(p);
            let bound = sum_error(m, s) + sum_error(m, own) + U * (s + own);
            let sign = certain_sign(s - own, bound).unwrap_or_else(|| {
                exact_sign(z.points().flat_map(|q| [est.kernel_at(p, q), -est.kernel_at(own_pt, q)]))
            });
            if sign != Ordering::Greater {
                count += 1;
            }
        }
        Ok(count)
    }

    pub fn pvalue_definitional(&self, y: &[f64]) -> Result<f64> {
        Ok(self.rank_count_definitional(y)? as f64 / (self.est.n() + 1) as f64)
    }

    /// Membership in the conformal region: `pi(y) > alpha_tilde`, i.e. at
    /// least `i_cut` sample points score no higher than `y`. With `i_cut = 0`
    /// every point is a member.
    pub fn contains(&self, y: &[f64]) -> Result<bool> {
        self.data().check_dim(y)?;
        Ok(self.conformal_member(&mut QuerySum::new(y, self.est.kernel_sum(y))))
    }

    #[inline]
    fn conformal_member(&self, q: &mut QuerySum) -> bool {
        self.i_cut == 0 || self.count_conforming(q) >= self.i_cut
    }

    /// `S(y) - S(Y_(i_cut)) + extra >= 0`, exactly.
    fn above_cut(&self, q: &mut QuerySum, extra: f64) -> bool {
        let Some(c) = self.cut else { return true };
        let n = self.est.n();
        let (s_y, s_cut) = (q.s, self.scores[c]);
        let v = (s_y - s_cut) + extra;
        let bound = sum_error(n, s_y) + sum_error(n, s_cut) + 3.0 * U * (s_y + s_cut + extra.abs());
        let sign = certain_sign(v, bound).unwrap_or_else(|| self.exact_diff(c, q, &[-extra]).reverse());
        sign != Ordering::Less
    }

    #[inline]
    fn inner_member(&self, q: &mut QuerySum) -> bool {
        self.above_cut(q, 0.0)
    }

    #[inline]
    fn outer_member(&self, q: &mut QuerySum) -> bool {
        self.above_cut(q, self.est.kernel().oscillation())
    }

    /// `y ∈ L-`: `p_n(y) >= t_minus`.
    pub fn inner_contains(&self, y: &[f64]) -> Result<bool> {
        self.data().check_dim(y)?;
        Ok(self.inner_member(&mut QuerySum::new(y, self.est.kernel_sum(y))))
    }

    /// `y ∈ L+`: `p_n(y) >= t_plus`.
    pub fn outer_contains(&self, y: &[f64]) -> Result<bool> {
        self.data().check_dim(y)?;
        Ok(self.outer_member(&mut QuerySum::new(y, self.est.kernel_sum(y))))
    }

    /// Membership in all three regions from a single density evaluation; the
    /// full conformal test only runs between the two plug-in cutoffs.
    pub fn classify(&self, y: &[f64]) -> Result<Classification> {
        self.data().check_dim(y)?;
        Ok(self.classify_given_sum(y, self.est.kernel_sum(y)))
    }

    #[inline]
    fn classify_given_sum(&self, y: &[f64], s_y: f64) -> Classification {
        let mut q = QuerySum::new(y, s_y);
        let inner = self.inner_member(&mut q);
        let outer = self.outer_member(&mut q);
        let conformal = if inner {
            true
        } else if !outer {
            false
        } else {
            self.conformal_member(&mut q)
        };
        Classification {
            inner,
            conformal,
            outer,
        }
    }

    /// Rasterizes all three regions on `grid`: kernel sums are scattered onto
    /// the grid once, and the linear conformal test runs only on cells in
    /// `L+ \ L-`.
    pub fn rasterize(&self, grid: &Grid) -> Result<SandwichRegions> {
        use rayon::prelude::*;
        if grid.dim() != self.data().dim() {
            return Err(Error::DimensionMismatch {
                expected: self.data().dim(),
                found: grid.dim(),
            });
        }
        let sums = grid.kernel_sums(&self.est);
        let d = grid.dim();
        let classes: Vec<Classification> = sums
            .par_iter()
            .enumerate()
            .map_init(
                || vec![0.0; d],
                |buf, (i, &s)| {
                    grid.center_into(i, buf);
                    self.classify_given_sum(buf, s)
                },
            )
            .collect();
        let pick = |e: Estimator| GridRegion::new(grid.clone(), classes.iter().map(|&c| e.pick(c)).collect());
        Ok(SandwichRegions {
            inner: pick(Estimator::SandwichInner)?,
            conformal: pick(Estimator::Conformal)?,
            outer: pick(Estimator::SandwichOuter)?,
        })
    }
}

/// Upper level set membership `p_n(y) >= t`.
pub fn levelset_member(est: &DensityEstimate, t: f64, y: &[f64]) -> Result<bool> {
    Ok(est.eval(y)? >= t)
}

/// [`ConformalModel::pvalue`].
pub fn conformal_pvalue(model: &ConformalModel, y: &[f64]) -> Result<f64> {
    model.pvalue(y)
}

/// [`ConformalModel::contains`].
pub fn conformal_member(model: &ConformalModel, y: &[f64]) -> Result<bool> {
    model.contains(y)
}

/// [`ConformalModel::cutoffs`].
pub fn sandwich_cutoffs(model: &ConformalModel) -> SandwichCutoffs {
    model.cutoffs()
}
