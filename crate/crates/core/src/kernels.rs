//! Compactly supported product kernels.
//!
//! Every kernel here is the `d`-fold product of a univariate kernel supported
//! on `[-1, 1]`, so the multivariate kernel is supported on `[-1, 1]^d`, peaks
//! at the origin and vanishes outside the cube. Because the kernels are
//! nonnegative and vanish outside their support, the oscillation
//! `sup |K(u) - K(u')|` equals the peak `K(0)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Univariate kernel shape used for every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// `3/4 (1 - x^2)`
    #[default]
    Epanechnikov,
    /// `15/16 (1 - x^2)^2`
    Biweight,
    /// `35/32 (1 - x^2)^3`
    Triweight,
    /// `1/2` on `[-1, 1]`, boundary included.
    UniformBox,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Epanechnikov,
        KernelFamily::Biweight,
        KernelFamily::Triweight,
        KernelFamily::UniformBox,
    ];

    /// Univariate evaluation; zero outside `[-1, 1]`.
    #[inline]
    pub fn eval_1d(self, x: f64) -> f64 {
        if !(-1.0..=1.0).contains(&x) {
            return 0.0;
        }
        let q = 1.0 - x * x;
        match self {
            KernelFamily::Epanechnikov => 0.75 * q,
            KernelFamily::Biweight => 0.9375 * q * q,
            KernelFamily::Triweight => 1.09375 * q * q * q,
            KernelFamily::UniformBox => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Epanechnikov => "epanechnikov",
            KernelFamily::Biweight => "biweight",
            KernelFamily::Triweight => "triweight",
            KernelFamily::UniformBox => "uniform-box",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(KernelFamily::Epanechnikov),
            "biweight" | "quartic" => Ok(KernelFamily::Biweight),
            "triweight" => Ok(KernelFamily::Triweight),
            "uniform-box" | "uniform" | "box" => Ok(KernelFamily::UniformBox),
            other => Err(Error::invalid(format!(
                "unknown kernel `{other}` (expected epanechnikov, biweight, triweight or uniform-box)"
            ))),
        }
    }
}

/// A `d`-dimensional product kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelSpecRepr", into = "KernelSpecRepr")]
pub struct KernelSpec {
    family: KernelFamily,
    dim: usize,
    peak: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelSpecRepr {
    family: KernelFamily,
    dimension: usize,
}

impl TryFrom<KernelSpecRepr> for KernelSpec {
    type Error = Error;

    fn try_from(r: KernelSpecRepr) -> Result<Self> {
        product_kernel(r.family, r.dimension)
    }
}

impl From<KernelSpec> for KernelSpecRepr {
    fn from(k: KernelSpec) -> Self {
        KernelSpecRepr {
            family: k.family,
            dimension: k.dim,
        }
    }
}

/// Builds the `d`-fold product of the univariate `family` kernel.
pub fn product_kernel(family: KernelFamily, dim: usize) -> Result<KernelSpec> {
    if dim == 0 {
        return Err(Error::invalid("kernel dimension must be at least 1"));
    }
    let mut k = KernelSpec {
        family,
        dim,
        peak: 0.0,
    };
    // Same multiplication order as `eval`, so `peak == eval(0)` bit for bit.
    k.peak = k.eval_unchecked(&vec![0.0; dim]);
    Ok(k)
}

impl KernelSpec {
    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `K(0)`, which is also `sup K`.
    pub fn peak(&self) -> f64 {
        self.peak
    }

    /// `psi_K = sup_{u,u'} |K(u) - K(u')|`. Closed form: the kernels are
    /// nonnegative and vanish outside the cube, so this is `K(0) - 0`.
    pub fn oscillation(&self) -> f64 {
        self.peak
    }

    pub fn support_radius(&self) -> f64 {
        1.0
    }

    /// `K(u)`; exactly zero when any coordinate exceeds 1 in absolute value.
    pub fn eval(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: u.len(),
            });
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("kernel argument must be finite"));
        }
        Ok(self.eval_unchecked(u))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, u: &[f64]) -> f64 {
        let mut acc = 1.0;
        for &x in u {
            if !(-1.0..=1.0).contains(&x) {
                return 0.0;
            }
            acc *= self.family.eval_1d(x);
        }
        acc
    }

    /// `K((x - y) / h)` without allocating. All density code goes through this
    /// so every evaluation of the same pair is bitwise identical.
    #[inline]
    pub(crate) fn eval_scaled(&self, x: &[f64], y: &[f64], h: f64) -> f64 {
        let mut acc = 1.0;
        for (a, b) in x.iter().zip(y) {
            let u = (a - b) / h;
            if !(-1.0..=1.0).contains(&u) {
                return 0.0;
            }
            acc *= self.family.eval_1d(u);
        }
        acc
    }
}

/// One moment condition `int u^s K(u) du = 0` for a multi-index `s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheck {
    pub exponents: Vec<u32>,
    pub value: f64,
    pub pass: bool,
}

/// Outcome of [`validate_beta`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaValidation {
    pub beta: f64,
    /// Highest total degree checked, `floor(beta)`.
    pub order: u32,
    pub integral: f64,
    pub integral_pass: bool,
    pub moments: Vec<MomentCheck>,
    pub passed: bool,
}

impl BetaValidation {
    pub fn failures(&self) -> impl Iterator<Item = &MomentCheck> {
        self.moments.iter().filter(|m| !m.pass)
    }
}

/// Checks the beta-validity conditions numerically: unit integral and
/// vanishing moments for every multi-index with `1 <= |s| <= floor(beta)`.
///
/// Integration uses tensor Gauss-Legendre on `[-1, 1]^d`, which is exact for
/// the polynomial families provided here.
pub fn validate_beta(k: &KernelSpec, beta: f64, tol: f64) -> Result<BetaValidation> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid("beta must be a positive finite number"));
    }
    let order = beta.floor() as u32;
    let (nodes, weights) = gauss_legendre(16 + order as usize);

    let integral = tensor_quadrature(k, &nodes, &weights, &vec![0; k.dim]);
    let integral_pass = (integral - 1.0).abs() < tol;

    let mut moments = Vec::new();
    for total in 1..=order {
        for s in multi_indices(k.dim, total) {
            let value = tensor_quadrature(k, &nodes, &weights, &s);
            moments.push(MomentCheck {
                pass: value.abs() < tol,
                exponents: s,
                value,
            });
        }
    }
    let passed = integral_pass && moments.iter().all(|m| m.pass);
    Ok(BetaValidation {
        beta,
        order,
        integral,
        integral_pass,
        moments,
        passed,
    })
}

/// `int K` over the support by Gauss-Legendre quadrature.
pub fn kernel_integral(k: &KernelSpec) -> f64 {
    let (nodes, weights) = gauss_legendre(16);
    tensor_quadrature(k, &nodes, &weights, &vec![0; k.dim])
}

fn tensor_quadrature(k: &KernelSpec, nodes: &[f64], weights: &[f64], s: &[u32]) -> f64 {
    let d = k.dim;
    let q = nodes.len();
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0; d];
    let mut sum = 0.0;
    loop {
        let mut w = 1.0;
        let mut mono = 1.0;
        for j in 0..d {
            point[j] = nodes[idx[j]];
            w *= weights[idx[j]];
            mono *= point[j].powi(s[j] as i32);
        }
        sum += w * mono * k.eval_unchecked(&point);

        let mut j = 0;
        loop {
            if j == d {
                return sum;
            }
            idx[j] += 1;
            if idx[j] < q {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// All exponent vectors of length `d` with entries summing to `total`.
fn multi_indices(d: usize, total: u32) -> Vec<Vec<u32>> {
    fn rec(d: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == d {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=remaining).rev() {
            prefix.push(first);
            rec(d, remaining - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, total, &mut Vec::with_capacity(d), &mut out);
    out
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton iteration on the
/// Legendre recurrence).
fn gauss_legendre(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    let nf = q as f64;
    for i in 0..q.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=q {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[q - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    (nodes, weights)
}
