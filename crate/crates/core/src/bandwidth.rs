//! Bandwidth grids and the two validity-preserving tuners.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::conformal::{ConformalModel, Estimator};
use crate::density::{Dataset, DensityEstimate};
use crate::error::{Error, Result};
use crate::geometry::{mc_volume, Grid};
use crate::kernels::{product_kernel, KernelFamily};

/// ChaCha8 stream used for the sample split, so a shared seed does not
/// collide with sampling streams.
pub const SPLIT_STREAM: u64 = 0x5350_4c49_54;

/// Sorted, strictly increasing positive bandwidth candidates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthGrid {
    candidates: Vec<f64>,
}

impl BandwidthGrid {
    pub fn new(candidates: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("bandwidth grid needs at least one candidate"));
        }
        if candidates.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid("bandwidth candidates must be positive and finite"));
        }
        if candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bandwidth candidates must be strictly increasing"));
        }
        Ok(BandwidthGrid { candidates })
    }

    pub fn candidates(&self) -> &[f64] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// `c (ln n / n)^(1 / (2 beta + d))`.
pub fn theory_bandwidth(n: usize, dim: usize, beta: f64, scale: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("theory bandwidth needs n >= 2"));
    }
    if dim == 0 || !(beta > 0.0) || !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("theory bandwidth needs d >= 1, beta > 0 and scale > 0"));
    }
    let n = n as f64;
    Ok(scale * ((n.ln() / n).powf(1.0 / (2.0 * beta + dim as f64))))
}

/// `m` points, geometric between `center / span` and `center * span`. A
/// single point is `center` itself.
pub fn geometric_grid(center: f64, span: f64, m: usize) -> Result<BandwidthGrid> {
    if m == 0 {
        return Err(Error::invalid("bandwidth grid size must be at least 1"));
    }
    if !(span >= 1.0 && span.is_finite()) {
        return Err(Error::invalid("bandwidth grid span must be at least 1"));
    }
    if m > 1 && span == 1.0 {
        return Err(Error::invalid("bandwidth grid span must exceed 1 for more than one candidate"));
    }
    if m == 1 {
        return BandwidthGrid::new(vec![center]);
    }
    let last = (m - 1) as f64;
    BandwidthGrid::new(
        (0..m)
            .map(|i| center * span.powf(2.0 * i as f64 / last - 1.0))
            .collect(),
    )
}

/// Geometric grid of `m` points around the theory bandwidth with `c = 1`
/// spanning a factor 8 either way.
pub fn default_grid(n: usize, dim: usize, beta: f64, m: usize) -> Result<BandwidthGrid> {
    grid_around_theory(n, dim, beta, m, 1.0, 8.0)
}

pub fn grid_around_theory(
    n: usize,
    dim: usize,
    beta: f64,
    m: usize,
    scale: f64,
    span: f64,
) -> Result<BandwidthGrid> {
    geometric_grid(theory_bandwidth(n, dim, beta, scale)?, span, m)
}

/// Builds a conformal model from data at a bandwidth and level.
pub trait RegionBuilder: Sync {
    fn build(&self, data: &Dataset, h: f64, alpha: f64) -> Result<ConformalModel>;
}

/// Product-kernel KDE conformal models.
#[derive(Debug, Clone, Copy, Default)]
pub struct KdeBuilder {
    pub kernel: KernelFamily,
}

impl RegionBuilder for KdeBuilder {
    fn build(&self, data: &Dataset, h: f64, alpha: f64) -> Result<ConformalModel> {
        let k = product_kernel(self.kernel, data.dim())?;
        ConformalModel::new(DensityEstimate::new(data.clone(), k, h)?, alpha)
    }
}

/// Measures one region of a model. Unbounded regions measure `+inf`.
pub trait VolumeEvaluator: Sync {
    fn volume(&self, model: &ConformalModel) -> Result<f64>;
}

/// Grid-rasterized volume, either on a fixed box (regions are truncated to
/// it) or on a grid covering each model's kernel support.
#[derive(Debug, Clone)]
pub struct GridVolume {
    pub estimator: Estimator,
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub cells_per_dim: usize,
}

impl GridVolume {
    pub fn covering(estimator: Estimator, cells_per_dim: usize) -> Self {
        GridVolume {
            estimator,
            bounds: None,
            cells_per_dim,
        }
    }

    pub fn fixed(estimator: Estimator, lower: Vec<f64>, upper: Vec<f64>, cells_per_dim: usize) -> Self {
        GridVolume {
            estimator,
            bounds: Some((lower, upper)),
            cells_per_dim,
        }
    }

    pub fn grid_for(&self, model: &ConformalModel) -> Result<Grid> {
        match &self.bounds {
            Some((lo, hi)) => Grid::new(lo.clone(), hi.clone(), vec![self.cells_per_dim; lo.len()]),
            None => Grid::covering(model.estimate(), self.cells_per_dim),
        }
    }
}

impl VolumeEvaluator for GridVolume {
    fn volume(&self, model: &ConformalModel) -> Result<f64> {
        if !model.is_bounded(self.estimator) {
            return Ok(f64::INFINITY);
        }
        let regions = model.rasterize(&self.grid_for(model)?)?;
        Ok(regions.get(self.estimator).volume())
    }
}

/// Monte-Carlo volume over the kernel support box of each model.
#[derive(Debug, Clone)]
pub struct McVolume {
    pub estimator: Estimator,
    pub samples: usize,
    pub seed: u64,
}

impl VolumeEvaluator for McVolume {
    fn volume(&self, model: &ConformalModel) -> Result<f64> {
        if !model.is_bounded(self.estimator) {
            return Ok(f64::INFINITY);
        }
        let (lo, hi) = model.estimate().support_bounds();
        let e = self.estimator;
        let (v, _) = mc_volume(
            |y| e.pick(model.classify(y).expect("dimension checked")),
            &lo,
            &hi,
            self.samples,
            self.seed,
        )?;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub h: f64,
    pub volume: f64,
}

/// Which samples went where in a split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitIndices {
    pub tuning: Vec<usize>,
    pub building: Vec<usize>,
}

/// Outcome of a tuner.
#[derive(Debug, Clone)]
pub struct Tuned {
    pub h: f64,
    /// The returned region's model.
    pub model: ConformalModel,
    /// Miscoverage level the candidates were built at.
    pub candidate_alpha: f64,
    pub curve: Vec<CurvePoint>,
    pub split: Option<SplitIndices>,
}

/// Volume per candidate bandwidth; candidates are evaluated in parallel and
/// returned in grid order.
pub fn volume_vs_bandwidth<B, V>(
    data: &Dataset,
    grid: &BandwidthGrid,
    alpha: f64,
    builder: &B,
    evaluator: &V,
) -> Result<Vec<CurvePoint>>
where
    B: RegionBuilder + ?Sized,
    V: VolumeEvaluator + ?Sized,
{
    Ok(candidate_models(data, grid, alpha, builder, evaluator)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

fn candidate_models<B, V>(
    data: &Dataset,
    grid: &BandwidthGrid,
    alpha: f64,
    builder: &B,
    evaluator: &V,
) -> Result<Vec<(CurvePoint, ConformalModel)>>
where
    B: RegionBuilder + ?Sized,
    V: VolumeEvaluator + ?Sized,
{
    grid.candidates()
        .par_iter()
        .map(|&h| {
            let model = builder.build(data, h, alpha)?;
            let volume = evaluator.volume(&model)?;
            Ok((CurvePoint { h, volume }, model))
        })
        .collect()
}

/// Index of the smallest volume; the first (smallest `h`) wins ties.
pub fn argmin_volume(curve: &[CurvePoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in curve.iter().enumerate() {
        match best {
            Some(b) if curve[b].volume <= p.volume => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Builds every candidate on the full sample at level `alpha / m` and keeps
/// the one of least volume.
pub fn tune_bonferroni<B, V>(
    data: &Dataset,
    grid: &BandwidthGrid,
    alpha: f64,
    builder: &B,
    evaluator: &V,
) -> Result<Tuned>
where
    B: RegionBuilder + ?Sized,
    V: VolumeEvaluator + ?Sized,
{
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let level = alpha / grid.len() as f64;
    let mut scored = candidate_models(data, grid, level, builder, evaluator)?;
    let curve: Vec<CurvePoint> = scored.iter().map(|(p, _)| *p).collect();
    let best = argmin_volume(&curve).expect("grid is non-empty");
    let (point, model) = scored.swap_remove(best);
    Ok(Tuned {
        h: point.h,
        model,
        candidate_alpha: level,
        curve,
        split: None,
    })
}

/// Seeded shuffle split: the first `ceil(n / 2)` shuffled points tune, the
/// rest build.
pub fn split_indices(n: usize, seed: u64) -> SplitIndices {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let building = idx.split_off(n.div_ceil(2));
    SplitIndices {
        tuning: idx,
        building,
    }
}

/// Tunes on one half of the sample at level `alpha`, then builds the final
/// region on the other half with the chosen bandwidth.
pub fn tune_split<B, V>(
    data: &Dataset,
    grid: &BandwidthGrid,
    alpha: f64,
    builder: &B,
    evaluator: &V,
    seed: u64,
) -> Result<Tuned>
where
    B: RegionBuilder + ?Sized,
    V: VolumeEvaluator + ?Sized,
{
    if data.len() < 4 {
        return Err(Error::invalid(format!(
            "split tuning needs at least 4 points, got {}",
            data.len()
        )));
    }
    let split = split_indices(data.len(), seed);
    let first = data.subset(&split.tuning)?;
    let curve = volume_vs_bandwidth(&first, grid, alpha, builder, evaluator)?;
    let h = curve[argmin_volume(&curve).expect("grid is non-empty")].h;
    let second = data.subset(&split.building)?;
    let model = builder.build(&second, h, alpha)?;
    Ok(Tuned {
        h,
        model,
        candidate_alpha: alpha,
        curve,
        split: Some(split),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use std::sync::Mutex;

    fn bimodal(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                vec![if i % 2 == 0 { -2.0 } else { 2.0 } + 0.5 * z]
            })
            .collect();
        Dataset::new(pts).unwrap()
    }

    #[test]
    fn theory_centers() {
        assert!((theory_bandwidth(200, 1, 1.0, 1.0).unwrap() - 0.2981050439431388).abs() < 1e-14);
        assert!((theory_bandwidth(1000, 2, 1.0, 1.0).unwrap() - 0.28829309185871155).abs() < 1e-14);
        let g = default_grid(200, 1, 1.0, 1).unwrap();
        assert_eq!(g.candidates(), &[theory_bandwidth(200, 1, 1.0, 1.0).unwrap()]);
        assert!(theory_bandwidth(1, 1, 1.0, 1.0).is_err());
        assert!(default_grid(200, 1, 1.0, 0).is_err());
    }

    #[test]
    fn geometric_shape() {
        let h0 = theory_bandwidth(500, 2, 1.0, 1.0).unwrap();
        let g = default_grid(500, 2, 1.0, 21).unwrap();
        let c = g.candidates();
        assert_eq!(c.len(), 21);
        assert!((c[0] - h0 / 8.0).abs() < 1e-12 * h0);
        assert!((c[20] - h0 * 8.0).abs() < 1e-12 * h0);
        assert!((c[10] - h0).abs() < 1e-12 * h0);
        let r = c[1] / c[0];
        assert!(c.windows(2).all(|w| (w[1] / w[0] - r).abs() < 1e-12));
        assert!(BandwidthGrid::new(vec![0.2, 0.1]).is_err());
        assert!(BandwidthGrid::new(vec![0.0]).is_err());
    }

    #[test]
    fn argmin_prefers_smaller_h() {
        let pts = |v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, &volume)| CurvePoint { h: i as f64, volume })
                .collect::<Vec<_>>()
        };
        assert_eq!(argmin_volume(&pts(&[3.0, 1.0, 2.0, 1.0])), Some(1));
        assert_eq!(argmin_volume(&pts(&[f64::INFINITY, f64::INFINITY])), Some(0));
        assert_eq!(argmin_volume(&pts(&[f64::INFINITY, 2.0])), Some(1));
        assert_eq!(argmin_volume(&[]), None);
    }

    #[test]
    fn curve_matches_one_off_volumes() {
        let data = bimodal(30, 1);
        let grid = geometric_grid(0.3, 8.0, 6).unwrap();
        let eval = GridVolume::covering(Estimator::Conformal, 400);
        let curve = volume_vs_bandwidth(&data, &grid, 0.1, &KdeBuilder::default(), &eval).unwrap();
        for p in &curve {
            let m = KdeBuilder::default().build(&data, p.h, 0.1).unwrap();
            let g = Grid::covering(m.estimate(), 400).unwrap();
            let direct = crate::geometry::rasterize(|y| m.contains(y).unwrap(), &g).volume();
            if m.is_bounded(Estimator::Conformal) {
                assert_eq!(p.volume, direct);
            } else {
                assert_eq!(p.volume, f64::INFINITY);
            }
        }
    }

    #[test]
    fn bonferroni_single_candidate_is_plain_region() {
        let data = bimodal(40, 2);
        let grid = BandwidthGrid::new(vec![0.5]).unwrap();
        let eval = GridVolume::covering(Estimator::Conformal, 200);
        let t = tune_bonferroni(&data, &grid, 0.1, &KdeBuilder::default(), &eval).unwrap();
        assert_eq!(t.candidate_alpha, 0.1);
        assert_eq!(t.model.i_cut(), KdeBuilder::default().build(&data, 0.5, 0.1).unwrap().i_cut());
    }

    #[test]
    fn bonferroni_returns_minimum() {
        let data = bimodal(60, 3);
        let grid = default_grid(60, 1, 1.0, 5).unwrap();
        let eval = GridVolume::covering(Estimator::Conformal, 300);
        let t = tune_bonferroni(&data, &grid, 0.2, &KdeBuilder::default(), &eval).unwrap();
        let min = t.curve.iter().map(|p| p.volume).fold(f64::INFINITY, f64::min);
        assert_eq!(eval.volume(&t.model).unwrap(), min);
        assert_eq!(t.candidate_alpha, 0.2 / 5.0);
        assert!((t.model.alpha() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn split_is_deterministic_and_balanced() {
        let s = split_indices(7, 11);
        assert_eq!((s.tuning.len(), s.building.len()), (4, 3));
        let mut all: Vec<usize> = s.tuning.iter().chain(&s.building).copied().collect();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(s, split_indices(7, 11));
        assert_ne!(s, split_indices(7, 12));

        let data = bimodal(50, 4);
        let grid = default_grid(25, 1, 1.0, 6).unwrap();
        let eval = GridVolume::covering(Estimator::Conformal, 200);
        let a = tune_split(&data, &grid, 0.1, &KdeBuilder::default(), &eval, 5).unwrap();
        let b = tune_split(&data, &grid, 0.1, &KdeBuilder::default(), &eval, 5).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.data().len(), 25);
        let small = bimodal(3, 0);
        assert!(tune_split(&small, &grid, 0.1, &KdeBuilder::default(), &eval, 5).is_err());
    }

    struct Recording {
        inner: KdeBuilder,
        calls: Mutex<Vec<Vec<f64>>>,
    }

    impl RegionBuilder for Recording {
        fn build(&self, data: &Dataset, h: f64, alpha: f64) -> Result<ConformalModel> {
            self.calls.lock().unwrap().push(data.as_flat().to_vec());
            self.inner.build(data, h, alpha)
        }
    }

    #[test]
    fn split_builds_second_half_last() {
        let data = bimodal(21, 6);
        let grid = default_grid(11, 1, 1.0, 8).unwrap();
        let rec = Recording {
            inner: KdeBuilder::default(),
            calls: Mutex::new(Vec::new()),
        };
        let eval = GridVolume::covering(Estimator::Conformal, 100);
        let t = tune_split(&data, &grid, 0.2, &rec, &eval, 9).unwrap();
        let split = t.split.unwrap();
        let first = data.subset(&split.tuning).unwrap().as_flat().to_vec();
        let second = data.subset(&split.building).unwrap().as_flat().to_vec();
        let calls = rec.calls.into_inner().unwrap();
        assert_eq!(calls.len(), 9);
        assert!(calls[..8].iter().all(|c| *c == first));
        assert_eq!(calls[8], second);
    }

    #[test]
    fn undersmoothing_and_oversmoothing_inflate_volume() {
        let data = bimodal(20, 7);
        let grid = default_grid(20, 1, 1.0, 20).unwrap();
        let eval = GridVolume::covering(Estimator::Conformal, 2000);
        let curve = volume_vs_bandwidth(&data, &grid, 0.05, &KdeBuilder::default(), &eval).unwrap();
        let best = argmin_volume(&curve).unwrap();
        assert!(best > 0 && best < curve.len() - 1, "{curve:?}");
        assert!(curve[0].volume > 1.5 * curve[best].volume);
        assert!(curve[curve.len() - 1].volume > 1.5 * curve[best].volume);
    }

    #[test]
    fn mc_volume_tracks_grid_volume() {
        let data = bimodal(40, 8);
        let m = KdeBuilder::default().build(&data, 0.7, 0.1).unwrap();
        let g = GridVolume::covering(Estimator::SandwichOuter, 2000).volume(&m).unwrap();
        let mc = McVolume {
            estimator: Estimator::SandwichOuter,
            samples: 200_000,
            seed: 1,
        }
        .volume(&m)
        .unwrap();
        assert!((g - mc).abs() < 0.02 * g, "{g} vs {mc}");
    }
}
