//! Monte-Carlo experiments: coverage and volume tables, loss rates, and
//! validity under misspecification.
//!
//! Seeding: repetition `r` of an experiment with master seed `s` uses
//! `seed_r = splitmix64(s ^ splitmix64(r + 1))`. Within a repetition the
//! sample comes from ChaCha8 stream 0 of `seed_r`, the fresh test point from
//! stream 1, the sample split from [`SPLIT_STREAM`](crate::bandwidth::SPLIT_STREAM),
//! and Monte-Carlo integrals from chunked streams of `seed_r ^ MASS_TAG` or
//! `seed_r ^ VOLUME_TAG`. The oracle cutoff uses `splitmix64(s ^ ORACLE_TAG)`.
//! No seed depends on scheduling, so reports are identical for any thread
//! count.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{
    grid_around_theory, theory_bandwidth, tune_bonferroni, tune_split, GridVolume, KdeBuilder, McVolume,
    RegionBuilder, VolumeEvaluator,
};
use crate::conformal::{Classification, ConformalModel, Estimator};
use crate::density::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{default_resolution, Grid, GridRegion, MC_CHUNK};
use crate::io::fmt_f64;
use crate::kernels::KernelFamily;
use crate::oracle::{loss_against_oracle, oracle_cutoff, oracle_region, MixtureDensity, OracleCutoff, Truth};

pub const ORACLE_TAG: u64 = 0x4f52_4143_4c45;
pub const MASS_TAG: u64 = 0x4d41_5353;
pub const VOLUME_TAG: u64 = 0x564f_4c55_4d45;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rep_seed(master: u64, rep: usize) -> u64 {
    splitmix64(master ^ splitmix64(rep as u64 + 1))
}

pub fn oracle_seed(master: u64) -> u64 {
    splitmix64(master ^ ORACLE_TAG)
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Ground-truth distributions the harness knows by name, or an explicit
/// mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TruthSpec {
    /// [`MixtureDensity::reference_l_shape`].
    LShape {},
    StandardNormal { dim: usize },
    /// `0.9 N(0, I) + 0.1 N(0, 400 I)`.
    HeavyTailed { dim: usize },
    /// Three near-atoms with covariance `1e-6 I`.
    NearDiscrete { dim: usize },
    /// Right-skewed three-component 1-d mixture.
    Skewed {},
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    },
}

fn scaled_identity(d: usize, s: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|r| (0..d).map(|c| if r == c { s } else { 0.0 }).collect())
        .collect()
}

impl TruthSpec {
    pub fn build(&self) -> Result<MixtureDensity> {
        match self {
            TruthSpec::LShape {} => Ok(MixtureDensity::reference_l_shape()),
            TruthSpec::StandardNormal { dim } => MixtureDensity::standard_normal(*dim),
            TruthSpec::HeavyTailed { dim } => MixtureDensity::new(
                vec![0.9, 0.1],
                vec![vec![0.0; *dim]; 2],
                vec![scaled_identity(*dim, 1.0), scaled_identity(*dim, 400.0)],
            ),
            TruthSpec::NearDiscrete { dim } => {
                let d = *dim;
                if d == 0 {
                    return Err(Error::invalid("mixture dimension must be at least 1"));
                }
                let mut a1 = vec![0.0; d];
                a1[0] = 1.0;
                let mut a2 = vec![0.0; d];
                if d >= 2 {
                    a2[1] = 1.0;
                } else {
                    a2[0] = 2.0;
                }
                MixtureDensity::new(
                    vec![0.5, 0.3, 0.2],
                    vec![vec![0.0; d], a1, a2],
                    vec![scaled_identity(d, 1e-6); 3],
                )
            }
            TruthSpec::Skewed {} => MixtureDensity::new(
                vec![0.6, 0.3, 0.1],
                vec![vec![0.0], vec![1.5], vec![4.0]],
                vec![vec![vec![0.25]], vec![vec![1.0]], vec![vec![4.0]]],
            ),
            TruthSpec::Mixture {
                weights,
                means,
                covariances,
            } => MixtureDensity::new(weights.clone(), means.clone(), covariances.clone()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TruthSpec::LShape {} => "l-shape",
            TruthSpec::StandardNormal { .. } => "standard-normal",
            TruthSpec::HeavyTailed { .. } => "heavy-tailed",
            TruthSpec::NearDiscrete { .. } => "near-discrete",
            TruthSpec::Skewed {} => "skewed",
            TruthSpec::Mixture { .. } => "mixture",
        }
    }
}

/// How each repetition chooses its bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BandwidthPolicy {
    Fixed {
        h: f64,
    },
    /// `scale (ln n / n)^(1 / (2 beta + d))`.
    Default {
        #[serde(default = "one")]
        beta: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    Split {
        #[serde(default = "split_grid_size")]
        grid_size: usize,
        #[serde(default = "eight")]
        span: f64,
        #[serde(default = "one")]
        beta: f64,
        #[serde(default = "one")]
        scale: f64,
        /// Cells per dimension of the tuning volume grid.
        #[serde(default)]
        tune_cells: Option<usize>,
    },
    Bonferroni {
        #[serde(default = "bonferroni_grid_size")]
        grid_size: usize,
        #[serde(default = "eight")]
        span: f64,
        #[serde(default = "one")]
        beta: f64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        tune_cells: Option<usize>,
    },
}

fn one() -> f64 {
    1.0
}
fn eight() -> f64 {
    8.0
}
fn split_grid_size() -> usize {
    20
}
fn bonferroni_grid_size() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoverageMode {
    /// Indicator that one fresh draw lands in the region.
    #[default]
    FreshPoint,
    /// Monte-Carlo probability of the region under the truth.
    RegionMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeMethod {
    #[default]
    Grid,
    Mc,
}

/// Where region volumes and oracle losses are measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeConfig {
    #[serde(default)]
    pub method: VolumeMethod,
    /// Measurement box; defaults to the component means +- 4 standard
    /// deviations of the truth.
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
    /// Cells per dimension for the grid method.
    #[serde(default)]
    pub cells: Option<usize>,
    #[serde(default = "default_volume_mc")]
    pub mc_samples: usize,
    /// Compute losses against the oracle region.
    #[serde(default = "yes")]
    pub losses: bool,
}

fn default_volume_mc() -> usize {
    100_000
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_oracle_mc")]
    pub mc_samples: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            mc_samples: default_oracle_mc(),
        }
    }
}

fn default_oracle_mc() -> usize {
    1_000_000
}

/// One coverage experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub truth: TruthSpec,
    pub n: usize,
    pub alpha: f64,
    pub repetitions: usize,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub kernel: KernelFamily,
    pub bandwidth: BandwidthPolicy,
    #[serde(default)]
    pub coverage: CoverageMode,
    #[serde(default = "default_mass_samples")]
    pub mass_samples: usize,
    #[serde(default)]
    pub volume: Option<VolumeConfig>,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub seed: u64,
}

fn all_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}
fn default_mass_samples() -> usize {
    20_000
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be at least 1"));
        }
        if self.estimators.is_empty() {
            return Err(Error::config("estimators", "must name at least one estimator"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n < 2 {
            return Err(Error::config("n", "must be at least 2"));
        }
        match &self.bandwidth {
            BandwidthPolicy::Fixed { h } if !(*h > 0.0 && h.is_finite()) => {
                return Err(Error::config("bandwidth.h", "must be positive and finite"));
            }
            BandwidthPolicy::Split { .. } if self.n < 4 => {
                return Err(Error::config("n", "split tuning needs at least 4 points"));
            }
            BandwidthPolicy::Split { grid_size: 0, .. } | BandwidthPolicy::Bonferroni { grid_size: 0, .. } => {
                return Err(Error::config("bandwidth.grid_size", "must be at least 1"));
            }
            _ => {}
        }
        if self.coverage == CoverageMode::RegionMass && self.mass_samples == 0 {
            return Err(Error::config("mass_samples", "must be at least 1"));
        }
        let d = self.truth.build().map_err(|e| Error::config("truth", e.to_string()))?.dim();
        if let Some(v) = &self.volume {
            for (key, b) in [("volume.lower", &v.lower), ("volume.upper", &v.upper)] {
                if let Some(b) = b {
                    if b.len() != d {
                        return Err(Error::config(key, format!("must have {d} entries")));
                    }
                }
            }
            if v.lower.is_some() != v.upper.is_some() {
                return Err(Error::config("volume", "give both lower and upper, or neither"));
            }
            if v.method == VolumeMethod::Mc && v.mc_samples < 100 {
                return Err(Error::config("volume.mc_samples", "must be at least 100"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(R)`; NaN when `R = 1`.
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        Stat {
            mean,
            se: (ss / (r - 1.0)).sqrt() / r.sqrt(),
        }
    }
}

/// One estimator's result in one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Outcome {
    pub estimator: Estimator,
    /// 0/1 in fresh-point mode, the estimated region mass otherwise.
    pub coverage: f64,
    pub volume: Option<f64>,
    pub sym_diff: Option<f64>,
    pub excess: Option<f64>,
    pub bounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub h: f64,
    pub outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub coverage: Stat,
    pub volume: Option<Stat>,
    pub sym_diff: Option<Stat>,
    pub excess: Option<Stat>,
    /// Fraction of repetitions in which the region was unbounded; volumes
    /// are then measured inside the box only.
    pub unbounded_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSummary {
    pub cutoff: f64,
    pub cutoff_se: f64,
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedInfo {
    pub master: u64,
    pub oracle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: SeedInfo,
    pub oracle: Option<OracleSummary>,
    pub bandwidth: Stat,
    pub estimators: Vec<EstimatorSummary>,
    #[serde(skip)]
    pub repetitions: Vec<RepRecord>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExperimentReport {
    pub fn summary(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }

    /// One row per estimator.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "estimator,coverage,coverage_se,volume,volume_se,sym_diff,sym_diff_se,excess,excess_se,unbounded_fraction\n",
        );
        let pair = |s: Option<Stat>| match s {
            Some(s) => format!("{},{}", fmt_f64(s.mean), fmt_f64(s.se)),
            None => ",".to_string(),
        };
        for s in &self.estimators {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.estimator.name(),
                pair(Some(s.coverage)),
                pair(s.volume),
                pair(s.sym_diff),
                pair(s.excess),
                fmt_f64(s.unbounded_fraction)
            ));
        }
        out
    }

    /// One row per (repetition, estimator).
    pub fn per_rep_csv(&self) -> String {
        let mut out = String::from("rep,seed,h,estimator,coverage,volume,sym_diff,excess,bounded\n");
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.repetitions {
            for o in &r.outcomes {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.rep,
                    r.seed,
                    fmt_f64(r.h),
                    o.estimator.name(),
                    fmt_f64(o.coverage),
                    opt(o.volume),
                    opt(o.sym_diff),
                    opt(o.excess),
                    o.bounded
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum VolumePlan {
    Grid(Grid),
    Mc { lower: Vec<f64>, upper: Vec<f64>, samples: usize },
}

#[derive(Debug, Clone)]
struct OracleInfo {
    cutoff: OracleCutoff,
    raster: Option<GridRegion>,
    volume: f64,
}

/// A validated experiment with its oracle region computed, ready to run
/// repetitions.
#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: ExperimentConfig,
    truth: MixtureDensity,
    volume: Option<VolumePlan>,
    oracle: Option<OracleInfo>,
}

/// Component means +- 4 standard deviations, per coordinate.
pub fn default_box(truth: &MixtureDensity) -> (Vec<f64>, Vec<f64>) {
    let spec: crate::oracle::MixtureSpec = truth.clone().into();
    let d = truth.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for (m, c) in spec.means.iter().zip(&spec.covariances) {
        for j in 0..d {
            let s = 4.0 * c[j][j].sqrt();
            lo[j] = lo[j].min(m[j] - s);
            hi[j] = hi[j].max(m[j] + s);
        }
    }
    (lo, hi)
}

impl Experiment {
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let truth = cfg.truth.build()?;
        let d = truth.dim();
        let volume = match &cfg.volume {
            None => None,
            Some(v) => {
                let (lower, upper) = match (&v.lower, &v.upper) {
                    (Some(l), Some(u)) => (l.clone(), u.clone()),
                    _ => default_box(&truth),
                };
                Some(match v.method {
                    VolumeMethod::Grid => {
                        let cells = match v.cells {
                            Some(c) => c,
                            None => default_resolution(d)?,
                        };
                        VolumePlan::Grid(Grid::new(lower, upper, vec![cells; d])?)
                    }
                    VolumeMethod::Mc => {
                        Grid::new(lower.clone(), upper.clone(), vec![1; d])?;
                        VolumePlan::Mc {
                            lower,
                            upper,
                            samples: v.mc_samples,
                        }
                    }
                })
            }
        };
        let losses = cfg.volume.as_ref().is_some_and(|v| v.losses);
        let oracle = if losses {
            let seed = oracle_seed(cfg.seed);
            Some(match volume.as_ref().expect("losses imply a volume plan") {
                VolumePlan::Grid(g) => {
                    let (region, raster) = oracle_region(&truth, cfg.alpha, g, cfg.oracle.mc_samples, seed)?;
                    OracleInfo {
                        cutoff: region.cutoff,
                        volume: raster.volume(),
                        raster: Some(raster),
                    }
                }
                VolumePlan::Mc { lower, upper, samples } => {
                    let cutoff = oracle_cutoff(&truth, cfg.alpha, cfg.oracle.mc_samples, seed)?;
                    let t = cutoff.cutoff;
                    let (volume, _) =
                        crate::geometry::mc_volume(|y| truth.pdf(y) >= t, lower, upper, *samples, seed)?;
                    OracleInfo {
                        cutoff,
                        raster: None,
                        volume,
                    }
                }
            })
        } else {
            None
        };
        Ok(Experiment {
            cfg,
            truth,
            volume,
            oracle,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn truth(&self) -> &MixtureDensity {
        &self.truth
    }

    pub fn oracle_raster(&self) -> Option<&GridRegion> {
        self.oracle.as_ref().and_then(|o| o.raster.as_ref())
    }

    fn builder(&self) -> KdeBuilder {
        KdeBuilder {
            kernel: self.cfg.kernel,
        }
    }

    fn tuning_evaluator(&self, tune_cells: Option<usize>, seed: u64) -> Result<Box<dyn VolumeEvaluator>> {
        let d = self.truth.dim();
        Ok(match tune_cells {
            Some(c) => Box::new(GridVolume::covering(Estimator::Conformal, c)),
            None if d <= 3 => Box::new(GridVolume::covering(Estimator::Conformal, default_resolution(d)?)),
            None => Box::new(McVolume {
                estimator: Estimator::Conformal,
                samples: 20_000,
                seed: seed ^ VOLUME_TAG,
            }),
        })
    }

    /// The sample of repetition `rep`.
    pub fn sample(&self, rep: usize) -> Result<Dataset> {
        let mut rng = stream(rep_seed(self.cfg.seed, rep), 0);
        self.truth.sample_dataset(&mut rng, self.cfg.n)
    }

    /// Bandwidth and model for one repetition's sample.
    pub fn fit(&self, data: &Dataset, seed: u64) -> Result<(f64, ConformalModel)> {
        let cfg = &self.cfg;
        let d = data.dim();
        let b = self.builder();
        match &cfg.bandwidth {
            BandwidthPolicy::Fixed { h } => Ok((*h, b.build(data, *h, cfg.alpha)?)),
            BandwidthPolicy::Default { beta, scale } => {
                let h = theory_bandwidth(data.len(), d, *beta, *scale)?;
                Ok((h, b.build(data, h, cfg.alpha)?))
            }
            BandwidthPolicy::Split {
                grid_size,
                span,
                beta,
                scale,
                tune_cells,
            } => {
                let grid = grid_around_theory(data.len(), d, *beta, *grid_size, *scale, *span)?;
                let eval = self.tuning_evaluator(*tune_cells, seed)?;
                let t = tune_split(data, &grid, cfg.alpha, &b, eval.as_ref(), seed)?;
                Ok((t.h, t.model))
            }
            BandwidthPolicy::Bonferroni {
                grid_size,
                span,
                beta,
                scale,
                tune_cells,
            } => {
                let grid = grid_around_theory(data.len(), d, *beta, *grid_size, *scale, *span)?;
                let eval = self.tuning_evaluator(*tune_cells, seed)?;
                let t = tune_bonferroni(data, &grid, cfg.alpha, &b, eval.as_ref())?;
                Ok((t.h, t.model))
            }
        }
    }

    /// Runs repetition `rep` alone.
    pub fn repetition(&self, rep: usize) -> Result<RepRecord> {
        let seed = rep_seed(self.cfg.seed, rep);
        let data = self.sample(rep)?;
        let (h, model) = self.fit(&data, seed)?;
        let d = self.truth.dim();

        let coverage: [f64; 3] = match self.cfg.coverage {
            CoverageMode::FreshPoint => {
                let mut rng = stream(seed, 1);
                let mut y = vec![0.0; d];
                self.truth.sample_into(&mut rng, &mut y);
                let c = model.classify(&y)?;
                [c.inner as u8 as f64, c.conformal as u8 as f64, c.outer as u8 as f64]
            }
            CoverageMode::RegionMass => region_masses(&self.truth, &model, self.cfg.mass_samples, seed ^ MASS_TAG),
        };

        let mut volumes: Option<[f64; 3]> = None;
        let mut losses: Option<[(f64, f64); 3]> = None;
        match &self.volume {
            None => {}
            Some(VolumePlan::Grid(g)) => {
                let regions = model.rasterize(g)?;
                let order = [Estimator::SandwichInner, Estimator::Conformal, Estimator::SandwichOuter];
                volumes = Some(order.map(|e| regions.get(e).volume()));
                if let Some(OracleInfo { raster: Some(o), .. }) = &self.oracle {
                    let mut l = [(0.0, 0.0); 3];
                    for (k, e) in order.iter().enumerate() {
                        let x = loss_against_oracle(regions.get(*e), o)?;
                        l[k] = (x.sym_diff, x.excess);
                    }
                    losses = Some(l);
                }
            }
            Some(VolumePlan::Mc { lower, upper, samples }) => {
                let cutoff = self.oracle.as_ref().map(|o| o.cutoff.cutoff);
                let (v, sd) = mc_region_volumes(&self.truth, &model, cutoff, lower, upper, *samples, seed ^ VOLUME_TAG);
                volumes = Some(v);
                if let Some(o) = &self.oracle {
                    losses = Some([0, 1, 2].map(|k| (sd[k], v[k] - o.volume)));
                }
            }
        }

        let outcomes = self
            .cfg
            .estimators
            .iter()
            .map(|&e| {
                let k = slot(e);
                Outcome {
                    estimator: e,
                    coverage: coverage[k],
                    volume: volumes.map(|v| v[k]),
                    sym_diff: losses.map(|l| l[k].0),
                    excess: losses.map(|l| l[k].1),
                    bounded: model.is_bounded(e),
                }
            })
            .collect();
        Ok(RepRecord { rep, seed, h, outcomes })
    }

    /// All repetitions, computed in parallel and aggregated in repetition
    /// order.
    pub fn run(&self) -> Result<ExperimentReport> {
        let start = Instant::now();
        let reps: Vec<RepRecord> = (0..self.cfg.repetitions)
            .into_par_iter()
            .map(|r| self.repetition(r))
            .collect::<Result<_>>()?;
        Ok(self.aggregate(reps, start.elapsed()))
    }

    fn aggregate(&self, reps: Vec<RepRecord>, wall_time: Duration) -> ExperimentReport {
        let hs: Vec<f64> = reps.iter().map(|r| r.h).collect();
        let estimators = self
            .cfg
            .estimators
            .iter()
            .enumerate()
            .map(|(k, &e)| {
                let col = |f: fn(&Outcome) -> Option<f64>| -> Option<Stat> {
                    let v: Option<Vec<f64>> = reps.iter().map(|r| f(&r.outcomes[k])).collect();
                    v.map(|v| Stat::of(&v))
                };
                EstimatorSummary {
                    estimator: e,
                    coverage: col(|o| Some(o.coverage)).expect("always present"),
                    volume: col(|o| o.volume),
                    sym_diff: col(|o| o.sym_diff),
                    excess: col(|o| o.excess),
                    unbounded_fraction: reps.iter().filter(|r| !r.outcomes[k].bounded).count() as f64
                        / reps.len() as f64,
                }
            })
            .collect();
        ExperimentReport {
            config: self.cfg.clone(),
            seeds: SeedInfo {
                master: self.cfg.seed,
                oracle: oracle_seed(self.cfg.seed),
            },
            oracle: self.oracle.as_ref().map(|o| OracleSummary {
                cutoff: o.cutoff.cutoff,
                cutoff_se: o.cutoff.se,
                volume: o.volume,
            }),
            bandwidth: Stat::of(&hs),
            estimators,
            repetitions: reps,
            wall_time,
        }
    }
}

fn slot(e: Estimator) -> usize {
    match e {
        Estimator::SandwichInner => 0,
        Estimator::Conformal => 1,
        Estimator::SandwichOuter => 2,
    }
}

fn tally(c: Classification, acc: &mut [usize; 3]) {
    acc[0] += c.inner as usize;
    acc[1] += c.conformal as usize;
    acc[2] += c.outer as usize;
}

/// Monte-Carlo masses of `(L-, C, L+)` under the truth from one shared set
/// of draws.
fn region_masses(truth: &MixtureDensity, model: &ConformalModel, samples: usize, seed: u64) -> [f64; 3] {
    let d = truth.dim();
    let chunks = samples.div_ceil(MC_CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, k as u64);
            let len = MC_CHUNK.min(samples - k * MC_CHUNK);
            let mut y = vec![0.0; d];
            let mut acc = [0usize; 3];
            for _ in 0..len {
                truth.sample_into(&mut rng, &mut y);
                tally(model.classify(&y).expect("dimension checked"), &mut acc);
            }
            acc
        })
        .reduce(|| [0; 3], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
    counts.map(|c| c as f64 / samples as f64)
}

/// Monte-Carlo volumes of `(L-, C, L+)` inside a box and, given the oracle
/// cutoff, of their symmetric differences with the oracle region.
fn mc_region_volumes(
    truth: &MixtureDensity,
    model: &ConformalModel,
    cutoff: Option<f64>,
    lower: &[f64],
    upper: &[f64],
    samples: usize,
    seed: u64,
) -> ([f64; 3], [f64; 3]) {
    use rand::Rng;
    let d = lower.len();
    let box_volume: f64 = (0..d).map(|j| upper[j] - lower[j]).product();
    let chunks = samples.div_ceil(MC_CHUNK);
    let (inside, xor) = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, k as u64);
            let len = MC_CHUNK.min(samples - k * MC_CHUNK);
            let mut y = vec![0.0; d];
            let mut acc = [0usize; 3];
            let mut xor = [0usize; 3];
            for _ in 0..len {
                for j in 0..d {
                    y[j] = lower[j] + rng.random::<f64>() * (upper[j] - lower[j]);
                }
                let c = model.classify(&y).expect("dimension checked");
                tally(c, &mut acc);
                if let Some(t) = cutoff {
                    let o = truth.pdf(&y) >= t;
                    xor[0] += (c.inner != o) as usize;
                    xor[1] += (c.conformal != o) as usize;
                    xor[2] += (c.outer != o) as usize;
                }
            }
            (acc, xor)
        })
        .reduce(
            || ([0; 3], [0; 3]),
            |a, b| {
                (
                    [a.0[0] + b.0[0], a.0[1] + b.0[1], a.0[2] + b.0[2]],
                    [a.1[0] + b.1[0], a.1[1] + b.1[1], a.1[2] + b.1[2]],
                )
            },
        );
    let scale = box_volume / samples as f64;
    (inside.map(|c| c as f64 * scale), xor.map(|c| c as f64 * scale))
}

/// [`Experiment::prepare`] then [`Experiment::run`].
pub fn run_coverage_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Experiment::prepare(cfg.clone())?.run()
}

/// A coverage experiment repeated over several sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub sizes: Vec<usize>,
    /// Its `n` is replaced by each entry of `sizes`.
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub n: usize,
    pub estimator: Estimator,
    pub coverage: Stat,
    pub volume: Option<Stat>,
    pub sym_diff: Option<Stat>,
    pub excess: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub config: RateConfig,
    pub rows: Vec<RateRow>,
    pub reference_estimator: Estimator,
    /// Mean excess loss at the first size over that at the last.
    pub excess_ratio: f64,
    pub sym_diff_ratio: f64,
    /// `sqrt((ln n1 / n1) / (ln n2 / n2))` for the first and last sizes.
    pub theoretical_ratio: f64,
    #[serde(skip)]
    pub reports: Vec<ExperimentReport>,
}

impl RateReport {
    pub fn row(&self, n_index: usize, e: Estimator) -> Option<&RateRow> {
        let n = *self.config.sizes.get(n_index)?;
        self.rows
            .iter()
            .filter(|r| r.n == n && r.estimator == e)
            .nth(self.config.sizes[..n_index].iter().filter(|&&m| m == n).count())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,estimator,coverage,coverage_se,sym_diff,sym_diff_se,excess,excess_se\n");
        let pair = |s: Option<Stat>| match s {
            Some(s) => format!("{},{}", fmt_f64(s.mean), fmt_f64(s.se)),
            None => ",".to_string(),
        };
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.n,
                r.estimator.name(),
                pair(Some(r.coverage)),
                pair(r.sym_diff),
                pair(r.excess)
            ));
        }
        out
    }
}

pub fn run_rate_experiment(cfg: &RateConfig) -> Result<RateReport> {
    if cfg.sizes.len() < 2 {
        return Err(Error::config("sizes", "needs at least two sample sizes"));
    }
    if cfg.experiment.volume.as_ref().is_none_or(|v| !v.losses) {
        return Err(Error::config("experiment.volume", "rate experiments need oracle losses"));
    }
    let mut template = cfg.experiment.clone();
    template.n = cfg.sizes[0];
    let base = Experiment::prepare(template)?;
    let mut reports = Vec::with_capacity(cfg.sizes.len());
    for (k, &n) in cfg.sizes.iter().enumerate() {
        let mut c = cfg.experiment.clone();
        c.n = n;
        c.seed = splitmix64(cfg.experiment.seed ^ splitmix64(0x5241_5445 + k as u64));
        c.validate()?;
        let ex = Experiment { cfg: c, ..base.clone() };
        reports.push(ex.run()?);
    }
    let reference_estimator = if cfg.experiment.estimators.contains(&Estimator::Conformal) {
        Estimator::Conformal
    } else {
        cfg.experiment.estimators[0]
    };
    let rows: Vec<RateRow> = reports
        .iter()
        .flat_map(|rep| {
            rep.estimators.iter().map(move |s| RateRow {
                n: rep.config.n,
                estimator: s.estimator,
                coverage: s.coverage,
                volume: s.volume,
                sym_diff: s.sym_diff,
                excess: s.excess,
            })
        })
        .collect();
    let first = reports[0].summary(reference_estimator).expect("estimator present");
    let last = reports[reports.len() - 1].summary(reference_estimator).expect("estimator present");
    let ratio = |a: Option<Stat>, b: Option<Stat>| a.expect("losses on").mean / b.expect("losses on").mean;
    let rate = |n: usize| (n as f64).ln() / n as f64;
    let (n1, n2) = (cfg.sizes[0], cfg.sizes[cfg.sizes.len() - 1]);
    Ok(RateReport {
        config: cfg.clone(),
        rows,
        reference_estimator,
        excess_ratio: ratio(first.excess, last.excess),
        sym_diff_ratio: ratio(first.sym_diff, last.sym_diff),
        theoretical_ratio: (rate(n1) / rate(n2)).sqrt(),
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTruth {
    pub name: String,
    pub truth: TruthSpec,
}

/// Coverage under deliberately poor bandwidths and awkward truths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressConfig {
    #[serde(default = "stress_n")]
    pub n: usize,
    #[serde(default = "stress_alpha")]
    pub alpha: f64,
    #[serde(default = "stress_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kernel: KernelFamily,
    /// Multiples of the theory bandwidth to run at.
    #[serde(default = "stress_factors")]
    pub bandwidth_factors: Vec<f64>,
    #[serde(default = "stress_suite")]
    pub truths: Vec<NamedTruth>,
    /// Repetitions of the split-tuned region-mass run on the reference
    /// mixture measuring inner-set coverage; 0 skips it.
    #[serde(default = "inner_reps")]
    pub inner_check_repetitions: usize,
    #[serde(default = "default_mass_samples")]
    pub inner_check_mass_samples: usize,
}

fn stress_n() -> usize {
    200
}
fn stress_alpha() -> f64 {
    0.1
}
fn stress_reps() -> usize {
    2000
}
fn stress_factors() -> Vec<f64> {
    vec![0.05, 20.0]
}
fn inner_reps() -> usize {
    500
}

pub fn stress_suite() -> Vec<NamedTruth> {
    vec![
        NamedTruth {
            name: "heavy-tailed".into(),
            truth: TruthSpec::HeavyTailed { dim: 2 },
        },
        NamedTruth {
            name: "near-discrete".into(),
            truth: TruthSpec::NearDiscrete { dim: 2 },
        },
        NamedTruth {
            name: "skewed".into(),
            truth: TruthSpec::Skewed {},
        },
    ]
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            n: stress_n(),
            alpha: stress_alpha(),
            repetitions: stress_reps(),
            seed: 0,
            kernel: KernelFamily::default(),
            bandwidth_factors: stress_factors(),
            truths: stress_suite(),
            inner_check_repetitions: inner_reps(),
            inner_check_mass_samples: default_mass_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StressRow {
    pub truth: String,
    pub factor: f64,
    pub h: f64,
    pub conformal: Stat,
    pub sandwich_inner: Stat,
    pub sandwich_outer: Stat,
    /// `1 - alpha - 3 sqrt(alpha (1 - alpha) / R)`.
    pub threshold: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerCheck {
    pub repetitions: usize,
    pub sandwich_inner: Stat,
    pub conformal: Stat,
    pub nominal: f64,
    pub below_nominal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StressReport {
    pub config: StressConfig,
    pub rows: Vec<StressRow>,
    pub inner_check: Option<InnerCheck>,
    pub all_valid: bool,
}

impl StressReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "truth,factor,h,conformal,conformal_se,sandwich_inner,sandwich_inner_se,sandwich_outer,sandwich_outer_se,threshold,valid\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.truth,
                fmt_f64(r.factor),
                fmt_f64(r.h),
                fmt_f64(r.conformal.mean),
                fmt_f64(r.conformal.se),
                fmt_f64(r.sandwich_inner.mean),
                fmt_f64(r.sandwich_inner.se),
                fmt_f64(r.sandwich_outer.mean),
                fmt_f64(r.sandwich_outer.se),
                fmt_f64(r.threshold),
                r.valid
            ));
        }
        out
    }
}

pub fn run_validity_stress(cfg: &StressConfig) -> Result<StressReport> {
    if cfg.repetitions == 0 {
        return Err(Error::config("repetitions", "must be at least 1"));
    }
    if cfg.bandwidth_factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::config("bandwidth_factors", "must be positive"));
    }
    let threshold = 1.0 - cfg.alpha - 3.0 * (cfg.alpha * (1.0 - cfg.alpha) / cfg.repetitions as f64).sqrt();
    let mut rows = Vec::new();
    let mut case = 0u64;
    for t in &cfg.truths {
        let d = t.truth.build().map_err(|e| Error::config("truths", e.to_string()))?.dim();
        let h0 = theory_bandwidth(cfg.n, d, 1.0, 1.0)?;
        for &factor in &cfg.bandwidth_factors {
            case += 1;
            let h = factor * h0;
            let exp = ExperimentConfig {
                truth: t.truth.clone(),
                n: cfg.n,
                alpha: cfg.alpha,
                repetitions: cfg.repetitions,
                estimators: all_estimators(),
                kernel: cfg.kernel,
                bandwidth: BandwidthPolicy::Fixed { h },
                coverage: CoverageMode::FreshPoint,
                mass_samples: default_mass_samples(),
                volume: None,
                oracle: OracleConfig::default(),
                seed: splitmix64(cfg.seed ^ splitmix64(case)),
            };
            let rep = run_coverage_experiment(&exp)?;
            let get = |e| rep.summary(e).expect("all estimators run").coverage;
            let (c, i, o) = (get(Estimator::Conformal), get(Estimator::SandwichInner), get(Estimator::SandwichOuter));
            rows.push(StressRow {
                truth: t.name.clone(),
                factor,
                h,
                conformal: c,
                sandwich_inner: i,
                sandwich_outer: o,
                threshold,
                valid: c.mean >= threshold && o.mean >= threshold,
            });
        }
    }
    let inner_check = if cfg.inner_check_repetitions > 0 {
        let exp = ExperimentConfig {
            truth: TruthSpec::LShape {},
            n: cfg.n,
            alpha: cfg.alpha,
            repetitions: cfg.inner_check_repetitions,
            estimators: vec![Estimator::SandwichInner, Estimator::Conformal],
            kernel: cfg.kernel,
            bandwidth: BandwidthPolicy::Split {
                grid_size: split_grid_size(),
                span: eight(),
                beta: 1.0,
                scale: 1.0,
                tune_cells: None,
            },
            coverage: CoverageMode::RegionMass,
            mass_samples: cfg.inner_check_mass_samples,
            volume: None,
            oracle: OracleConfig::default(),
            seed: splitmix64(cfg.seed ^ 0x494e_4e45_52),
        };
        let rep = run_coverage_experiment(&exp)?;
        let inner = rep.summary(Estimator::SandwichInner).expect("requested").coverage;
        let conformal = rep.summary(Estimator::Conformal).expect("requested").coverage;
        Some(InnerCheck {
            repetitions: cfg.inner_check_repetitions,
            sandwich_inner: inner,
            conformal,
            nominal: 1.0 - cfg.alpha,
            below_nominal: inner.mean < 1.0 - cfg.alpha,
        })
    } else {
        None
    };
    Ok(StressReport {
        config: cfg.clone(),
        all_valid: rows.iter().all(|r| r.valid),
        rows,
        inner_check,
    })
}
