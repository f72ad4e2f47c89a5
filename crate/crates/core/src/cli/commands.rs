//! The four subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bandwidth::{grid_around_theory, theory_bandwidth, tune_bonferroni, tune_split, CurvePoint, GridVolume, KdeBuilder, RegionBuilder, SplitIndices};
use crate::conformal::{ConformalModel, Estimator};
use crate::density::{Dataset, DensityEstimate};
use crate::error::{Error, Result};
use crate::geometry::{default_resolution, Grid, GridRegionJson};
use crate::harness::{run_coverage_experiment, run_rate_experiment, run_validity_stress, ExperimentConfig, RateConfig, StressConfig};
use crate::io::{fmt_f64, read_matrix_file, read_points_file, to_json_string, Header};
use crate::kernels::{product_kernel, KernelFamily, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tuner {
    Split,
    Bonferroni,
}

impl std::str::FromStr for Tuner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Tuner::Split),
            "bonferroni" => Ok(Tuner::Bonferroni),
            other => Err(Error::invalid(format!("unknown tuner '{other}' (expected split or bonferroni)"))),
        }
    }
}

fn default_alpha() -> f64 {
    0.1
}
fn one() -> f64 {
    1.0
}
fn eight() -> f64 {
    8.0
}

/// Resolved settings of `region` and `tune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub data: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub kernel: KernelFamily,
    /// Fixed bandwidth; without it and without a tuner the theory bandwidth
    /// `scale (ln n / n)^(1 / (2 beta + d))` is used.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default)]
    pub tuner: Option<Tuner>,
    /// Number of candidate bandwidths (20 for split, 10 for Bonferroni).
    #[serde(default)]
    pub grid_size: Option<usize>,
    /// Candidates span `[h0 / span, h0 * span]`.
    #[serde(default = "eight")]
    pub grid_span: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Cells per dimension of the output and tuning grids.
    #[serde(default)]
    pub grid_res: Option<usize>,
    #[serde(default)]
    pub header: Header,
    #[serde(default)]
    pub seed: u64,
}

/// The data and parameters `member` needs to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub kernel: KernelSpec,
    pub bandwidth: f64,
    pub alpha: f64,
    pub data: Vec<Vec<f64>>,
}

impl ModelJson {
    fn of(model: &ConformalModel) -> Self {
        ModelJson {
            kernel: *model.estimate().kernel(),
            bandwidth: model.estimate().bandwidth(),
            alpha: model.alpha(),
            data: model.data().points().map(<[f64]>::to_vec).collect(),
        }
    }

    fn build(&self, alpha: f64) -> Result<ConformalModel> {
        let data = Dataset::new(self.data.clone())?;
        ConformalModel::new(DensityEstimate::new(data, self.kernel, self.bandwidth)?, alpha)
    }
}

#[derive(Debug, Serialize)]
struct RegionSummary {
    estimator: Estimator,
    bounded: bool,
    /// `+inf` (written as null) for unbounded regions.
    volume: f64,
    cells: usize,
}

#[derive(Debug, Serialize)]
struct Summary {
    n: usize,
    dim: usize,
    alpha: f64,
    alpha_tilde: f64,
    i_cut: usize,
    degenerate: bool,
    bandwidth: f64,
    t_minus: f64,
    t_plus: f64,
    regions: Vec<RegionSummary>,
}

#[derive(Debug, Serialize)]
struct Regions {
    conformal: GridRegionJson,
    sandwich_inner: GridRegionJson,
    sandwich_outer: GridRegionJson,
}

#[derive(Debug, Serialize)]
struct Tuning {
    tuner: Tuner,
    h: f64,
    candidate_alpha: f64,
    curve: Vec<CurvePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<SplitIndices>,
}

#[derive(Debug, Serialize)]
struct RegionOutput<'a> {
    command: &'static str,
    config: &'a RegionConfig,
    seed: u64,
    model: ModelJson,
    summary: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    tuning: Option<Tuning>,
    regions: Regions,
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| Error::invalid(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn degenerate_warning(model: &ConformalModel) {
    if model.is_degenerate() {
        eprintln!(
            "warning: floor((n + 1) alpha) = 0 for n = {} and alpha = {}; every region is all of R^{}",
            model.data().len(),
            model.alpha(),
            model.data().dim()
        );
    }
}

fn load_data(cfg: &RegionConfig) -> Result<Dataset> {
    let data = read_points_file(&cfg.data, None, cfg.header)?;
    if data.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 data rows, found {}", data.len())));
    }
    Ok(data)
}

/// Fills in defaults that depend on the data so the echoed config is
/// complete.
fn resolve(cfg: &mut RegionConfig, data: &Dataset) -> Result<()> {
    if cfg.bandwidth.is_some() && cfg.tuner.is_some() {
        return Err(Error::config("bandwidth", "a fixed bandwidth cannot be combined with a tuner"));
    }
    if let Some(h) = cfg.bandwidth {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config("bandwidth", format!("must be positive and finite, got {h}")));
        }
    }
    if cfg.grid_res.is_none() {
        cfg.grid_res = Some(default_resolution(data.dim())?);
    }
    match cfg.tuner {
        Some(t) if cfg.grid_size.is_none() => {
            cfg.grid_size = Some(match t {
                Tuner::Split => 20,
                Tuner::Bonferroni => 10,
            })
        }
        None if cfg.grid_size.is_some() => {
            return Err(Error::config("grid_size", "only applies together with a tuner"));
        }
        _ => {}
    }
    Ok(())
}

fn fit(cfg: &RegionConfig, data: &Dataset) -> Result<(ConformalModel, Option<Tuning>)> {
    let builder = KdeBuilder { kernel: cfg.kernel };
    let cells = cfg.grid_res.expect("resolved");
    match cfg.tuner {
        None => {
            let h = match cfg.bandwidth {
                Some(h) => h,
                None => theory_bandwidth(data.len(), data.dim(), cfg.beta, cfg.scale)?,
            };
            Ok((builder.build(data, h, cfg.alpha)?, None))
        }
        Some(tuner) => {
            let m = cfg.grid_size.expect("resolved");
            let grid = grid_around_theory(data.len(), data.dim(), cfg.beta, m, cfg.scale, cfg.grid_span)?;
            let eval = GridVolume::covering(Estimator::Conformal, cells);
            let t = match tuner {
                Tuner::Split => tune_split(data, &grid, cfg.alpha, &builder, &eval, cfg.seed)?,
                Tuner::Bonferroni => tune_bonferroni(data, &grid, cfg.alpha, &builder, &eval)?,
            };
            let tuning = Tuning {
                tuner,
                h: t.h,
                candidate_alpha: t.candidate_alpha,
                curve: t.curve,
                split: t.split,
            };
            Ok((t.model, Some(tuning)))
        }
    }
}

fn region_output<'a>(cfg: &'a RegionConfig, model: &ConformalModel, tuning: Option<Tuning>) -> Result<(RegionOutput<'a>, String)> {
    let grid = Grid::covering(model.estimate(), cfg.grid_res.expect("resolved"))?;
    let regions = model.rasterize(&grid)?;
    let c = model.cutoffs();
    let mut text = String::new();
    let summaries: Vec<RegionSummary> = [Estimator::SandwichInner, Estimator::Conformal, Estimator::SandwichOuter]
        .into_iter()
        .map(|e| {
            let r = regions.get(e);
            let bounded = model.is_bounded(e);
            RegionSummary {
                estimator: e,
                bounded,
                volume: if bounded { r.volume() } else { f64::INFINITY },
                cells: r.count(),
            }
        })
        .collect();
    let _ = writeln!(
        text,
        "n = {}, d = {}, h = {}, alpha = {}, alpha_tilde = {}, i_cut = {}",
        model.data().len(),
        model.data().dim(),
        fmt_f64(model.estimate().bandwidth()),
        fmt_f64(model.alpha()),
        fmt_f64(model.alpha_tilde()),
        model.i_cut()
    );
    let _ = writeln!(text, "t_minus = {}, t_plus = {}", fmt_f64(c.t_minus), fmt_f64(c.t_plus));
    for s in &summaries {
        let _ = writeln!(text, "volume {} = {}", s.estimator.name(), fmt_f64(s.volume));
    }
    let out = RegionOutput {
        command: if cfg.tuner.is_some() { "tune" } else { "region" },
        config: cfg,
        seed: cfg.seed,
        model: ModelJson::of(model),
        summary: Summary {
            n: model.data().len(),
            dim: model.data().dim(),
            alpha: model.alpha(),
            alpha_tilde: model.alpha_tilde(),
            i_cut: model.i_cut(),
            degenerate: c.degenerate,
            bandwidth: model.estimate().bandwidth(),
            t_minus: c.t_minus,
            t_plus: c.t_plus,
            regions: summaries,
        },
        tuning,
        regions: Regions {
            conformal: regions.conformal.to_wire(),
            sandwich_inner: regions.inner.to_wire(),
            sandwich_outer: regions.outer.to_wire(),
        },
    };
    Ok((out, text))
}

/// `region` and `tune`. The JSON goes to `out` (or stdout) and a readable
/// summary to stderr.
pub fn region(mut cfg: RegionConfig, out: Option<&Path>, curve: Option<&Path>) -> Result<()> {
    let data = load_data(&cfg)?;
    resolve(&mut cfg, &data)?;
    let (model, tuning) = fit(&cfg, &data)?;
    degenerate_warning(&model);
    if let (Some(path), Some(t)) = (curve, &tuning) {
        let mut csv = String::from("h,volume\n");
        for p in &t.curve {
            let _ = writeln!(csv, "{},{}", fmt_f64(p.h), fmt_f64(p.volume));
        }
        write_output(Some(path), &csv)?;
    }
    let (output, text) = region_output(&cfg, &model, tuning)?;
    let json = to_json_string(&output)?;
    write_output(out, &(json + "\n"))?;
    eprint!("{text}");
    Ok(())
}

/// Resolved settings of `member`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberConfig {
    /// Region JSON from `region` or `tune`, carrying the model.
    #[serde(default)]
    pub region: Option<PathBuf>,
    /// Alternatively, build the model from data.
    #[serde(default)]
    pub data: Option<PathBuf>,
    pub query: PathBuf,
    /// Defaults to the level stored in the region file, else 0.1.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub kernel: Option<KernelFamily>,
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub header: Header,
}

#[derive(Deserialize)]
struct RegionFile {
    model: ModelJson,
}

fn member_model(cfg: &mut MemberConfig) -> Result<ConformalModel> {
    match (&cfg.region, &cfg.data) {
        (Some(_), Some(_)) => Err(Error::config("data", "give either a region file or data, not both")),
        (None, None) => Err(Error::config("region", "a region file or a data file is required")),
        (Some(path), None) => {
            if cfg.kernel.is_some() || cfg.bandwidth.is_some() {
                return Err(Error::config("bandwidth", "kernel and bandwidth come from the region file"));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
            let mut de = serde_json::Deserializer::from_str(&text);
            let file: RegionFile = serde_path_to_error::deserialize(&mut de)
                .map_err(|e| Error::invalid(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?;
            let alpha = *cfg.alpha.get_or_insert(file.model.alpha);
            cfg.kernel = Some(file.model.kernel.family());
            cfg.bandwidth = Some(file.model.bandwidth);
            file.model.build(alpha)
        }
        (None, Some(path)) => {
            let data = read_points_file(path, None, cfg.header)?;
            let kernel = *cfg.kernel.get_or_insert(KernelFamily::default());
            let alpha = *cfg.alpha.get_or_insert(default_alpha());
            let h = match cfg.bandwidth {
                Some(h) => h,
                None => theory_bandwidth(data.len(), data.dim(), cfg.beta, cfg.scale)?,
            };
            cfg.bandwidth = Some(h);
            let k = product_kernel(kernel, data.dim())?;
            ConformalModel::new(DensityEstimate::new(data, k, h)?, alpha)
        }
    }
}

/// `member`: one CSV row per query point. An empty query file gives empty
/// output.
pub fn member(mut cfg: MemberConfig, out: Option<&Path>) -> Result<()> {
    let model = member_model(&mut cfg)?;
    degenerate_warning(&model);
    let d = model.data().dim();
    let (_, values) = read_matrix_file(&cfg.query, Some(d), cfg.header)?;
    let echo = to_json_string(&cfg)?;
    if values.is_empty() {
        eprintln!("# config {echo}");
        return write_output(out, "");
    }
    let mut text = format!("# config {echo}\nindex,pvalue,conformal,sandwich_inner,sandwich_outer\n");
    for (i, y) in values.chunks_exact(d).enumerate() {
        let p = model.pvalue(y)?;
        let c = model.classify(y)?;
        let _ = writeln!(text, "{i},{},{},{},{}", fmt_f64(p), c.conformal, c.inner, c.outer);
    }
    write_output(out, &text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulationMode {
    Coverage,
    Rate,
    Stress,
}

/// A `simulate` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimulationMode,
    /// Sample sizes of a rate run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stress: Option<StressConfig>,
    /// Directory for `report.json` and the CSV tables; stdout otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl SimulateConfig {
    fn check_sections(&self) -> Result<()> {
        let needs = |present: bool, key: &str, what: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::config(key, what.to_string()))
            }
        };
        match self.mode {
            SimulationMode::Coverage => {
                needs(self.experiment.is_some(), "experiment", "mode = \"coverage\" needs an [experiment] table")?;
                needs(self.sizes.is_none(), "sizes", "only applies to mode = \"rate\"")?;
                needs(self.stress.is_none(), "stress", "only applies to mode = \"stress\"")
            }
            SimulationMode::Rate => {
                needs(self.experiment.is_some(), "experiment", "mode = \"rate\" needs an [experiment] table")?;
                needs(self.sizes.is_some(), "sizes", "mode = \"rate\" needs a list of sample sizes")?;
                needs(self.stress.is_none(), "stress", "only applies to mode = \"stress\"")
            }
            SimulationMode::Stress => {
                needs(self.experiment.is_none(), "experiment", "not used by mode = \"stress\"; use [stress]")?;
                needs(self.sizes.is_none(), "sizes", "only applies to mode = \"rate\"")
            }
        }
    }

    /// Applies `--repetitions` and `--seed` to whichever section runs.
    pub fn override_run(&mut self, repetitions: Option<usize>, seed: Option<u64>) {
        if self.mode == SimulationMode::Stress {
            let s = self.stress.get_or_insert_with(StressConfig::default);
            if let Some(r) = repetitions {
                s.repetitions = r;
                s.inner_check_repetitions = s.inner_check_repetitions.min(r);
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
        } else if let Some(e) = self.experiment.as_mut() {
            if let Some(r) = repetitions {
                e.repetitions = r;
            }
            if let Some(seed) = seed {
                e.seed = seed;
            }
        }
    }

    fn seed(&self) -> u64 {
        match (&self.experiment, &self.stress) {
            (Some(e), _) => e.seed,
            (None, Some(s)) => s.seed,
            (None, None) => 0,
        }
    }
}

#[derive(Serialize)]
struct SimulateOutput<'a, R: Serialize> {
    command: &'static str,
    config: &'a SimulateConfig,
    seed: u64,
    report: &'a R,
}

fn prefix_path(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { path, message } => Error::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

fn emit<R: Serialize>(cfg: &SimulateConfig, report: &R, tables: &[(&str, String)]) -> Result<()> {
    let json = to_json_string(&SimulateOutput {
        command: "simulate",
        config: cfg,
        seed: cfg.seed(),
        report,
    })? + "\n";
    match &cfg.out_dir {
        None => write_output(None, &json),
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::invalid(format!("cannot create {}: {e}", dir.display())))?;
            write_output(Some(&dir.join("report.json")), &json)?;
            for (name, body) in tables {
                write_output(Some(&dir.join(name)), body)?;
            }
            if let Some((_, summary)) = tables.first() {
                print!("{summary}");
            }
            Ok(())
        }
    }
}

/// `simulate`: dispatches to the harness and writes its reports.
pub fn simulate(cfg: SimulateConfig) -> Result<()> {
    cfg.check_sections()?;
    let start = Instant::now();
    match cfg.mode {
        SimulationMode::Coverage => {
            let e = cfg.experiment.as_ref().expect("checked");
            let report = run_coverage_experiment(e).map_err(|err| prefix_path("experiment", err))?;
            emit(&cfg, &report, &[("summary.csv", report.to_csv()), ("repetitions.csv", report.per_rep_csv())])?;
        }
        SimulationMode::Rate => {
            let rate = RateConfig {
                sizes: cfg.sizes.clone().expect("checked"),
                experiment: cfg.experiment.clone().expect("checked"),
            };
            let report = run_rate_experiment(&rate).map_err(|err| match err {
                Error::Config { path, message } if path == "sizes" => Error::Config { path, message },
                Error::Config { path, message } if path.starts_with("experiment") => Error::Config { path, message },
                other => prefix_path("experiment", other),
            })?;
            emit(&cfg, &report, &[("summary.csv", report.to_csv())])?;
        }
        SimulationMode::Stress => {
            let s = cfg.stress.clone().unwrap_or_default();
            let report = run_validity_stress(&s).map_err(|err| prefix_path("stress", err))?;
            emit(&cfg, &report, &[("summary.csv", report.to_csv())])?;
        }
    }
    eprintln!("finished in {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}
