//! Command-line driver.
//!
//! Every command takes an optional `--config` file (TOML, or JSON by
//! extension) whose keys mirror the long flags with `_` for `-`; flags win.
//! Exit codes: 0 success, 2 input or config error, 3 numerical degeneracy.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::Error;
use crate::io::Header;
use crate::kernels::KernelFamily;
use commands::{MemberConfig, RegionConfig, SimulateConfig, Tuner};

#[derive(Debug, Parser)]
#[command(name = "conformal-kde", version, about = "Conformal prediction regions from kernel density estimates")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "CONFORMAL_KDE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the conformal region and both sandwiching sets.
    Region(RegionArgs),
    /// P-values and memberships of query points.
    Member(MemberArgs),
    /// Choose the bandwidth by minimum region volume.
    Tune(TuneArgs),
    /// Run a coverage, rate or stress experiment from a config file.
    Simulate(SimulateArgs),
}

fn parse_header(s: &str) -> Result<Header, String> {
    match s {
        "auto" => Ok(Header::Auto),
        "present" | "yes" => Ok(Header::Present),
        "absent" | "no" => Ok(Header::Absent),
        _ => Err(format!("expected auto, present or absent, got '{s}'")),
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// CSV of points, one per row.
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kernel: Option<KernelFamily>,
    /// Cells per dimension of the output grid.
    #[arg(long)]
    pub grid_res: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub grid_span: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// auto, present or absent.
    #[arg(long, value_parser = parse_header)]
    pub header: Option<Header>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Region JSON destination; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ModelArgs {
    fn overrides(&self) -> serde_json::Value {
        json!({
            "data": self.data,
            "alpha": self.alpha,
            "kernel": self.kernel,
            "grid_res": self.grid_res,
            "grid_size": self.grid_size,
            "grid_span": self.grid_span,
            "beta": self.beta,
            "scale": self.scale,
            "header": self.header,
            "seed": self.seed,
        })
    }
}

#[derive(Debug, Args)]
pub struct RegionArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, conflicts_with = "tune")]
    pub bandwidth: Option<f64>,
    /// Tune the bandwidth instead of fixing it.
    #[arg(long)]
    pub tune: Option<Tuner>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// split (default) or bonferroni.
    #[arg(long)]
    pub tuner: Option<Tuner>,
    /// Write the (h, volume) curve here as CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MemberArgs {
    /// Region JSON written by `region` or `tune`.
    #[arg(long)]
    pub region: Option<PathBuf>,
    /// Build the model from this CSV instead.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub query: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kernel: Option<KernelFamily>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long, value_parser = parse_header)]
    pub header: Option<Header>,
    /// CSV destination; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment config (TOML or JSON).
    pub config: PathBuf,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> crate::Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Region(a) => {
            let mut flags = a.model.overrides();
            flags["bandwidth"] = json!(a.bandwidth);
            flags["tuner"] = json!(a.tune);
            let cfg: RegionConfig = config::layered(a.model.config.as_deref(), flags)?;
            commands::region(cfg, a.model.out.as_deref(), None)
        }
        Command::Tune(a) => {
            let mut flags = a.model.overrides();
            flags["tuner"] = json!(a.tuner);
            let mut cfg: RegionConfig = config::layered(a.model.config.as_deref(), flags)?;
            cfg.tuner.get_or_insert(Tuner::Split);
            commands::region(cfg, a.model.out.as_deref(), a.curve.as_deref())
        }
        Command::Member(a) => {
            let flags = json!({
                "region": a.region,
                "data": a.data,
                "query": a.query,
                "alpha": a.alpha,
                "kernel": a.kernel,
                "bandwidth": a.bandwidth,
                "beta": a.beta,
                "scale": a.scale,
                "header": a.header,
            });
            let cfg: MemberConfig = config::layered(a.config.as_deref(), flags)?;
            commands::member(cfg, a.out.as_deref())
        }
        Command::Simulate(a) => {
            let flags = json!({ "out_dir": a.out_dir });
            let mut cfg: SimulateConfig = config::layered(Some(&a.config), flags)?;
            cfg.override_run(a.repetitions, a.seed);
            commands::simulate(cfg)
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Degenerate(_) | Error::Atom { .. } => 3,
        _ => 2,
    }
}

/// Parses the process arguments, runs the command and maps errors to exit
/// codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
