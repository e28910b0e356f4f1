use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use coda::pipeline::{RunConfig, Variant};
use coda_cli::commands::{self, AnalyzeArgs, Ctx, Figure, Overrides, Precision, SampleArgs};

#[derive(Parser)]
#[command(name = "coda", version, about = "On-policy trajectory diffusion for offline MARL on polynomial games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); defaults to the Multiplication settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `$CODA_OUT/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Classifier-guidance scale.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Fraction of each training pool drawn from synthetic data.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
    /// Root for default output directories.
    #[arg(long, global = true, env = "CODA_OUT", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the offline dataset.
    GenData,
    /// Fit a diffusion prior to the offline dataset.
    TrainDiffusion {
        /// unconditional, action or return; defaults to what the variant samples from.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Generate one synthetic batch.
    Sample {
        /// Directory written by train-diffusion; trains a fresh prior if omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Policy to condition on, as `x,y`.
        #[arg(long, value_parser = parse_pair)]
        theta: Option<(f64, f64)>,
    },
    /// One training run.
    Run,
    /// Several seeds and variants in parallel.
    Sweep {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Comma-separated; defaults to every variant.
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Vec<Variant>,
    },
    /// Steering and distribution report on sample files, or the field
    /// analysis of the config's dataset when no files are given.
    Analyze {
        samples: Vec<PathBuf>,
        #[arg(long, value_parser = parse_pair)]
        theta: Option<(f64, f64)>,
        /// Matrix file to compare sample distributions against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Multiplication-game figure: dataset, policy paths, returns.
    ReproFig1,
    /// Twin Peaks figure: dataset, policy paths, returns.
    ReproFig2,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDiffusion { .. } => "train-diffusion",
            Command::Sample { .. } => "sample",
            Command::Run => "run",
            Command::Sweep { .. } => "sweep",
            Command::Analyze { .. } => "analyze",
            Command::ReproFig1 => "repro-fig1",
            Command::ReproFig2 => "repro-fig2",
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `x,y`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

fn execute(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let out = c.out.clone().unwrap_or_else(|| c.out_root.join(cli.command.name()));
    let precision = match c.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    let ov = Overrides { seed: c.seed, variant: c.variant, lambda: c.lambda, alpha: c.alpha };

    let ctx = || -> Result<Ctx> {
        let cfg = commands::resolve_config(c.config.as_deref(), &ov).map_err(|e| e.context("stage config"))?;
        Ok(Ctx { out: out.clone(), cfg, precision })
    };
    match cli.command {
        Command::GenData => {
            let p = commands::gen_data(&ctx()?)?;
            println!("wrote {}", p.display());
        }
        Command::TrainDiffusion { ref kind } => {
            let kind = kind.as_deref().map(commands::parse_prior_kind).transpose().map_err(|e| e.context("stage config"))?;
            commands::train_diffusion(&ctx()?, kind)?;
            println!("wrote {}", out.display());
        }
        Command::Sample { ref model, n, theta } => {
            let p = commands::sample(&ctx()?, &SampleArgs { model: model.clone(), n, theta })?;
            println!("wrote {}", p.display());
        }
        Command::Run => {
            let log = commands::run_one(&ctx()?)?;
            print!("{}", log.summary_text());
        }
        Command::Sweep { seeds, ref variants } => {
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.clone() };
            print!("{}", commands::sweep_cmd(&ctx()?, seeds, &variants)?);
        }
        Command::Analyze { ref samples, theta, ref reference } => {
            let args = AnalyzeArgs { samples: samples.clone(), theta, reference: reference.clone() };
            print!("{}", commands::analyze(&ctx()?, &args)?);
        }
        Command::ReproFig1 => repro(c, Figure::Multiplication, &out, &ov, precision)?,
        Command::ReproFig2 => repro(c, Figure::TwinPeaks, &out, &ov, precision)?,
    }
    Ok(())
}

/// `--config` is the template for all four runs and `--variant` picks the
/// CODA route drawn.
fn repro(c: &Common, fig: Figure, out: &Path, ov: &Overrides, precision: Precision) -> Result<()> {
    let template: Option<RunConfig> = match &c.config {
        Some(p) => Some(commands::resolve_config(Some(p), &Overrides::default()).map_err(|e| e.context("stage config"))?),
        None => None,
    };
    let coda = c.variant.unwrap_or(Variant::CodaClassifier);
    let ov = Overrides { variant: None, ..ov.clone() };
    for r in commands::repro(out, fig, template.as_ref(), &ov, coda, precision)? {
        println!("{:<10} final theta ({:+.4}, {:+.4})  return {:+.4}", r.label, r.log.final_theta.0, r.log.final_theta.1, r.log.final_return);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
