//! Subcommand bodies. Each writes its metadata record first, then results,
//! and tags failures with the stage that produced them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use coda::analysis::{
    constant_field_check, contraction_battery, distribution_diagnostics, fixed_point_report, mean_policy_loglik,
    twin_peaks_params,
};
use coda::diffusion::{DenoiserModel, LossCurve};
use coda::games::{write_dataset, GameKind, OfflineDataset};
use coda::marl::JointPolicy;
use coda::pipeline::{build_dataset, generate, run, sweep, train_prior, PriorKind, RunConfig, RunLog, TrainedPrior, Variant};
use coda::scalar::fmt_exact;
use coda::transforms::CdfNormalizer;
use coda::Scalar;

use crate::io::{read_matrix, trajectory_header, write_matrix, write_meta};
use crate::svg::{self, Bounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

macro_rules! dispatch {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(l) = self.lambda {
            cfg.guidance.lambda = l;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
    }
}

/// Config file (or the Multiplication defaults) with overrides applied.
pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| anyhow!("config {}: {}", p.display(), e.message()))?
        }
        None => RunConfig::default(),
    };
    ov.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

pub struct Ctx {
    pub out: PathBuf,
    pub cfg: RunConfig,
    pub precision: Precision,
}

fn stage<T, E: Into<anyhow::Error>>(name: &str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| e.into().context(format!("stage {name}")))
}

pub fn gen_data(ctx: &Ctx) -> Result<PathBuf> {
    write_meta(&ctx.out, "gen-data", &ctx.cfg, ctx.precision.name())?;
    let path = ctx.out.join("dataset.csv");
    dispatch!(ctx.precision, gen_data_t(&ctx.cfg, &path))?;
    Ok(path)
}

fn gen_data_t<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<()> {
    let ds = stage("dataset", build_dataset::<T>(cfg))?;
    stage("write", write_dataset(&ds, path))
}

fn prior_kind_name(k: PriorKind) -> &'static str {
    match k {
        PriorKind::Unconditional => "unconditional",
        PriorKind::ActionConditioned => "action_conditioned",
        PriorKind::ReturnConditioned => "return_conditioned",
    }
}

pub fn parse_prior_kind(s: &str) -> Result<PriorKind> {
    match s {
        "unconditional" | "uncond" => Ok(PriorKind::Unconditional),
        "action_conditioned" | "action" | "cfg" => Ok(PriorKind::ActionConditioned),
        "return_conditioned" | "return" | "q" => Ok(PriorKind::ReturnConditioned),
        _ => bail!("unknown model kind `{s}` (unconditional, action, return)"),
    }
}

/// Model kind a variant samples from; Baseline has none and uses the
/// unconditional prior.
pub fn default_prior_kind(v: Variant) -> PriorKind {
    match v {
        Variant::CodaCfg => PriorKind::ActionConditioned,
        Variant::QCondAug => PriorKind::ReturnConditioned,
        _ => PriorKind::Unconditional,
    }
}

/// Trains a prior and saves `model.txt`, `normalizer.txt`, `prior.toml` and
/// `loss.csv` next to the dataset it was fitted on.
pub fn train_diffusion(ctx: &Ctx, kind: Option<PriorKind>) -> Result<()> {
    write_meta(&ctx.out, "train-diffusion", &ctx.cfg, ctx.precision.name())?;
    let kind = kind.unwrap_or_else(|| default_prior_kind(ctx.cfg.variant));
    dispatch!(ctx.precision, train_diffusion_t(&ctx.cfg, kind, &ctx.out))
}

fn train_diffusion_t<T: Scalar>(cfg: &RunConfig, kind: PriorKind, out: &Path) -> Result<()> {
    let ds = stage("dataset", build_dataset::<T>(cfg))?;
    stage("write", write_dataset(&ds, &out.join("dataset.csv")))?;
    let prior = stage("train-diffusion", train_prior(kind, &ds, &cfg.diffusion, cfg.q_target, cfg.diffusion_seed()))?;
    save_prior(&prior, out)
}

fn save_prior<T: Scalar>(prior: &TrainedPrior<T>, dir: &Path) -> Result<()> {
    stage("write", prior.model.save(&dir.join("model.txt")))?;
    stage("write", prior.normalizer.save(&dir.join("normalizer.txt")))?;
    stage("write", prior.curve.save(&dir.join("loss.csv")))?;
    let mut info = format!("kind = \"{}\"\n", prior_kind_name(prior.kind));
    if let Some(q) = prior.q_condition {
        writeln!(info, "q_condition = {}", fmt_exact(q)).unwrap();
    }
    fs::write(dir.join("prior.toml"), info)?;
    Ok(())
}

fn load_prior<T: Scalar>(dir: &Path) -> Result<TrainedPrior<T>> {
    let info: toml::Table = toml::from_str(&fs::read_to_string(dir.join("prior.toml")).context("reading prior.toml")?)?;
    let kind = parse_prior_kind(info.get("kind").and_then(|v| v.as_str()).context("prior.toml: missing kind")?)?;
    let q_condition = info.get("q_condition").and_then(|v| v.as_float()).map(T::c);
    Ok(TrainedPrior {
        kind,
        model: DenoiserModel::load(&dir.join("model.txt"))?,
        normalizer: CdfNormalizer::load(&dir.join("normalizer.txt"))?,
        curve: LossCurve { points: Vec::new() },
        q_condition,
    })
}

pub struct SampleArgs {
    pub model: Option<PathBuf>,
    pub n: Option<usize>,
    pub theta: Option<(f64, f64)>,
}

/// Draws one batch under the variant's conditioning toward `theta`
/// (default: the learner's initial policy) and writes `samples.csv`.
pub fn sample(ctx: &Ctx, args: &SampleArgs) -> Result<PathBuf> {
    write_meta(&ctx.out, "sample", &ctx.cfg, ctx.precision.name())?;
    let path = ctx.out.join("samples.csv");
    dispatch!(ctx.precision, sample_t(&ctx.cfg, args, &path))?;
    Ok(path)
}

fn sample_t<T: Scalar>(cfg: &RunConfig, args: &SampleArgs, path: &Path) -> Result<()> {
    let ds = stage("dataset", build_dataset::<T>(cfg))?;
    let kind = default_prior_kind(cfg.variant);
    let prior = match &args.model {
        Some(dir) => stage("load-model", load_prior::<T>(dir))?,
        None => stage("train-diffusion", train_prior(kind, &ds, &cfg.diffusion, cfg.q_target, cfg.diffusion_seed()))?,
    };
    if prior.kind != kind {
        bail!("stage load-model: variant {} needs the {} model, found {}", cfg.variant.name(), prior_kind_name(kind), prior_kind_name(prior.kind));
    }
    let theta = args.theta.unwrap_or(cfg.learner.init);
    let policy = JointPolicy::for_game(&ds.game, theta);
    let variant = if cfg.variant == Variant::Baseline { Variant::UncondAug } else { cfg.variant };
    let hook = coda::guidance::GuidanceHook { mode: variant_mode(variant), ..cfg.guidance };
    let n = args.n.unwrap_or(cfg.synth_batch);
    let seed = coda::rng::derive_seed(cfg.seed, "sample-cmd", 0);
    let x = stage("sample", generate(&prior, variant, &hook, &policy, &cfg.diffusion, &ds, n, seed))?;
    stage("write", write_matrix(path, &trajectory_header(&ds.layout), x.view()))
}

fn variant_mode(v: Variant) -> coda::guidance::GuidanceMode {
    use coda::guidance::GuidanceMode as M;
    match v {
        Variant::Baseline | Variant::UncondAug => M::None,
        Variant::QCondAug => M::QCond,
        Variant::CodaCfg => M::Cfg,
        Variant::CodaClassifier => M::Classifier,
    }
}

pub struct AnalyzeArgs {
    pub samples: Vec<PathBuf>,
    pub theta: Option<(f64, f64)>,
    pub reference: Option<PathBuf>,
}

/// With sample files: mean policy log-likelihood and moments per file, plus
/// distribution diagnostics against a reference file. Without: the
/// contraction battery and the game's BRUD field analysis on the config
/// dataset.
pub fn analyze(ctx: &Ctx, args: &AnalyzeArgs) -> Result<String> {
    write_meta(&ctx.out, "analyze", &ctx.cfg, ctx.precision.name())?;
    let report = if args.samples.is_empty() {
        analyze_dataset(&ctx.cfg)?
    } else {
        analyze_samples(&ctx.cfg, args)?
    };
    fs::write(ctx.out.join("report.csv"), &report)?;
    Ok(report)
}

fn analyze_samples(cfg: &RunConfig, args: &AnalyzeArgs) -> Result<String> {
    let game = stage("config", cfg.game.build::<f64>())?;
    let policy = JointPolicy::for_game(&game, args.theta.unwrap_or(cfg.learner.init));
    let layout = coda::trajectory::TrajectoryLayout::polynomial_game();
    let reference = match &args.reference {
        Some(p) => Some(stage("read", read_trajectories(p))?),
        None => None,
    };
    let mut out = String::from("file,rows,mean_policy_loglik,mean_ax,mean_ay,var_ax,var_ay,max_mean_gap,max_ks\n");
    for p in &args.samples {
        let m = stage("read", read_trajectories(p))?;
        if m.ncols() != layout.dim() {
            bail!("stage read: {} has {} columns, expected {}", p.display(), m.ncols(), layout.dim());
        }
        let ll = stage("analyze", mean_policy_loglik(m.view(), &layout, &policy, cfg.guidance.surrogate_std))?;
        let ix = layout.action_range(0, 0).start;
        let iy = layout.action_range(0, 1).start;
        let col = |j: usize| m.column(j).to_vec();
        let (mx, vx) = moments(&col(ix));
        let (my, vy) = moments(&col(iy));
        let (gap, ks) = match &reference {
            Some(r) => {
                let d = stage("analyze", distribution_diagnostics(m.view(), r.view()))?;
                (fmt_exact(d.max_mean_gap()), fmt_exact(d.max_ks()))
            }
            None => (String::new(), String::new()),
        };
        let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let parent = p.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        writeln!(out, "{parent}/{name},{},{},{},{},{},{},{gap},{ks}", m.nrows(), fmt_exact(ll), fmt_exact(mx), fmt_exact(my), fmt_exact(vx), fmt_exact(vy)).unwrap();
    }
    Ok(out)
}

/// Trajectory matrix from either a dataset file (recognized by its header
/// sidecar) or a sample file.
pub fn read_trajectories(path: &Path) -> Result<ndarray::Array2<f64>> {
    if coda::games::header_path(path).exists() {
        Ok(coda::games::read_dataset::<f64>(path)?.data)
    } else {
        read_matrix(path)
    }
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

fn analyze_dataset(cfg: &RunConfig) -> Result<String> {
    let ds: OfflineDataset<f64> = stage("dataset", build_dataset(cfg))?;
    let mut out = String::from("check,parameter,value,passed\n");
    for row in contraction_battery(&[-0.5, 0.0, 0.1, 0.5, 1.0, 1.5, 2.0, 2.5], 100, cfg.seed) {
        writeln!(out, "contraction,{},{},{}", fmt_exact(row.lambda), fmt_exact(row.max_law_error), row.passed()).unwrap();
    }
    if ds.game.kind == GameKind::Multiplication {
        let r = stage("analyze", constant_field_check(&ds, 100, cfg.seed))?;
        writeln!(out, "constant_field,points,{},{}", fmt_exact(r.max_deviation), r.max_deviation < 1e-12).unwrap();
    }
    if let Some((a, b, c)) = twin_peaks_params(&ds.game) {
        let r = stage("analyze", fixed_point_report(a, b, c, &ds, &cfg.learner))?;
        writeln!(out, "fixed_point,theta_x,{},{}", fmt_exact(r.gap.0), r.gap.0 < 1e-3).unwrap();
        writeln!(out, "fixed_point,theta_y,{},{}", fmt_exact(r.gap.1), r.gap.1 < 1e-3).unwrap();
    }
    Ok(out)
}

/// Runs one config and writes the run logs plus the dataset.
pub fn run_one(ctx: &Ctx) -> Result<RunLog> {
    write_meta(&ctx.out, "run", &ctx.cfg, ctx.precision.name())?;
    dispatch!(ctx.precision, run_one_t(&ctx.cfg, &ctx.out))
}

fn run_one_t<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<RunLog> {
    let ds = stage("dataset", build_dataset::<T>(cfg))?;
    stage("write", write_dataset(&ds, &out.join("dataset.csv")))?;
    let log = stage("run", run::<T>(cfg))?;
    stage("write", log.write(out))?;
    Ok(log)
}

/// Runs `seeds` consecutive seeds for each variant in parallel.
pub fn sweep_cmd(ctx: &Ctx, seeds: usize, variants: &[Variant]) -> Result<String> {
    write_meta(&ctx.out, "sweep", &ctx.cfg, ctx.precision.name())?;
    if seeds == 0 || variants.is_empty() {
        bail!("stage config: sweep needs at least one seed and one variant");
    }
    let configs: Vec<RunConfig> = variants
        .iter()
        .flat_map(|&v| (0..seeds as u64).map(move |s| (v, s)))
        .map(|(v, s)| RunConfig { variant: v, seed: ctx.cfg.seed + s, ..ctx.cfg.clone() })
        .collect();
    let res = stage("sweep", dispatch!(ctx.precision, sweep(&configs)))?;
    let mut failures = String::new();
    for (c, r) in configs.iter().zip(&res.runs) {
        let dir = ctx.out.join("runs").join(format!("{}_s{}", c.variant.name(), c.seed));
        match r {
            Ok(log) => stage("write", log.write(&dir))?,
            Err(e) => writeln!(failures, "{} seed {}: {e}", c.variant.name(), c.seed).unwrap(),
        }
    }
    let table = res.table_text();
    fs::write(ctx.out.join("table.csv"), &table)?;
    fs::write(ctx.out.join("failures.txt"), failures)?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Multiplication,
    TwinPeaks,
}

impl Figure {
    fn command(self) -> &'static str {
        match self {
            Figure::Multiplication => "repro-fig1",
            Figure::TwinPeaks => "repro-fig2",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Figure::Multiplication => "Multiplication game",
            Figure::TwinPeaks => "Twin Peaks game (A=1, B=4, C=5)",
        }
    }

    pub fn preset(self, v: Variant, seed: u64) -> RunConfig {
        match self {
            Figure::Multiplication => RunConfig::multiplication(v, seed),
            Figure::TwinPeaks => RunConfig::twin_peaks(v, seed),
        }
    }
}

pub struct FigureRun {
    pub label: &'static str,
    pub log: RunLog,
}

/// The four plotted variants; `coda` selects which CODA route is drawn.
pub fn figure_variants(coda: Variant) -> [(&'static str, Variant); 4] {
    [("Baseline", Variant::Baseline), ("UncondAug", Variant::UncondAug), ("QCondAug", Variant::QCondAug), ("CODA", coda)]
}

/// Trains and runs the four variants on one figure's game, writing the
/// dataset, policy paths, return curves, per-run logs and three SVG panels.
/// `template` (from `--config`) replaces the figure preset except for the
/// variant; `seed`, `lambda` and `alpha` overrides apply either way.
pub fn repro(out: &Path, fig: Figure, template: Option<&RunConfig>, ov: &Overrides, coda: Variant, precision: Precision) -> Result<Vec<FigureRun>> {
    if !matches!(coda, Variant::CodaCfg | Variant::CodaClassifier) {
        bail!("stage config: the CODA path must use coda_cfg or coda_classifier, got {}", coda.name());
    }
    let variants = figure_variants(coda);
    let configs: Vec<RunConfig> = variants
        .iter()
        .map(|&(_, v)| {
            let mut c = match template {
                Some(t) => RunConfig { variant: v, ..t.clone() },
                None => fig.preset(v, 0),
            };
            ov.apply(&mut c);
            c.variant = v;
            c
        })
        .collect();
    for c in &configs {
        stage("config", c.validate())?;
    }
    write_meta(out, fig.command(), &configs[3], precision.name())?;
    let start = Instant::now();
    dispatch!(precision, write_figure_dataset(&configs[0], out))?;
    let res = stage("run", dispatch!(precision, sweep(&configs)))?;
    let mut runs = Vec::new();
    for ((label, v), r) in variants.iter().zip(res.runs) {
        let log = r.map_err(|e| anyhow!("stage run ({}): {e}", v.name()))?;
        stage("write", log.write(&out.join("runs").join(v.name())))?;
        runs.push(FigureRun { label, log });
    }
    write_figure_tables(out, &runs)?;
    write_figure_panels(out, fig, &runs)?;
    fs::write(out.join("timing.txt"), format!("wall_clock_s = {:.3}\n", start.elapsed().as_secs_f64()))?;
    Ok(runs)
}

fn write_figure_dataset<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = stage("dataset", build_dataset::<T>(cfg))?;
    stage("write", write_dataset(&ds, &out.join("dataset.csv")))
}

fn write_figure_tables(out: &Path, runs: &[FigureRun]) -> Result<()> {
    let mut paths = String::from("variant,step,theta_x,theta_y,return\n");
    let mut summary = String::from("variant,final_theta_x,final_theta_y,final_return,converged_theta_x,converged_theta_y,converged_return\n");
    for r in runs {
        for s in &r.log.steps {
            writeln!(paths, "{},{},{},{},{}", r.label, s.step, fmt_exact(s.theta_x), fmt_exact(s.theta_y), fmt_exact(s.ret)).unwrap();
        }
        let l = &r.log;
        writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            r.label,
            fmt_exact(l.final_theta.0),
            fmt_exact(l.final_theta.1),
            fmt_exact(l.final_return),
            fmt_exact(l.converged_theta.0),
            fmt_exact(l.converged_theta.1),
            fmt_exact(l.converged_return)
        )
        .unwrap();
    }
    fs::write(out.join("paths.csv"), paths)?;
    fs::write(out.join("summary.csv"), summary)?;
    Ok(())
}

fn write_figure_panels(out: &Path, fig: Figure, runs: &[FigureRun]) -> Result<()> {
    let data = read_matrix::<f64>(&out.join("dataset.csv"))?;
    let pts: Vec<(f64, f64)> = data.rows().into_iter().map(|r| (r[0], r[1])).collect();
    let square = Bounds { x: (-1.05, 1.05), y: (-1.05, 1.05) };
    fs::write(out.join("dataset.svg"), svg::scatter(&pts, square, &format!("{}: offline dataset", fig.title()), "a^x", "a^y"))?;

    let paths: Vec<(String, Vec<(f64, f64)>)> =
        runs.iter().map(|r| (r.label.to_string(), r.log.steps.iter().map(|s| (s.theta_x, s.theta_y)).collect())).collect();
    fs::write(out.join("paths.svg"), svg::lines(&paths, square, "Policy evolution", "theta^x", "theta^y", true))?;

    let returns: Vec<(String, Vec<(f64, f64)>)> =
        runs.iter().map(|r| (r.label.to_string(), r.log.steps.iter().map(|s| (s.step as f64, s.ret)).collect())).collect();
    let b = Bounds::fit(returns.iter().flat_map(|(_, p)| p.iter()));
    fs::write(out.join("returns.svg"), svg::lines(&returns, b, "Return during training", "policy step", "return", false))?;
    Ok(())
}
