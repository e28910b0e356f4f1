//! Training loop that interleaves policy-conditioned generation with BRUD
//! updates, for the baseline and every augmentation variant.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::mean_policy_loglik;
use crate::diffusion::{
    estimate_sigma_data, heun_sample, train, CfgDenoiser, Churn, DenoiserConfig, DenoiserModel, LossCurve, ModelDenoiser,
    NoGuide, NoiseSchedule, SamplerConfig, TrainConfig, TrainNoiseLaw,
};
use crate::error::{Error, Result};
use crate::games::{gen_dataset_with, DatasetLaw, GameSpec, JointAction, OfflineDataset};
use crate::guidance::{cfg_condition_labels, q_condition_labels, GuidanceHook, GuidanceMode, PolicyGuide, QTarget};
use crate::marl::{log_to_text, tail_mean_theta, train_brud, BrudLearner, JointPolicy, LearnerConfig, StepRecord};
use crate::rng;
use crate::scalar::Scalar;
use crate::transforms::CdfNormalizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    UncondAug,
    QCondAug,
    CodaCfg,
    CodaClassifier,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Baseline, Variant::UncondAug, Variant::QCondAug, Variant::CodaCfg, Variant::CodaClassifier];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::UncondAug => "uncond_aug",
            Variant::QCondAug => "q_cond_aug",
            Variant::CodaCfg => "coda_cfg",
            Variant::CodaClassifier => "coda_classifier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm || v.name().replace('_', "") == norm.replace('_', ""))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }

    /// Synthetic pool is generated once and reused every epoch.
    pub fn is_static(self) -> bool {
        matches!(self, Variant::UncondAug | Variant::QCondAug)
    }

    fn prior_kind(self) -> Option<PriorKind> {
        match self {
            Variant::Baseline => None,
            Variant::UncondAug | Variant::CodaClassifier => Some(PriorKind::Unconditional),
            Variant::CodaCfg => Some(PriorKind::ActionConditioned),
            Variant::QCondAug => Some(PriorKind::ReturnConditioned),
        }
    }

    fn guidance_mode(self) -> GuidanceMode {
        match self {
            Variant::Baseline | Variant::UncondAug => GuidanceMode::None,
            Variant::QCondAug => GuidanceMode::QCond,
            Variant::CodaCfg => GuidanceMode::Cfg,
            Variant::CodaClassifier => GuidanceMode::Classifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GameConfig {
    Multiplication,
    TwinPeaks { a: f64, b: f64, c: f64 },
    Custom { terms: Vec<(u32, u32, f64)>, low: f64, high: f64 },
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig::Multiplication
    }
}

impl GameConfig {
    pub fn build<T: Scalar>(&self) -> Result<GameSpec<T>> {
        match self {
            GameConfig::Multiplication => Ok(GameSpec::multiplication()),
            GameConfig::TwinPeaks { a, b, c } => GameSpec::twin_peaks(T::c(*a), T::c(*b), T::c(*c)),
            GameConfig::Custom { terms, low, high } => {
                let map: BTreeMap<(u32, u32), T> = terms.iter().map(|&(i, j, c)| ((i, j), T::c(c))).collect();
                GameSpec::custom(map, T::c(*low), T::c(*high))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub law: DatasetLaw,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n: 4000, law: DatasetLaw::Uniform, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub hidden: Vec<usize>,
    pub noise_emb_dim: usize,
    pub cond_emb_dim: usize,
    pub train: TrainConfig,
    pub mu_log: f64,
    pub sigma_log: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
    pub churn: Churn,
    pub shards: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            hidden: vec![64, 64],
            noise_emb_dim: 32,
            cond_emb_dim: 32,
            train: TrainConfig::default(),
            mu_log: -1.2,
            sigma_log: 1.2,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            steps: 40,
            churn: Churn::default(),
            shards: 1,
            seed: None,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule<T: Scalar>(&self) -> NoiseSchedule<T> {
        NoiseSchedule { sigma_min: T::c(self.sigma_min), sigma_max: T::c(self.sigma_max), rho: T::c(self.rho), steps: self.steps }
    }

    pub fn noise_law<T: Scalar>(&self) -> TrainNoiseLaw<T> {
        TrainNoiseLaw {
            mu_log: T::c(self.mu_log),
            sigma_log: T::c(self.sigma_log),
            clamp_min: T::c(self.sigma_min),
            clamp_max: T::c(self.sigma_max),
        }
    }

    pub fn sampler<T: Scalar>(&self) -> SamplerConfig<T> {
        SamplerConfig { schedule: self.schedule(), churn: self.churn, shards: self.shards }
    }

    fn network(&self, dim: usize, cond_dim: usize) -> DenoiserConfig {
        DenoiserConfig { dim, cond_dim, hidden: self.hidden.clone(), noise_emb_dim: self.noise_emb_dim, cond_emb_dim: self.cond_emb_dim }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub policy_steps: usize,
    pub synth_batch: usize,
    pub alpha: f64,
    /// Epochs between generation rounds for on-policy variants.
    pub gen_every: usize,
    /// Trailing steps averaged into the converged policy.
    pub converge_window: usize,
    /// Also sample an unguided batch each round and log its likelihood.
    pub compare_uncond: bool,
    pub q_target: QTarget,
    pub game: GameConfig,
    pub dataset: DatasetConfig,
    pub learner: LearnerConfig,
    pub guidance: GuidanceHook,
    pub diffusion: DiffusionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Baseline,
            seed: 0,
            epochs: 30,
            policy_steps: 10,
            synth_batch: 1000,
            alpha: 1.0,
            gen_every: 1,
            converge_window: 1,
            compare_uncond: false,
            q_target: QTarget::MaxReturn,
            game: GameConfig::Multiplication,
            dataset: DatasetConfig::default(),
            learner: LearnerConfig::default(),
            guidance: GuidanceHook::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

fn nested(prefix: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) | Error::Domain(m) => config_err(prefix, m),
        other => other,
    }
}

impl RunConfig {
    /// Multiplication-game experiment defaults.
    pub fn multiplication(variant: Variant, seed: u64) -> Self {
        RunConfig { variant, seed, ..RunConfig::default() }
    }

    /// Twin Peaks (A = 1, B = 4, C = 5) defaults on origin-centered data.
    /// Two policy steps per round keep on-policy generation ahead of the
    /// best-response flip across the saddle. Every variant gets the same
    /// 800-step budget; the converged policy averages a 700-step tail.
    pub fn twin_peaks(variant: Variant, seed: u64) -> Self {
        RunConfig {
            variant,
            seed,
            epochs: 400,
            policy_steps: 2,
            converge_window: 700,
            game: GameConfig::TwinPeaks { a: 1.0, b: 4.0, c: 5.0 },
            dataset: DatasetConfig { law: DatasetLaw::CenteredUniform, ..DatasetConfig::default() },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs", "must be at least 1"));
        }
        if self.gen_every == 0 {
            return Err(config_err("gen_every", "must be at least 1"));
        }
        if self.variant != Variant::Baseline && self.synth_batch == 0 {
            return Err(config_err("synth_batch", "augmenting variants need at least one synthetic sample"));
        }
        if self.dataset.n == 0 {
            return Err(config_err("dataset.n", "must be at least 1"));
        }
        if self.guidance.mode != GuidanceMode::None && self.guidance.mode != self.variant.guidance_mode() {
            return Err(config_err(
                "guidance.mode",
                format!("{:?} conflicts with variant {}", self.guidance.mode, self.variant.name()),
            ));
        }
        if let Err(e) = self.q_target.validate() {
            return Err(config_err("q_target.q", e.to_string()));
        }
        self.learner.validate().map_err(|e| nested("learner", e))?;
        self.guidance.validate().map_err(|e| nested("guidance", e))?;
        self.diffusion.train.validate().map_err(|e| nested("diffusion.train", e))?;
        self.diffusion.schedule::<f64>().validate().map_err(|e| nested("diffusion", e))?;
        if self.diffusion.hidden.is_empty() || self.diffusion.hidden.contains(&0) {
            return Err(config_err("diffusion.hidden", "needs at least one non-zero width"));
        }
        self.game.build::<f64>().map_err(|e| nested("game", e))?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_default();
            config_err(&path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Hex SHA-256 prefix of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())[..16].to_string()
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    pub fn diffusion_seed(&self) -> u64 {
        self.diffusion.seed.unwrap_or(self.seed)
    }

    /// Total BRUD updates.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.policy_steps
    }

    fn hook(&self) -> GuidanceHook {
        GuidanceHook { mode: self.variant.guidance_mode(), ..self.guidance }
    }
}

impl QTarget {
    pub fn validate(&self) -> Result<()> {
        match self {
            QTarget::Quantile { q } if !(0.0..=1.0).contains(q) => Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]"))),
            _ => Ok(()),
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PriorKind {
    Unconditional,
    ActionConditioned,
    ReturnConditioned,
}

/// A denoiser fitted to one offline dataset with its normalizer.
#[derive(Debug, Clone)]
pub struct TrainedPrior<T> {
    pub kind: PriorKind,
    pub model: DenoiserModel<T>,
    pub normalizer: CdfNormalizer<T>,
    pub curve: LossCurve,
    /// Sampling condition for return-conditioned priors.
    pub q_condition: Option<T>,
}

/// Fits the prior of `kind` to `ds` in diffusion space.
pub fn train_prior<T: Scalar>(kind: PriorKind, ds: &OfflineDataset<T>, cfg: &DiffusionConfig, q_target: QTarget, seed: u64) -> Result<TrainedPrior<T>> {
    let normalizer = CdfNormalizer::fit(ds.data.view())?;
    let z = normalizer.forward_matrix(ds.data.view())?;
    let sigma_data = estimate_sigma_data(z.view());
    let (labels, q_condition) = match kind {
        PriorKind::Unconditional => (None, None),
        PriorKind::ActionConditioned => (Some(cfg_condition_labels(ds)), None),
        PriorKind::ReturnConditioned => {
            let (l, c) = q_condition_labels(ds, q_target)?;
            (Some(l), Some(c))
        }
    };
    let cond_dim = labels.as_ref().map_or(0, |l| l.ncols());
    let mut model = DenoiserModel::new(cfg.network(z.ncols(), cond_dim), sigma_data, seed)?;
    if let Some(l) = &labels {
        model.set_cond_standardization(l.view())?;
    }
    let curve = train(&mut model, z.view(), labels.as_ref().map(|l| l.view()), &cfg.noise_law(), &cfg.train, seed)?;
    Ok(TrainedPrior { kind, model, normalizer, curve, q_condition })
}

/// Shares trained priors between runs that use the same data and settings.
pub struct PriorCache<T> {
    slots: Mutex<HashMap<String, Arc<Mutex<Option<Arc<TrainedPrior<T>>>>>>>,
}

impl<T> Default for PriorCache<T> {
    fn default() -> Self {
        PriorCache { slots: Mutex::new(HashMap::new()) }
    }
}

impl<T: Scalar> PriorCache<T> {
    pub fn get_or_train(&self, cfg: &RunConfig, kind: PriorKind, ds: &OfflineDataset<T>) -> Result<Arc<TrainedPrior<T>>> {
        let key = prior_key(cfg, kind);
        let slot = self.slots.lock().expect("cache lock").entry(key).or_default().clone();
        let mut guard = slot.lock().expect("slot lock");
        if let Some(p) = guard.as_ref() {
            return Ok(p.clone());
        }
        let prior = Arc::new(train_prior(kind, ds, &cfg.diffusion, cfg.q_target, cfg.diffusion_seed())?);
        *guard = Some(prior.clone());
        Ok(prior)
    }

    pub fn len(&self) -> usize {
        self.slots.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn prior_key(cfg: &RunConfig, kind: PriorKind) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        game: &'a GameConfig,
        dataset: &'a DatasetConfig,
        dataset_seed: u64,
        diffusion: &'a DiffusionConfig,
        diffusion_seed: u64,
        q_target: Option<QTarget>,
    }
    let key = Key {
        game: &cfg.game,
        dataset: &cfg.dataset,
        dataset_seed: cfg.dataset_seed(),
        diffusion: &cfg.diffusion,
        diffusion_seed: cfg.diffusion_seed(),
        q_target: (kind == PriorKind::ReturnConditioned).then_some(cfg.q_target),
    };
    format!("{kind:?}:{}", hex_digest(toml::to_string(&key).expect("key serializes").as_bytes()))
}

/// Draws `n` trajectories for `variant` and maps them back to data space,
/// clipping actions into the box.
pub fn generate<T: Scalar>(
    prior: &TrainedPrior<T>,
    variant: Variant,
    hook: &GuidanceHook,
    policy: &JointPolicy<T>,
    cfg: &DiffusionConfig,
    ds: &OfflineDataset<T>,
    n: usize,
    seed: u64,
) -> Result<Array2<T>> {
    let sampler = cfg.sampler::<T>();
    let w = T::c(hook.w);
    let z = match variant {
        Variant::Baseline => return Err(Error::InvalidArgument("baseline does not generate".into())),
        Variant::UncondAug => heun_sample(&ModelDenoiser { model: &prior.model, cond: None }, &sampler, &NoGuide, n, seed)?,
        Variant::CodaClassifier => {
            let guide = PolicyGuide { policy: *policy, hook: *hook, layout: ds.layout, denorm: &prior.normalizer };
            heun_sample(&ModelDenoiser { model: &prior.model, cond: None }, &sampler, &guide, n, seed)?
        }
        Variant::CodaCfg => {
            let d = CfgDenoiser { model: &prior.model, cond: policy.means().to_vec(), w };
            heun_sample(&d, &sampler, &NoGuide, n, seed)?
        }
        Variant::QCondAug => {
            let q = prior.q_condition.ok_or_else(|| Error::InvalidArgument("prior has no return condition".into()))?;
            heun_sample(&CfgDenoiser { model: &prior.model, cond: vec![q], w }, &sampler, &NoGuide, n, seed)?
        }
    };
    let mut x = prior.normalizer.inverse_matrix(z.view())?;
    for j in ds.layout.action_indices() {
        x.column_mut(j).mapv_inplace(|v| ds.game.clip(v));
    }
    Ok(x)
}

/// Unguided batch from the same prior, used as the likelihood reference.
fn generate_reference<T: Scalar>(prior: &TrainedPrior<T>, cfg: &DiffusionConfig, ds: &OfflineDataset<T>, n: usize, seed: u64) -> Result<Array2<T>> {
    let z = heun_sample(&ModelDenoiser { model: &prior.model, cond: None }, &cfg.sampler::<T>(), &NoGuide, n, seed)?;
    let mut x = prior.normalizer.inverse_matrix(z.view())?;
    for j in ds.layout.action_indices() {
        x.column_mut(j).mapv_inplace(|v| ds.game.clip(v));
    }
    Ok(x)
}

fn batch_actions<T: Scalar>(ds: &OfflineDataset<T>, x: ArrayView2<T>) -> Vec<JointAction<T>> {
    let ix = ds.layout.action_range(0, 0).start;
    let iy = ds.layout.action_range(0, 1).start;
    x.rows().into_iter().map(|r| JointAction::new(r[ix], r[iy])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthStats {
    pub loglik: f64,
    pub uncond_loglik: Option<f64>,
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    /// SHA-256 of the training pool's actions.
    pub pool_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub theta_x: f64,
    pub theta_y: f64,
    pub ret: f64,
    pub synth: Option<SynthStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<StepRecord<f64>>,
    pub epochs: Vec<EpochRecord>,
    pub final_theta: (f64, f64),
    pub final_return: f64,
    pub converged_theta: (f64, f64),
    pub converged_return: f64,
    pub loss_curve: Option<LossCurve>,
    pub wall_clock_s: f64,
}

impl RunLog {
    /// Equality of everything except timing.
    pub fn same_data(&self, other: &RunLog) -> bool {
        RunLog { wall_clock_s: 0.0, ..self.clone() } == RunLog { wall_clock_s: 0.0, ..other.clone() }
    }

    pub fn steps_text(&self) -> String {
        log_to_text(&self.steps)
    }

    pub fn epochs_text(&self) -> String {
        let mut out = String::from("epoch,theta_x,theta_y,return,synth_loglik,uncond_loglik,synth_mean_x,synth_mean_y,synth_var_x,synth_var_y,pool_digest\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.16e}"));
        for e in &self.epochs {
            let s = e.synth.as_ref();
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{},{},{},{},{},{},{}",
                e.epoch,
                e.theta_x,
                e.theta_y,
                e.ret,
                opt(s.map(|s| s.loglik)),
                opt(s.and_then(|s| s.uncond_loglik)),
                opt(s.map(|s| s.mean_x)),
                opt(s.map(|s| s.mean_y)),
                opt(s.map(|s| s.var_x)),
                opt(s.map(|s| s.var_y)),
                s.map_or("", |s| s.pool_digest.as_str()),
            )
            .unwrap();
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "variant = \"{}\"", self.variant.name()).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "config_hash = \"{}\"", self.config_hash).unwrap();
        writeln!(out, "final_theta_x = {:.16e}", self.final_theta.0).unwrap();
        writeln!(out, "final_theta_y = {:.16e}", self.final_theta.1).unwrap();
        writeln!(out, "final_return = {:.16e}", self.final_return).unwrap();
        writeln!(out, "converged_theta_x = {:.16e}", self.converged_theta.0).unwrap();
        writeln!(out, "converged_theta_y = {:.16e}", self.converged_theta.1).unwrap();
        writeln!(out, "converged_return = {:.16e}", self.converged_return).unwrap();
        out
    }

    /// Writes `steps.csv`, `epochs.csv`, `summary.toml` and, when a prior was
    /// trained, `loss.csv`. Timing goes to `timing.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("steps.csv"), self.steps_text())?;
        fs::write(dir.join("epochs.csv"), self.epochs_text())?;
        fs::write(dir.join("summary.toml"), self.summary_text())?;
        if let Some(c) = &self.loss_curve {
            c.save(&dir.join("loss.csv"))?;
        }
        fs::write(dir.join("timing.txt"), format!("wall_clock_s = {:.3}\n", self.wall_clock_s))?;
        Ok(())
    }
}

fn widen<T: Scalar>(r: &StepRecord<T>) -> StepRecord<f64> {
    StepRecord {
        step: r.step,
        theta_x: r.theta_x.f64(),
        theta_y: r.theta_y.f64(),
        ret: r.ret.f64(),
        grad_x: r.grad_x.f64(),
        grad_y: r.grad_y.f64(),
    }
}

/// Offline dataset described by the config.
pub fn build_dataset<T: Scalar>(cfg: &RunConfig) -> Result<OfflineDataset<T>> {
    let game = cfg.game.build::<T>()?;
    gen_dataset_with(&game, cfg.dataset.n, cfg.dataset.law, cfg.dataset_seed())
}

pub fn run<T: Scalar>(cfg: &RunConfig) -> Result<RunLog> {
    run_with_cache::<T>(cfg, &PriorCache::default())
}

pub fn run_with_cache<T: Scalar>(cfg: &RunConfig, cache: &PriorCache<T>) -> Result<RunLog> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = build_dataset::<T>(cfg)?;
    let game = ds.game.clone();
    let offline = ds.actions();
    let learner_cfg = LearnerConfig { steps: cfg.total_steps(), ..cfg.learner.clone() };

    let (steps, epochs, loss_curve) = if cfg.variant == Variant::Baseline {
        let log = train_brud(&game, &offline, &learner_cfg, cfg.seed)?;
        let epochs = (0..cfg.epochs)
            .map(|e| {
                let r = &log[(e + 1) * cfg.policy_steps];
                EpochRecord { epoch: e, theta_x: r.theta_x.f64(), theta_y: r.theta_y.f64(), ret: r.ret.f64(), synth: None }
            })
            .collect();
        (log, epochs, None)
    } else {
        let kind = cfg.variant.prior_kind().expect("augmenting variant has a prior");
        let prior = cache.get_or_train(cfg, kind, &ds).map_err(|e| Error::RunAborted { epoch: 0, reason: e.to_string() })?;
        let hook = cfg.hook();
        let mut learner = BrudLearner::new(game.clone(), learner_cfg)?;
        let mut brud_rng = rng::stream(cfg.seed, "brud", 0);
        let n_syn = (cfg.alpha * cfg.synth_batch as f64).round() as usize;
        let n_off = cfg.synth_batch - n_syn;
        let mut pool: Option<(Vec<JointAction<T>>, SynthStats)> = None;
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for e in 0..cfg.epochs {
            let regenerate = pool.is_none() || (!cfg.variant.is_static() && e % cfg.gen_every == 0);
            let abort = |err: Error| Error::RunAborted { epoch: e, reason: err.to_string() };
            if regenerate {
                let gen_seed = rng::derive_seed(cfg.seed, "gen", e as u64);
                let x = generate(&prior, cfg.variant, &hook, &learner.policy, &cfg.diffusion, &ds, n_syn.max(1), gen_seed).map_err(abort)?;
                let synth = batch_actions(&ds, x.view());
                let mut actions: Vec<JointAction<T>> = synth[..n_syn].to_vec();
                let mut mix = rng::stream(cfg.seed, "mix", e as u64);
                actions.extend((0..n_off).map(|_| offline[mix.random_range(0..offline.len())]));
                let std = cfg.guidance.surrogate_std;
                let loglik = mean_policy_loglik(x.view(), &ds.layout, &learner.policy, std)?;
                let uncond_loglik = if cfg.compare_uncond {
                    let r = generate_reference(&prior, &cfg.diffusion, &ds, n_syn.max(1), gen_seed).map_err(abort)?;
                    Some(mean_policy_loglik(r.view(), &ds.layout, &learner.policy, std)?)
                } else {
                    None
                };
                let stats = crate::games::ActionStats::fit(&synth);
                let mut bytes = Vec::with_capacity(actions.len() * 16);
                for a in &actions {
                    bytes.extend(a.ax.f64().to_le_bytes());
                    bytes.extend(a.ay.f64().to_le_bytes());
                }
                let synth_stats = SynthStats {
                    loglik,
                    uncond_loglik,
                    mean_x: stats.mean_x.f64(),
                    mean_y: stats.mean_y.f64(),
                    var_x: stats.var_x.f64(),
                    var_y: stats.var_y.f64(),
                    pool_digest: hex_digest(&bytes),
                };
                pool = Some((actions, synth_stats));
            }
            let (actions, stats) = pool.as_ref().expect("pool built");
            learner.run(actions, cfg.policy_steps, &mut brud_rng).map_err(abort)?;
            let p = learner.policy;
            if !p.theta_x.is_finite() || !p.theta_y.is_finite() {
                return Err(abort(Error::Numeric("policy parameters".into())));
            }
            epochs.push(EpochRecord {
                epoch: e,
                theta_x: p.theta_x.f64(),
                theta_y: p.theta_y.f64(),
                ret: learner.log.last().expect("logged").ret.f64(),
                synth: Some(stats.clone()),
            });
        }
        (learner.log, epochs, Some(prior.curve.clone()))
    };

    let last = steps.last().expect("log has the initial record");
    let (cx, cy) = tail_mean_theta(&steps, cfg.converge_window);
    let converged_return = game.reward(JointAction::new(cx, cy))?.f64();
    Ok(RunLog {
        variant: cfg.variant,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        final_theta: (last.theta_x.f64(), last.theta_y.f64()),
        final_return: last.ret.f64(),
        converged_theta: (cx.f64(), cy.f64()),
        converged_return,
        steps: steps.iter().map(widen).collect(),
        epochs,
        loss_curve,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub variant: Variant,
    pub runs: usize,
    pub failures: usize,
    pub mean_return: f64,
    pub stderr_return: f64,
}

#[derive(Debug)]
pub struct SweepResult {
    pub runs: Vec<std::result::Result<RunLog, String>>,
    pub summaries: Vec<SweepSummary>,
}

impl SweepResult {
    pub fn table_text(&self) -> String {
        let mut out = String::from("variant,runs,failures,mean_final_return,stderr_final_return\n");
        for s in &self.summaries {
            writeln!(out, "{},{},{},{:.16e},{:.16e}", s.variant.name(), s.runs, s.failures, s.mean_return, s.stderr_return).unwrap();
        }
        out
    }
}

/// Runs every config (in parallel) and aggregates final returns per variant.
/// Failed runs are recorded and excluded from the statistics.
pub fn sweep<T: Scalar>(configs: &[RunConfig]) -> Result<SweepResult> {
    sweep_with_cache(configs, &PriorCache::<T>::default())
}

pub fn sweep_with_cache<T: Scalar>(configs: &[RunConfig], cache: &PriorCache<T>) -> Result<SweepResult> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one config".into()));
    }
    let runs: Vec<_> = configs.par_iter().map(|c| run_with_cache::<T>(c, cache).map_err(|e| e.to_string())).collect();
    let mut order: Vec<Variant> = Vec::new();
    for c in configs {
        if !order.contains(&c.variant) {
            order.push(c.variant);
        }
    }
    let summaries = order
        .into_iter()
        .map(|v| {
            let mine: Vec<_> = configs.iter().zip(&runs).filter(|(c, _)| c.variant == v).map(|(_, r)| r).collect();
            let returns: Vec<f64> = mine.iter().filter_map(|r| r.as_ref().ok().map(|l| l.final_return)).collect();
            let n = returns.len();
            let mean = if n > 0 { returns.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let stderr = if n > 1 {
                (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            SweepSummary { variant: v, runs: mine.len(), failures: mine.len() - n, mean_return: mean, stderr_return: stderr }
        })
        .collect();
    Ok(SweepResult { runs, summaries })
}
