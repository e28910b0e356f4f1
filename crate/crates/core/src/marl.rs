//! Stateless deterministic two-agent learners with BRUD updates.
//!
//! Each agent's gradient is taken at its own current action while the
//! teammate's action comes from the data. There is no critic: the reward
//! gradient is known in closed form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::games::{GameSpec, JointAction};
use crate::rng;
use crate::scalar::Scalar;

/// Per-agent action parameters, always inside the action box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointPolicy<T> {
    pub theta_x: T,
    pub theta_y: T,
    pub low: T,
    pub high: T,
}

impl<T: Scalar> JointPolicy<T> {
    pub fn new(theta_x: T, theta_y: T, low: T, high: T) -> Self {
        let clip = |v: T| v.max(low).min(high);
        JointPolicy { theta_x: clip(theta_x), theta_y: clip(theta_y), low, high }
    }

    pub fn for_game(game: &GameSpec<T>, theta: (f64, f64)) -> Self {
        Self::new(T::c(theta.0), T::c(theta.1), game.action_low, game.action_high)
    }

    /// Action of `agent`; the observation is ignored by stateless agents.
    pub fn act(&self, agent: usize, _obs: &[T]) -> T {
        if agent == 0 {
            self.theta_x
        } else {
            self.theta_y
        }
    }

    pub fn means(&self) -> [T; 2] {
        [self.theta_x, self.theta_y]
    }

    pub fn joint_action(&self) -> JointAction<T> {
        JointAction::new(self.theta_x, self.theta_y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub lr: f64,
    pub grad_clip: f64,
    pub batch: usize,
    /// Use every source sample each step instead of drawing `batch`.
    pub full_batch: bool,
    pub init: (f64, f64),
    /// Batches drawn and discarded before the first update.
    pub burn_in: usize,
    pub steps: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig { lr: 0.1, grad_clip: 1.0, batch: 64, full_batch: false, init: (-0.64, 0.65), burn_in: 2, steps: 300 }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidArgument("grad_clip must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// BRUD gradient: x-component averages `dR/dax` at `(theta_x, ay_i)`, and
/// symmetrically for y.
pub fn brud_gradient<T: Scalar>(game: &GameSpec<T>, batch: &[JointAction<T>], policy: &JointPolicy<T>) -> Result<(T, T)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("BRUD gradient needs a non-empty batch".into()));
    }
    let mut gx = T::zero();
    let mut gy = T::zero();
    for a in batch {
        gx += game.reward_grad(JointAction::new(policy.theta_x, a.ay))?.0;
        gy += game.reward_grad(JointAction::new(a.ax, policy.theta_y))?.1;
    }
    let n = T::from_usize_lossy(batch.len());
    Ok((gx / n, gy / n))
}

/// Raw moments `E[a^k]`, `k = 0..=degree`, of each agent's actions.
pub fn action_moments<T: Scalar>(batch: &[JointAction<T>], degree: u32) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize_lossy(batch.len().max(1));
    let moments = |f: &dyn Fn(&JointAction<T>) -> T| -> Vec<T> {
        (0..=degree).map(|k| batch.iter().map(|a| f(a).powi(k as i32)).sum::<T>() / n).collect()
    };
    (moments(&|a| a.ax), moments(&|a| a.ay))
}

/// Full-batch BRUD gradient written with teammate moments in place of samples:
/// `dJ/dtheta_x = sum c_ij i theta_x^(i-1) E[ay^j]`.
pub fn moment_gradient<T: Scalar>(game: &GameSpec<T>, mx: &[T], my: &[T], policy: &JointPolicy<T>) -> Result<(T, T)> {
    let need = game.max_degree() as usize + 1;
    if mx.len() < need || my.len() < need {
        return Err(Error::Shape { expected: need, got: mx.len().min(my.len()) });
    }
    let mut gx = T::zero();
    let mut gy = T::zero();
    for (&(i, j), &c) in &game.coefficients {
        if i > 0 {
            gx += c * T::from_usize_lossy(i as usize) * policy.theta_x.powi(i as i32 - 1) * my[j as usize];
        }
        if j > 0 {
            gy += c * T::from_usize_lossy(j as usize) * policy.theta_y.powi(j as i32 - 1) * mx[i as usize];
        }
    }
    Ok((gx, gy))
}

/// Ascent step with norm clipping, then bound clipping.
pub fn update<T: Scalar>(policy: &JointPolicy<T>, grad: (T, T), cfg: &LearnerConfig) -> Result<JointPolicy<T>> {
    if !grad.0.is_finite() || !grad.1.is_finite() {
        return Err(Error::Numeric(format!("policy gradient ({}, {})", grad.0, grad.1)));
    }
    let (gx, gy) = clip_norm(grad, T::c(cfg.grad_clip));
    let lr = T::c(cfg.lr);
    Ok(JointPolicy::new(policy.theta_x + lr * gx, policy.theta_y + lr * gy, policy.low, policy.high))
}

fn clip_norm<T: Scalar>(g: (T, T), max: T) -> (T, T) {
    let norm = (g.0 * g.0 + g.1 * g.1).sqrt();
    if norm > max {
        (g.0 * max / norm, g.1 * max / norm)
    } else {
        g
    }
}

/// Deterministic test return `R(theta_x, theta_y)`.
pub fn evaluate<T: Scalar>(policy: &JointPolicy<T>, game: &GameSpec<T>) -> T {
    game.reward(policy.joint_action()).expect("policy parameters stay inside the action box")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<T> {
    pub step: usize,
    pub theta_x: T,
    pub theta_y: T,
    pub ret: T,
    pub grad_x: T,
    pub grad_y: T,
}

/// A learner that can be driven in chunks; step 0 of the log is the
/// initialization with zero gradient.
#[derive(Debug, Clone)]
pub struct BrudLearner<T> {
    pub game: GameSpec<T>,
    pub cfg: LearnerConfig,
    pub policy: JointPolicy<T>,
    pub log: Vec<StepRecord<T>>,
    burned_in: bool,
}

impl<T: Scalar> BrudLearner<T> {
    pub fn new(game: GameSpec<T>, cfg: LearnerConfig) -> Result<Self> {
        cfg.validate()?;
        let policy = JointPolicy::for_game(&game, cfg.init);
        let ret = evaluate(&policy, &game);
        let log = vec![StepRecord {
            step: 0,
            theta_x: policy.theta_x,
            theta_y: policy.theta_y,
            ret,
            grad_x: T::zero(),
            grad_y: T::zero(),
        }];
        Ok(BrudLearner { game, cfg, policy, log, burned_in: false })
    }

    fn draw<R: Rng + ?Sized>(&self, source: &[JointAction<T>], rng: &mut R) -> Vec<JointAction<T>> {
        if self.cfg.full_batch {
            source.to_vec()
        } else {
            (0..self.cfg.batch).map(|_| source[rng.random_range(0..source.len())]).collect()
        }
    }

    /// Runs `steps` updates on batches drawn with replacement from `source`.
    /// The first call also consumes the burn-in batches.
    pub fn run<R: Rng + ?Sized>(&mut self, source: &[JointAction<T>], steps: usize, rng: &mut R) -> Result<()> {
        if source.is_empty() {
            return Err(Error::InvalidArgument("BRUD source is empty".into()));
        }
        if !self.burned_in {
            for _ in 0..self.cfg.burn_in {
                self.draw(source, rng);
            }
            self.burned_in = true;
        }
        for _ in 0..steps {
            let batch = self.draw(source, rng);
            let grad = brud_gradient(&self.game, &batch, &self.policy)?;
            self.policy = update(&self.policy, grad, &self.cfg)?;
            self.log.push(StepRecord {
                step: self.log.len(),
                theta_x: self.policy.theta_x,
                theta_y: self.policy.theta_y,
                ret: evaluate(&self.policy, &self.game),
                grad_x: grad.0,
                grad_y: grad.1,
            });
        }
        Ok(())
    }
}

/// Offline BRUD training on a fixed source; batches come from stream
/// `(seed, "brud", 0)`.
pub fn train_brud<T: Scalar>(
    game: &GameSpec<T>,
    source: &[JointAction<T>],
    cfg: &LearnerConfig,
    seed: u64,
) -> Result<Vec<StepRecord<T>>> {
    let mut learner = BrudLearner::new(game.clone(), cfg.clone())?;
    let mut r = rng::stream(seed, "brud", 0);
    learner.run(source, cfg.steps, &mut r)?;
    Ok(learner.log)
}

/// Component-wise mean of `theta` over the last `window` records.
pub fn tail_mean_theta<T: Scalar>(log: &[StepRecord<T>], window: usize) -> (T, T) {
    let w = window.clamp(1, log.len().max(1));
    let tail = &log[log.len().saturating_sub(w)..];
    let n = T::from_usize_lossy(tail.len().max(1));
    (tail.iter().map(|r| r.theta_x).sum::<T>() / n, tail.iter().map(|r| r.theta_y).sum::<T>() / n)
}

pub fn log_to_text<T: Scalar>(log: &[StepRecord<T>]) -> String {
    let mut out = String::from("step,theta_x,theta_y,return,grad_x,grad_y\n");
    for r in log {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step,
            r.theta_x.f64(),
            r.theta_y.f64(),
            r.ret.f64(),
            r.grad_x.f64(),
            r.grad_y.f64()
        )
        .unwrap();
    }
    out
}

pub fn write_log<T: Scalar>(log: &[StepRecord<T>], path: &Path) -> Result<()> {
    fs::write(path, log_to_text(log))?;
    Ok(())
}
