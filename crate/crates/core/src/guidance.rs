//! Conditioning routes for the sampler: classifier guidance from the current
//! joint policy's log-likelihood, classifier-free guidance, and return labels.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1};
use serde::{Deserialize, Serialize};

use crate::diffusion::Guide;
use crate::error::{check_len, Error, Result};
use crate::games::OfflineDataset;
use crate::marl::JointPolicy;
use crate::scalar::{sigmoid, Scalar};
use crate::trajectory::TrajectoryLayout;
use crate::transforms::CdfNormalizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    None,
    Classifier,
    Cfg,
    QCond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceHook {
    pub mode: GuidanceMode,
    pub lambda: f64,
    pub w: f64,
    pub schedule: LambdaSchedule,
    pub surrogate_std: f64,
}

impl Default for GuidanceHook {
    fn default() -> Self {
        GuidanceHook { mode: GuidanceMode::None, lambda: 0.5, w: 1.0, schedule: LambdaSchedule::Cosine, surrogate_std: 1.0 }
    }
}

impl GuidanceHook {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::InvalidArgument("guidance scales must be finite and non-negative".into()));
        }
        if !(self.surrogate_std > 0.0) {
            return Err(Error::InvalidArgument("surrogate_std must be positive".into()));
        }
        Ok(())
    }
}

/// CFG condition vector describing a joint policy; `(theta_x, theta_y)` here.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDescriptor<T>(pub Vec<T>);

impl<T: Scalar> PolicyDescriptor<T> {
    pub fn of(policy: &JointPolicy<T>) -> Self {
        PolicyDescriptor(policy.means().to_vec())
    }
}

/// Per-timestep action gradient of the joint Gaussian surrogate log-density.
/// `actions` and `obs` hold one row per timestep, agents side by side.
pub fn policy_score<T: Scalar>(policy: &JointPolicy<T>, actions: ArrayView2<T>, obs: ArrayView2<T>, std: T) -> Result<Array2<T>> {
    check_len(2, actions.ncols())?;
    check_len(actions.nrows(), obs.nrows())?;
    let var = std * std;
    let mut g = Array2::zeros(actions.raw_dim());
    for t in 0..actions.nrows() {
        for i in 0..2 {
            let o = obs.row(t);
            let mu = policy.act(i, o.as_slice().unwrap_or(&[]));
            g[[t, i]] = (mu - actions[[t, i]]) / var;
        }
    }
    Ok(g)
}

/// Joint surrogate log-density summed over timesteps and agents.
pub fn policy_log_density<T: Scalar>(policy: &JointPolicy<T>, actions: ArrayView2<T>, std: T) -> Result<T> {
    check_len(2, actions.ncols())?;
    let log_norm = -(std * (T::c(2.0) * T::PI()).sqrt()).ln();
    let mut total = T::zero();
    for row in actions.rows() {
        for (i, &a) in row.iter().enumerate() {
            let z = (a - policy.act(i, &[])) / std;
            total += log_norm - T::c(0.5) * z * z;
        }
    }
    Ok(total)
}

/// `g / |g|`, or zero when `|g| <= 1e-12`.
pub fn normalize_score<T: Scalar>(g: &[T]) -> Vec<T> {
    let norm = g.iter().map(|v| *v * *v).sum::<T>().sqrt();
    if norm > T::c(1e-12) {
        g.iter().map(|v| *v / norm).collect()
    } else {
        vec![T::zero(); g.len()]
    }
}

/// Guidance scale at sampler step `n` of `total`.
pub fn schedule_lambda(hook: &GuidanceHook, n: usize, total: usize) -> f64 {
    match hook.schedule {
        LambdaSchedule::Constant => hook.lambda,
        LambdaSchedule::Cosine => {
            if n + 1 >= total {
                hook.lambda
            } else {
                hook.lambda * (1.0 - (std::f64::consts::PI * (n + 1) as f64 / total as f64).cos()) / 2.0
            }
        }
    }
}

/// Maps diffusion-space coordinates back to data space and reports the local
/// derivative of that map.
pub trait Denormalize<T> {
    fn value(&self, dim: usize, z: T) -> T;
    fn derivative(&self, dim: usize, z: T) -> T;
}

impl<T: Scalar> Denormalize<T> for CdfNormalizer<T> {
    fn value(&self, dim: usize, z: T) -> T {
        self.quantile(dim, sigmoid(z))
    }

    fn derivative(&self, dim: usize, z: T) -> T {
        self.inverse_derivative(dim, z)
    }
}

/// Identity map for data already in action space.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl<T: Scalar> Denormalize<T> for Identity {
    fn value(&self, _: usize, z: T) -> T {
        z
    }

    fn derivative(&self, _: usize, _: T) -> T {
        T::one()
    }
}

/// One classifier-guidance insert. Scores are taken at the de-normalized
/// denoised actions, pulled back through the de-normalizer, stacked over time,
/// normalized and scaled by `lambda_n`; only action coordinates of `tau_hat`
/// change.
pub fn classifier_guide<T: Scalar, N: Denormalize<T> + ?Sized>(
    mut tau_hat: ArrayViewMut1<T>,
    tau_bar: ArrayView1<T>,
    policy: &JointPolicy<T>,
    lambda_n: T,
    layout: &TrajectoryLayout,
    denorm: &N,
    std: T,
) -> Result<()> {
    check_len(layout.dim(), tau_hat.len())?;
    check_len(layout.dim(), tau_bar.len())?;
    if lambda_n == T::zero() {
        return Ok(());
    }
    let h = layout.horizon;
    let mut actions = Array2::zeros((h, 2));
    let mut obs = Array2::zeros((h, 2));
    let mut index = Vec::with_capacity(2 * h);
    for t in 0..h {
        for i in 0..2 {
            let j = layout.action_range(t, i).start;
            actions[[t, i]] = denorm.value(j, tau_bar[j]);
            if let Some(k) = layout.obs_range(t, i).next() {
                obs[[t, i]] = denorm.value(k, tau_bar[k]);
            }
            index.push(j);
        }
    }
    let g = policy_score(policy, actions.view(), obs.view(), std)?;
    let pulled: Vec<T> = index
        .iter()
        .enumerate()
        .map(|(k, &j)| g[[k / 2, k % 2]] * denorm.derivative(j, tau_bar[j]))
        .collect();
    for (&j, v) in index.iter().zip(normalize_score(&pulled)) {
        tau_hat[j] += lambda_n * v;
    }
    Ok(())
}

/// `(1 + w) * cond - w * uncond`.
pub fn cfg_combine<T: Scalar>(cond: &[T], uncond: &[T], w: T) -> Result<Vec<T>> {
    check_len(cond.len(), uncond.len())?;
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| (T::one() + w) * c - w * u).collect())
}

/// CFG labels: each trajectory is tagged with its own joint action.
pub fn cfg_condition_labels<T: Scalar>(ds: &OfflineDataset<T>) -> Array2<T> {
    let mut labels = Array2::zeros((ds.len(), 2));
    for (i, a) in ds.actions().into_iter().enumerate() {
        labels[[i, 0]] = a.ax;
        labels[[i, 1]] = a.ay;
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum QTarget {
    MaxReturn,
    Quantile { q: f64 },
}

impl Default for QTarget {
    fn default() -> Self {
        QTarget::MaxReturn
    }
}

/// Return labels (one column) and the sampling condition for the target.
/// Quantiles interpolate linearly between order statistics.
pub fn q_condition_labels<T: Scalar>(ds: &OfflineDataset<T>, target: QTarget) -> Result<(Array2<T>, T)> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot label an empty dataset".into()));
    }
    let returns = ds.rewards();
    let labels = Array2::from_shape_vec((returns.len(), 1), returns.clone()).expect("column shape");
    let mut sorted = returns;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
    let cond = match target {
        QTarget::MaxReturn => *sorted.last().unwrap(),
        QTarget::Quantile { q } => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]")));
            }
            let pos = q * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = T::c(pos - lo as f64);
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    };
    Ok((labels, cond))
}

/// Exact quadratic-surrogate guidance step `(1 - lambda) a + lambda mu`.
pub fn contraction_step<T: Scalar>(a: &[T], mu: &[T], lambda: T) -> Vec<T> {
    a.iter().zip(mu).map(|(&x, &m)| (T::one() - lambda) * x + lambda * m).collect()
}

/// Sampler hook steering actions toward `policy`.
#[derive(Debug, Clone)]
pub struct PolicyGuide<'a, T, N: ?Sized> {
    pub policy: JointPolicy<T>,
    pub hook: GuidanceHook,
    pub layout: TrajectoryLayout,
    pub denorm: &'a N,
}

impl<T: Scalar, N: Denormalize<T> + Sync + ?Sized> Guide<T> for PolicyGuide<'_, T, N> {
    fn apply(&self, n: usize, total: usize, tau_hat: ArrayViewMut1<T>, tau_bar: ArrayView1<T>) {
        let lambda = T::c(schedule_lambda(&self.hook, n, total));
        classifier_guide(tau_hat, tau_bar, &self.policy, lambda, &self.layout, self.denorm, T::c(self.hook.surrogate_std))
            .expect("guide layout matches the sampler dimension");
    }
}
