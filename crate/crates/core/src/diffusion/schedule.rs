use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Karras (EDM) sampling schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule<T> {
    pub sigma_min: T,
    pub sigma_max: T,
    pub rho: T,
    pub steps: usize,
}

impl<T: Scalar> Default for NoiseSchedule<T> {
    fn default() -> Self {
        NoiseSchedule { sigma_min: T::c(0.002), sigma_max: T::c(80.0), rho: T::c(7.0), steps: 40 }
    }
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > T::zero() && self.sigma_min < self.sigma_max) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < sigma_min < sigma_max (got {}, {})",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > T::zero()) || self.steps == 0 {
            return Err(Error::InvalidArgument("schedule needs rho > 0 and steps >= 1".into()));
        }
        Ok(())
    }

    /// `steps + 1` noise levels, strictly decreasing from `sigma_max` to
    /// `sigma_min` with a terminal 0 appended.
    pub fn karras_sigmas(&self) -> Vec<T> {
        let n = self.steps;
        let inv_rho = T::one() / self.rho;
        let hi = self.sigma_max.powf(inv_rho);
        let lo = self.sigma_min.powf(inv_rho);
        let mut sigmas: Vec<T> = (0..n)
            .map(|i| {
                if i == 0 {
                    self.sigma_max
                } else if i == n - 1 {
                    self.sigma_min
                } else {
                    let t = T::from_usize_lossy(i) / T::from_usize_lossy(n - 1);
                    (hi + t * (lo - hi)).powf(self.rho)
                }
            })
            .collect();
        sigmas.push(T::zero());
        sigmas
    }
}

/// Log-normal training noise law, clamped into `[clamp_min, clamp_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainNoiseLaw<T> {
    pub mu_log: T,
    pub sigma_log: T,
    pub clamp_min: T,
    pub clamp_max: T,
}

impl<T: Scalar> Default for TrainNoiseLaw<T> {
    fn default() -> Self {
        TrainNoiseLaw { mu_log: T::c(-1.2), sigma_log: T::c(1.2), clamp_min: T::c(0.002), clamp_max: T::c(80.0) }
    }
}

impl<T: Scalar> TrainNoiseLaw<T> {
    /// Noise level for a given standard-normal draw `g`.
    pub fn sigma_for(&self, g: T) -> T {
        (self.mu_log + self.sigma_log * g).exp().max(self.clamp_min).min(self.clamp_max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        self.sigma_for(T::c(rng::normal(rng)))
    }
}
