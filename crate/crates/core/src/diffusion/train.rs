use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::ArrayView2;

use super::model::{draw_loss_batch, DenoiserModel};
use super::TrainNoiseLaw;
use crate::error::{check_len, Error, Result};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps; each step draws one batch with replacement.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub cond_dropout: f64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    /// Loss is recorded every `log_every` steps (and on the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10_000,
            batch: 1000,
            lr: 1e-2,
            grad_clip: 10.0,
            cond_dropout: 0.1,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Cosine,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument("batch and log_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidArgument("lr and grad_clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::InvalidArgument(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        Ok(())
    }
}

/// Recorded `(step, loss)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// Mean of the last `k` recorded losses.
    pub fn tail_mean(&self, k: usize) -> Option<f64> {
        let k = k.min(self.points.len());
        (k > 0).then(|| self.points[self.points.len() - k..].iter().map(|p| p.1).sum::<f64>() / k as f64)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.points {
            writeln!(out, "{s},{l:.16e}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn step(&mut self, params: &mut [T], grad: &[T], lr: T) {
        let (b1, b2, eps) = (T::c(0.9), T::c(0.999), T::c(1e-8));
        self.t += 1;
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Fits the denoiser to `data` (rows in diffusion space). `cond` holds one
/// raw condition row per data row and is required iff the model is conditional.
pub fn train<T: Scalar>(
    model: &mut DenoiserModel<T>,
    data: ArrayView2<T>,
    cond: Option<ArrayView2<T>>,
    law: &TrainNoiseLaw<T>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossCurve> {
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    check_len(model.dim(), data.ncols())?;
    match (&cond, model.config.cond_dim) {
        (None, 0) => {}
        (Some(c), k) if k > 0 => {
            check_len(k, c.ncols())?;
            check_len(data.nrows(), c.nrows())?;
        }
        _ => return Err(Error::InvalidArgument("condition presence must match the model's cond_dim".into())),
    }
    if cfg.cond_dropout >= 1.0 {
        model.null_only = true;
    }
    let mut r = rng::stream(seed, "denoiser-train", 0);
    let mut adam = Adam { m: vec![T::zero(); model.num_params()], v: vec![T::zero(); model.num_params()], t: 0 };
    let clip = T::c(cfg.grad_clip);
    let mut curve = LossCurve::default();
    for step in 0..cfg.epochs {
        let batch = draw_loss_batch(data, cond, cfg.batch, law, cfg.cond_dropout, &mut r);
        let (loss, mut grad) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: loss.f64() });
        }
        let norm = grad.iter().map(|g| *g * *g).sum::<T>().sqrt();
        if norm > clip {
            let k = clip / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
        let lr = T::c(match cfg.lr_schedule {
            LrSchedule::Constant => cfg.lr,
            LrSchedule::Cosine => 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / cfg.epochs as f64).cos()),
        });
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                    *p -= lr * *g;
                }
            }
            OptimizerKind::Adam => adam.step(model.params_mut(), &grad, lr),
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.epochs {
            curve.points.push((step, loss.f64()));
        }
    }
    Ok(curve)
}

/// `sigma_data` estimate: pooled standard deviation over the non-constant
/// columns of the diffusion-space training matrix.
pub fn estimate_sigma_data<T: Scalar>(data: ArrayView2<T>) -> T {
    let n = T::from_usize_lossy(data.nrows().max(1));
    let mut acc = T::zero();
    let mut cols = 0usize;
    for col in data.columns() {
        let mean = col.sum() / n;
        let var = col.iter().map(|&v| (v - mean).powi(2)).sum::<T>() / n;
        if var > T::c(1e-12) {
            acc += var;
            cols += 1;
        }
    }
    if cols == 0 {
        T::one()
    } else {
        (acc / T::from_usize_lossy(cols)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::DenoiserConfig;
    use ndarray::Array2;

    #[test]
    fn single_point_loss_falls_fast() {
        let data = Array2::from_shape_vec((1, 3), vec![0.5, -0.3, 0.2]).unwrap();
        let mut m = DenoiserModel::<f64>::new(DenoiserConfig::new(3, 0), 0.5, 1).unwrap();
        let cfg = TrainConfig { epochs: 3000, batch: 256, ..TrainConfig::default() };
        let curve = train(&mut m, data.view(), None, &TrainNoiseLaw::default(), &cfg, 3).unwrap();
        assert!(curve.first().unwrap() > 0.5);
        assert!(curve.tail_mean(20).unwrap() < 1e-2, "tail loss {:?}", curve.tail_mean(20));
    }

    #[test]
    fn rejects_mismatched_conditions() {
        let data = Array2::<f64>::zeros((4, 3));
        let mut m = DenoiserModel::<f64>::new(DenoiserConfig::new(3, 0), 1.0, 1).unwrap();
        let c = Array2::<f64>::zeros((4, 2));
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(train(&mut m, data.view(), Some(c.view()), &TrainNoiseLaw::default(), &cfg, 0).is_err());
        assert!(train(&mut m, Array2::<f64>::zeros((0, 3)).view(), None, &TrainNoiseLaw::default(), &cfg, 0).is_err());
    }

    #[test]
    fn full_dropout_makes_condition_irrelevant() {
        let mut r = rng::stream(2, "d", 0);
        let data = Array2::from_shape_fn((32, 3), |_| rng::normal(&mut r));
        let cond = Array2::from_shape_fn((32, 2), |_| rng::normal(&mut r));
        let mut m = DenoiserModel::<f64>::new(DenoiserConfig::new(3, 2), 1.0, 1).unwrap();
        let cfg = TrainConfig { epochs: 50, batch: 16, cond_dropout: 1.0, ..TrainConfig::default() };
        train(&mut m, data.view(), Some(cond.view()), &TrainNoiseLaw::default(), &cfg, 0).unwrap();
        let x = [0.1, 0.2, -0.4];
        let a = m.denoise(&x, 0.7, Some(&[1.0, 1.0])).unwrap();
        let b = m.denoise(&x, 0.7, Some(&[-3.0, 0.5])).unwrap();
        let null = m.denoise(&x, 0.7, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, null);
    }

    #[test]
    fn sigma_data_skips_constant_columns() {
        let data = Array2::from_shape_vec((4, 2), vec![1.0, 5.0, -1.0, 5.0, 1.0, 5.0, -1.0, 5.0]).unwrap();
        assert!((estimate_sigma_data(data.view()) - 1.0f64).abs() < 1e-15);
    }
}
