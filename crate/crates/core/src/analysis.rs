//! Closed-form checks on BRUD dynamics and guidance, plus sample diagnostics.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::games::{GameKind, GameSpec, OfflineDataset};
use crate::guidance::contraction_step;
use crate::marl::{brud_gradient, tail_mean_theta, train_brud, JointPolicy, LearnerConfig};
use crate::rng;
use crate::scalar::Scalar;
use crate::trajectory::TrajectoryLayout;

/// Stationary point of the full-batch BRUD update for one Twin Peaks agent.
pub fn twin_peaks_fixed_point(a: f64, b: f64, c: f64, mean_other: f64, var_other: f64) -> Result<f64> {
    if !(a > 0.0 && b >= 0.0) || var_other < 0.0 {
        return Err(Error::Domain(format!("fixed point needs A > 0, B >= 0, var >= 0 (got {a}, {b}, {var_other})")));
    }
    Ok(c * mean_other / (2.0 * a + 2.0 * b * (mean_other * mean_other + var_other)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointReport {
    pub predicted: (f64, f64),
    pub empirical: (f64, f64),
    pub gap: (f64, f64),
}

/// Runs full-batch BRUD on `ds` and compares its end point with the closed form.
pub fn fixed_point_report<T: Scalar>(a: f64, b: f64, c: f64, ds: &OfflineDataset<T>, cfg: &LearnerConfig) -> Result<FixedPointReport> {
    let s = ds.stats;
    let predicted = (
        twin_peaks_fixed_point(a, b, c, s.mean_y.f64(), s.var_y.f64())?,
        twin_peaks_fixed_point(a, b, c, s.mean_x.f64(), s.var_x.f64())?,
    );
    let cfg = LearnerConfig { full_batch: true, ..cfg.clone() };
    let log = train_brud(&ds.game, &ds.actions(), &cfg, ds.seed)?;
    let (tx, ty) = tail_mean_theta(&log, 1);
    let empirical = (tx.f64(), ty.f64());
    Ok(FixedPointReport {
        predicted,
        empirical,
        gap: ((predicted.0 - empirical.0).abs(), (predicted.1 - empirical.1).abs()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantFieldReport {
    pub field: (f64, f64),
    pub max_deviation: f64,
    pub points: usize,
}

/// Full-batch BRUD gradient on the multiplication game at `points` random
/// policies, compared against `(mean_y, mean_x)`.
pub fn constant_field_check<T: Scalar>(ds: &OfflineDataset<T>, points: usize, seed: u64) -> Result<ConstantFieldReport> {
    if ds.game.kind != GameKind::Multiplication {
        return Err(Error::InvalidArgument("constant-field check applies to the multiplication game".into()));
    }
    let field = (ds.stats.mean_y.f64(), ds.stats.mean_x.f64());
    let actions = ds.actions();
    let mut r = rng::stream(seed, "constant-field", 0);
    let (lo, hi) = (ds.game.action_low.f64(), ds.game.action_high.f64());
    let mut max_deviation = 0.0f64;
    for _ in 0..points {
        let theta = (r.random_range(lo..=hi), r.random_range(lo..=hi));
        let p = JointPolicy::for_game(&ds.game, theta);
        let g = brud_gradient(&ds.game, &actions, &p)?;
        max_deviation = max_deviation.max((g.0.f64() - field.0).abs()).max((g.1.f64() - field.1).abs());
    }
    Ok(ConstantFieldReport { field, max_deviation, points })
}

/// Batch mean of the joint surrogate log-likelihood, summed over timesteps and
/// agents. Rows are trajectories in action space.
pub fn mean_policy_loglik<T: Scalar>(batch: ArrayView2<T>, layout: &TrajectoryLayout, policy: &JointPolicy<T>, std: f64) -> Result<f64> {
    if batch.nrows() == 0 {
        return Err(Error::InvalidArgument("log-likelihood of an empty batch".into()));
    }
    check_len(layout.dim(), batch.ncols())?;
    let log_norm = -(std * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let mut total = 0.0;
    for row in batch.rows() {
        for t in 0..layout.horizon {
            for i in 0..layout.n_agents {
                let a = row[layout.action_range(t, i).start].f64();
                let z = (a - policy.act(i, &[]).f64()) / std;
                total += log_norm - 0.5 * z * z;
            }
        }
    }
    Ok(total / batch.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionClass {
    Identity,
    OneStep,
    Contractive,
    /// `lambda = 2`: reflection through the mean, distance preserved.
    Reflective,
    Expansive,
}

impl ContractionClass {
    pub fn of(lambda: f64) -> Self {
        if lambda == 0.0 {
            ContractionClass::Identity
        } else if lambda == 1.0 {
            ContractionClass::OneStep
        } else if lambda > 0.0 && lambda < 2.0 {
            ContractionClass::Contractive
        } else if lambda == 2.0 {
            ContractionClass::Reflective
        } else {
            ContractionClass::Expansive
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionRow {
    pub lambda: f64,
    pub class: ContractionClass,
    pub trials: usize,
    pub max_law_error: f64,
    pub class_holds: bool,
    pub overshoot_holds: bool,
}

impl ContractionRow {
    pub fn passed(&self) -> bool {
        self.max_law_error <= 1e-12 && self.class_holds && self.overshoot_holds
    }
}

/// Checks `|a' - mu| = |1 - lambda| |a - mu|` and the behavior class on random
/// pairs in `[-1, 1]^2`.
pub fn contraction_battery(lambdas: &[f64], trials: usize, seed: u64) -> Vec<ContractionRow> {
    lambdas
        .iter()
        .enumerate()
        .map(|(k, &lambda)| {
            let mut r = rng::stream(seed, "contraction", k as u64);
            let class = ContractionClass::of(lambda);
            let mut max_law_error = 0.0f64;
            let mut class_holds = true;
            let mut overshoot_holds = true;
            for _ in 0..trials {
                let a: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
                let mu: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
                let next = contraction_step(&a, &mu, lambda);
                let dist = |u: &[f64]| u.iter().zip(&mu).map(|(x, m)| (x - m).powi(2)).sum::<f64>().sqrt();
                let (before, after) = (dist(&a), dist(&next));
                max_law_error = max_law_error.max((after - (1.0 - lambda).abs() * before).abs());
                let ratio = after / before;
                class_holds &= match class {
                    ContractionClass::Identity => next == a,
                    ContractionClass::OneStep => after <= 1e-12,
                    ContractionClass::Contractive => ratio < 1.0,
                    ContractionClass::Reflective => (ratio - 1.0).abs() < 1e-12,
                    ContractionClass::Expansive => ratio > 1.0,
                };
                if lambda > 1.0 && lambda < 2.0 {
                    for j in 0..2 {
                        let (d0, d1) = (a[j] - mu[j], next[j] - mu[j]);
                        overshoot_holds &= d0 == 0.0 || d0 * d1 < 0.0;
                    }
                }
            }
            ContractionRow { lambda, class, trials, max_law_error, class_holds, overshoot_holds }
        })
        .collect()
}

/// Largest gap between the empirical CDFs of two samples.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimDiagnostics {
    pub mean_gap: f64,
    pub var_gap: f64,
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub dims: Vec<DimDiagnostics>,
}

impl DistributionReport {
    pub fn max_mean_gap(&self) -> f64 {
        self.dims.iter().map(|d| d.mean_gap).fold(0.0, f64::max)
    }

    pub fn max_ks(&self) -> f64 {
        self.dims.iter().map(|d| d.ks).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("dim,mean_gap,var_gap,ks\n");
        for (d, g) in self.dims.iter().enumerate() {
            writeln!(out, "{d},{:.16e},{:.16e},{:.16e}", g.mean_gap, g.var_gap, g.ks).unwrap();
        }
        out
    }
}

/// Per-dimension moment gaps and two-sample KS statistics.
pub fn distribution_diagnostics<T: Scalar>(samples: ArrayView2<T>, reference: ArrayView2<T>) -> Result<DistributionReport> {
    check_len(reference.ncols(), samples.ncols())?;
    let moments = |v: &[f64]| {
        let n = v.len().max(1) as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    };
    let dims = (0..samples.ncols())
        .map(|d| {
            let a: Vec<f64> = samples.column(d).iter().map(|v| v.f64()).collect();
            let b: Vec<f64> = reference.column(d).iter().map(|v| v.f64()).collect();
            let ((ma, va), (mb, vb)) = (moments(&a), moments(&b));
            DimDiagnostics { mean_gap: (ma - mb).abs(), var_gap: (va - vb).abs(), ks: ks_statistic(&a, &b) }
        })
        .collect();
    Ok(DistributionReport { dims })
}

/// Whether `game` is Twin Peaks with the given coefficients.
pub fn twin_peaks_params<T: Scalar>(game: &GameSpec<T>) -> Option<(f64, f64, f64)> {
    if game.kind != GameKind::TwinPeaks {
        return None;
    }
    let get = |k: (u32, u32)| game.coefficients.get(&k).map(|v| v.f64());
    Some((-get((2, 0))?, -get((2, 2))?, get((1, 1))?))
}
