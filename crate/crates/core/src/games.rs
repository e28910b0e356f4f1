//! Two-player continuous polynomial games and their offline datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{fmt_exact, Scalar};
use crate::trajectory::{JointTrajectory, TrajectoryLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GameKind {
    Multiplication,
    TwinPeaks,
    CustomPolynomial,
}

/// A shared reward `R(ax, ay) = sum c_ij ax^i ay^j` on a square action box.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec<T> {
    pub kind: GameKind,
    pub coefficients: BTreeMap<(u32, u32), T>,
    pub action_low: T,
    pub action_high: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointAction<T> {
    pub ax: T,
    pub ay: T,
}

impl<T: Scalar> JointAction<T> {
    pub fn new(ax: T, ay: T) -> Self {
        JointAction { ax, ay }
    }
}

impl<T: Scalar> GameSpec<T> {
    /// `R = ax * ay`.
    pub fn multiplication() -> Self {
        GameSpec {
            kind: GameKind::Multiplication,
            coefficients: BTreeMap::from([((1, 1), T::one())]),
            action_low: -T::one(),
            action_high: T::one(),
        }
    }

    /// `R = -A (ax^2 + ay^2) - B (ax ay)^2 + C ax ay` with `A > 0`, `B > 0`, `C > 2A`.
    pub fn twin_peaks(a: T, b: T, c: T) -> Result<Self> {
        if !(a > T::zero() && b > T::zero() && c > T::c(2.0) * a) {
            return Err(Error::InvalidArgument(format!(
                "twin peaks needs A > 0, B > 0, C > 2A (got A={a}, B={b}, C={c})"
            )));
        }
        Ok(GameSpec {
            kind: GameKind::TwinPeaks,
            coefficients: BTreeMap::from([((2, 0), -a), ((0, 2), -a), ((2, 2), -b), ((1, 1), c)]),
            action_low: -T::one(),
            action_high: T::one(),
        })
    }

    pub fn custom(coefficients: BTreeMap<(u32, u32), T>, action_low: T, action_high: T) -> Result<Self> {
        if !(action_low < action_high) {
            return Err(Error::InvalidArgument(format!(
                "action_low ({action_low}) must be below action_high ({action_high})"
            )));
        }
        if coefficients.values().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("polynomial coefficient".into()));
        }
        Ok(GameSpec { kind: GameKind::CustomPolynomial, coefficients, action_low, action_high })
    }

    pub fn contains(&self, a: JointAction<T>) -> bool {
        let inside = |v: T| v.is_finite() && v >= self.action_low && v <= self.action_high;
        inside(a.ax) && inside(a.ay)
    }

    fn check(&self, a: JointAction<T>) -> Result<()> {
        if self.contains(a) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "action ({}, {}) outside [{}, {}]^2",
                a.ax, a.ay, self.action_low, self.action_high
            )))
        }
    }

    pub fn clip(&self, v: T) -> T {
        v.max(self.action_low).min(self.action_high)
    }

    pub fn reward(&self, a: JointAction<T>) -> Result<T> {
        self.check(a)?;
        Ok(self.eval(a.ax, a.ay))
    }

    pub fn reward_grad(&self, a: JointAction<T>) -> Result<(T, T)> {
        self.check(a)?;
        Ok(self.eval_grad(a.ax, a.ay))
    }

    pub(crate) fn eval(&self, x: T, y: T) -> T {
        self.coefficients
            .iter()
            .map(|(&(i, j), &c)| c * x.powi(i as i32) * y.powi(j as i32))
            .sum()
    }

    pub(crate) fn eval_grad(&self, x: T, y: T) -> (T, T) {
        let mut gx = T::zero();
        let mut gy = T::zero();
        for (&(i, j), &c) in &self.coefficients {
            if i > 0 {
                gx += c * T::c(i as f64) * x.powi(i as i32 - 1) * y.powi(j as i32);
            }
            if j > 0 {
                gy += c * T::c(j as f64) * x.powi(i as i32) * y.powi(j as i32 - 1);
            }
        }
        (gx, gy)
    }

    /// Largest exponent of the given agent's action anywhere in the polynomial.
    pub fn max_degree(&self) -> u32 {
        self.coefficients.keys().map(|&(i, j)| i.max(j)).max().unwrap_or(0)
    }
}

/// Law used to draw the offline joint actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DatasetLaw {
    /// i.i.d. uniform over the action box.
    Uniform,
    /// Uniform draws paired with their reflection through the origin, so the
    /// sample mean of each agent is exactly zero.
    CenteredUniform,
    /// Independent Gaussians per agent, clipped into the box.
    ClippedGaussian { mean_x: f64, mean_y: f64, std_x: f64, std_y: f64 },
    /// Every sample at one fixed joint action.
    Point { ax: f64, ay: f64 },
}

impl Default for DatasetLaw {
    fn default() -> Self {
        DatasetLaw::Uniform
    }
}

/// Population (1/n) moments of each agent's recorded actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionStats<T> {
    pub mean_x: T,
    pub mean_y: T,
    pub var_x: T,
    pub var_y: T,
}

impl<T: Scalar> ActionStats<T> {
    pub fn fit(actions: &[JointAction<T>]) -> Self {
        let n = T::from_usize_lossy(actions.len().max(1));
        let mean_x = actions.iter().map(|a| a.ax).sum::<T>() / n;
        let mean_y = actions.iter().map(|a| a.ay).sum::<T>() / n;
        let var_x = actions.iter().map(|a| (a.ax - mean_x).powi(2)).sum::<T>() / n;
        let var_y = actions.iter().map(|a| (a.ay - mean_y).powi(2)).sum::<T>() / n;
        ActionStats { mean_x, mean_y, var_x, var_y }
    }
}

/// The fixed offline dataset: one flattened trajectory per row.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset<T> {
    pub game: GameSpec<T>,
    pub layout: TrajectoryLayout,
    pub data: Array2<T>,
    pub stats: ActionStats<T>,
    pub seed: u64,
    pub law: DatasetLaw,
}

impl<T: Scalar> OfflineDataset<T> {
    /// Builds a dataset from joint actions; rewards are computed from the game.
    pub fn from_actions(game: GameSpec<T>, actions: &[JointAction<T>], seed: u64, law: DatasetLaw) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one action".into()));
        }
        let layout = TrajectoryLayout::polynomial_game();
        let mut data = Array2::zeros((actions.len(), layout.dim()));
        for (mut row, &a) in data.rows_mut().into_iter().zip(actions) {
            let r = game.reward(a)?;
            let tr = JointTrajectory::single_step(a.ax, a.ay, r);
            row.assign(&ndarray::ArrayView1::from(&tr.values));
        }
        let stats = ActionStats::fit(actions);
        Ok(OfflineDataset { game, layout, data, stats, seed, law })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn action(&self, i: usize) -> JointAction<T> {
        let ix = self.layout.action_range(0, 0).start;
        let iy = self.layout.action_range(0, 1).start;
        JointAction::new(self.data[[i, ix]], self.data[[i, iy]])
    }

    pub fn actions(&self) -> Vec<JointAction<T>> {
        (0..self.len()).map(|i| self.action(i)).collect()
    }

    pub fn rewards(&self) -> Vec<T> {
        let ir = self.layout.reward_index(0);
        self.data.column(ir).to_vec()
    }

    pub fn trajectory(&self, i: usize) -> JointTrajectory<T> {
        JointTrajectory { layout: self.layout, values: self.data.row(i).to_vec() }
    }
}

/// Draws `n` joint actions uniformly over the action box.
pub fn gen_dataset<T: Scalar>(game: &GameSpec<T>, n: usize, seed: u64) -> Result<OfflineDataset<T>> {
    gen_dataset_with(game, n, DatasetLaw::Uniform, seed)
}

pub fn gen_dataset_with<T: Scalar>(
    game: &GameSpec<T>,
    n: usize,
    law: DatasetLaw,
    seed: u64,
) -> Result<OfflineDataset<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let lo = game.action_low.f64();
    let hi = game.action_high.f64();
    let mut r = rng::stream(seed, "dataset", 0);
    let uniform = |r: &mut rng::StreamRng| lo + (hi - lo) * r.random::<f64>();
    let clip = |v: f64| v.clamp(lo, hi);
    let mut actions: Vec<(f64, f64)> = Vec::with_capacity(n);
    match law {
        DatasetLaw::Uniform => {
            for _ in 0..n {
                let x = uniform(&mut r);
                let y = uniform(&mut r);
                actions.push((x, y));
            }
        }
        DatasetLaw::CenteredUniform => {
            if lo != -hi {
                return Err(Error::InvalidArgument("centered law needs a symmetric action box".into()));
            }
            for _ in 0..n / 2 {
                let x = uniform(&mut r);
                let y = uniform(&mut r);
                actions.push((x, y));
                actions.push((-x, -y));
            }
            if n % 2 == 1 {
                actions.push((0.0, 0.0));
            }
        }
        DatasetLaw::ClippedGaussian { mean_x, mean_y, std_x, std_y } => {
            if !(std_x >= 0.0 && std_y >= 0.0) {
                return Err(Error::InvalidArgument("gaussian std must be non-negative".into()));
            }
            for _ in 0..n {
                let x = clip(mean_x + std_x * rng::normal(&mut r));
                let y = clip(mean_y + std_y * rng::normal(&mut r));
                actions.push((x, y));
            }
        }
        DatasetLaw::Point { ax, ay } => {
            actions.extend(std::iter::repeat_n((ax, ay), n));
        }
    }
    let actions: Vec<JointAction<T>> = actions.into_iter().map(|(x, y)| JointAction::new(T::c(x), T::c(y))).collect();
    OfflineDataset::from_actions(game.clone(), &actions, seed, law)
}

/// Exhaustive search over a `resolution x resolution` grid on the action box.
/// Ties resolve to the lexicographically smallest `(ax, ay)`.
pub fn grid_optimum<T: Scalar>(game: &GameSpec<T>, resolution: usize) -> Result<(JointAction<T>, T)> {
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    let denom = T::from_usize_lossy(resolution - 1);
    let point = |k: usize| {
        let t = T::from_usize_lossy(k) / denom;
        (T::one() - t) * game.action_low + t * game.action_high
    };
    let mut best = (JointAction::new(point(0), point(0)), T::neg_infinity());
    for i in 0..resolution {
        let x = point(i);
        for j in 0..resolution {
            let y = point(j);
            let r = game.eval(x, y);
            if r > best.1 {
                best = (JointAction::new(x, y), r);
            }
        }
    }
    Ok(best)
}

fn kind_name(kind: GameKind) -> &'static str {
    match kind {
        GameKind::Multiplication => "multiplication",
        GameKind::TwinPeaks => "twin_peaks",
        GameKind::CustomPolynomial => "custom_polynomial",
    }
}

fn kind_from_name(name: &str) -> Option<GameKind> {
    match name {
        "multiplication" => Some(GameKind::Multiplication),
        "twin_peaks" => Some(GameKind::TwinPeaks),
        "custom_polynomial" => Some(GameKind::CustomPolynomial),
        _ => None,
    }
}

/// Path of the header sidecar that accompanies a dataset file.
pub fn header_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".header");
    path.with_file_name(name)
}

/// Writes `ax,ay,reward` records with 17 significant digits plus a header
/// sidecar carrying `n`, the seed, the sampling law and the game.
pub fn write_dataset<T: Scalar>(ds: &OfflineDataset<T>, path: &Path) -> Result<()> {
    let mut body = String::from("ax,ay,reward\n");
    let rewards = ds.rewards();
    for (a, r) in ds.actions().into_iter().zip(rewards) {
        writeln!(body, "{},{},{}", fmt_exact(a.ax), fmt_exact(a.ay), fmt_exact(r)).unwrap();
    }
    fs::write(path, body)?;

    let mut header = String::new();
    writeln!(header, "n = {}", ds.len()).unwrap();
    writeln!(header, "seed = {}", ds.seed).unwrap();
    writeln!(header, "law = {}", law_name(&ds.law)).unwrap();
    writeln!(header, "game = {}", kind_name(ds.game.kind)).unwrap();
    writeln!(header, "action_low = {}", fmt_exact(ds.game.action_low)).unwrap();
    writeln!(header, "action_high = {}", fmt_exact(ds.game.action_high)).unwrap();
    for (&(i, j), &c) in &ds.game.coefficients {
        writeln!(header, "coef {} {} = {}", i, j, fmt_exact(c)).unwrap();
    }
    fs::write(header_path(path), header)?;
    Ok(())
}

fn law_name(law: &DatasetLaw) -> String {
    match *law {
        DatasetLaw::Uniform => "uniform".into(),
        DatasetLaw::CenteredUniform => "centered_uniform".into(),
        DatasetLaw::ClippedGaussian { mean_x, mean_y, std_x, std_y } => format!(
            "clipped_gaussian {} {} {} {}",
            fmt_exact(mean_x),
            fmt_exact(mean_y),
            fmt_exact(std_x),
            fmt_exact(std_y)
        ),
        DatasetLaw::Point { ax, ay } => format!("point {} {}", fmt_exact(ax), fmt_exact(ay)),
    }
}

fn parse_law(s: &str, line: usize) -> Result<DatasetLaw> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    let num = |k: usize| -> Result<f64> {
        parts
            .get(k)
            .and_then(|p| p.parse().ok())
            .ok_or(Error::Parse { line, message: format!("bad law `{s}`") })
    };
    match parts.first().copied() {
        Some("uniform") => Ok(DatasetLaw::Uniform),
        Some("centered_uniform") => Ok(DatasetLaw::CenteredUniform),
        Some("clipped_gaussian") => Ok(DatasetLaw::ClippedGaussian {
            mean_x: num(1)?,
            mean_y: num(2)?,
            std_x: num(3)?,
            std_y: num(4)?,
        }),
        Some("point") => Ok(DatasetLaw::Point { ax: num(1)?, ay: num(2)? }),
        _ => Err(Error::Parse { line, message: format!("unknown law `{s}`") }),
    }
}

/// Reads a dataset written by [`write_dataset`]; rewards are re-derived and
/// checked against the stored column.
pub fn read_dataset<T: Scalar>(path: &Path) -> Result<OfflineDataset<T>> {
    let header = fs::read_to_string(header_path(path))?;
    let mut n = None;
    let mut seed = 0u64;
    let mut law = DatasetLaw::Uniform;
    let mut kind = GameKind::CustomPolynomial;
    let mut low = -1.0;
    let mut high = 1.0;
    let mut coefficients = BTreeMap::new();
    for (ln, line) in header.lines().enumerate() {
        let line_no = ln + 1;
        let Some((key, value)) = line.split_once('=') else { continue };
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::Parse { line: line_no, message: format!("bad {what} `{value}`") };
        match key {
            "n" => n = Some(value.parse::<usize>().map_err(|_| bad("n"))?),
            "seed" => seed = value.parse().map_err(|_| bad("seed"))?,
            "law" => law = parse_law(value, line_no)?,
            "game" => kind = kind_from_name(value).ok_or_else(|| bad("game"))?,
            "action_low" => low = value.parse().map_err(|_| bad("action_low"))?,
            "action_high" => high = value.parse().map_err(|_| bad("action_high"))?,
            k if k.starts_with("coef") => {
                let ij: Vec<u32> = k.split_whitespace().skip(1).filter_map(|p| p.parse().ok()).collect();
                if ij.len() != 2 {
                    return Err(bad("coefficient key"));
                }
                let c: f64 = value.parse().map_err(|_| bad("coefficient"))?;
                coefficients.insert((ij[0], ij[1]), T::c(c));
            }
            _ => {}
        }
    }
    let mut game = GameSpec::custom(coefficients, T::c(low), T::c(high))?;
    game.kind = kind;

    let body = fs::read_to_string(path)?;
    let mut actions = Vec::new();
    for (ln, line) in body.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: ln + 1, message: e.to_string() })?;
        if vals.len() != 3 {
            return Err(Error::Parse { line: ln + 1, message: "expected ax,ay,reward".into() });
        }
        let a = JointAction::new(T::c(vals[0]), T::c(vals[1]));
        let r = game.reward(a)?;
        // Single-precision tolerance: files written at f32 may be read at f64.
        if (r.f64() - vals[2]).abs() > 1e-5 * (1.0 + vals[2].abs()) {
            return Err(Error::Parse { line: ln + 1, message: "reward does not match the game".into() });
        }
        actions.push(a);
    }
    if let Some(n) = n {
        if n != actions.len() {
            return Err(Error::Shape { expected: n, got: actions.len() });
        }
    }
    OfflineDataset::from_actions(game, &actions, seed, law)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tp() -> GameSpec<f64> {
        GameSpec::twin_peaks(1.0, 4.0, 5.0).unwrap()
    }

    #[test]
    fn reward_examples() {
        let m = GameSpec::<f64>::multiplication();
        assert_eq!(m.reward(JointAction::new(0.5, -0.5)).unwrap(), -0.25);
        assert_eq!(tp().reward(JointAction::new(0.0, 0.0)).unwrap(), 0.0);
        let t = (3.0f64 / 8.0).sqrt();
        assert!((tp().reward(JointAction::new(t, t)).unwrap() - 9.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_is_a_domain_error() {
        let m = GameSpec::<f64>::multiplication();
        assert!(matches!(m.reward(JointAction::new(1.5, 0.0)), Err(Error::Domain(_))));
        assert!(matches!(m.reward_grad(JointAction::new(0.0, f64::NAN)), Err(Error::Domain(_))));
    }

    #[test]
    fn grad_examples() {
        let m = GameSpec::<f64>::multiplication();
        assert_eq!(m.reward_grad(JointAction::new(0.3, 0.7)).unwrap(), (0.7, 0.3));
        assert_eq!(tp().reward_grad(JointAction::new(0.0, 0.0)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn twin_peaks_expansion_and_validation() {
        let g = tp();
        assert_eq!(g.coefficients.len(), 4);
        assert_eq!(g.coefficients[&(2, 0)], -1.0);
        assert_eq!(g.coefficients[&(0, 2)], -1.0);
        assert_eq!(g.coefficients[&(2, 2)], -4.0);
        assert_eq!(g.coefficients[&(1, 1)], 5.0);
        assert!(GameSpec::twin_peaks(1.0, 4.0, 2.0).is_err());
        assert!(GameSpec::twin_peaks(0.0, 4.0, 5.0).is_err());
        assert!(GameSpec::twin_peaks(1.0, 0.0, 5.0).is_err());
        assert_eq!(GameSpec::<f64>::multiplication().coefficients, BTreeMap::from([((1, 1), 1.0)]));
    }

    #[test]
    fn twin_peaks_symmetric_optima() {
        let g = tp();
        for t in [0.1, 0.3, (3.0f64 / 8.0).sqrt(), 0.9] {
            assert_eq!(g.eval(t, t), g.eval(-t, -t));
        }
    }

    #[test]
    fn dataset_sizes_and_errors() {
        let g = GameSpec::<f64>::multiplication();
        assert!(matches!(gen_dataset(&g, 0, 1), Err(Error::InvalidArgument(_))));
        let ds = gen_dataset_with(&g, 1, DatasetLaw::Point { ax: 0.5, ay: 0.5 }, 3).unwrap();
        assert_eq!(ds.stats, ActionStats { mean_x: 0.5, mean_y: 0.5, var_x: 0.0, var_y: 0.0 });
    }

    #[test]
    fn uniform_dataset_moments() {
        let g = GameSpec::<f64>::multiplication();
        let ds = gen_dataset(&g, 4000, 11).unwrap();
        assert!(ds.stats.mean_x.abs() < 0.05 && ds.stats.mean_y.abs() < 0.05);
        assert!((ds.stats.var_x - 1.0 / 3.0).abs() < 0.05);
        assert!((ds.stats.var_y - 1.0 / 3.0).abs() < 0.05);
        let refit = ActionStats::fit(&ds.actions());
        assert!((refit.mean_x - ds.stats.mean_x).abs() <= 1e-12);
        assert!((refit.var_y - ds.stats.var_y).abs() <= 1e-12);
        assert!(ds.actions().iter().all(|&a| g.contains(a)));
    }

    #[test]
    fn centered_law_has_zero_mean() {
        let ds = gen_dataset_with(&tp(), 4000, DatasetLaw::CenteredUniform, 5).unwrap();
        assert!(ds.stats.mean_x.abs() < 1e-15 && ds.stats.mean_y.abs() < 1e-15);
        assert!((ds.stats.var_x - 1.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn clipped_gaussian_stays_in_bounds() {
        let law = DatasetLaw::ClippedGaussian { mean_x: 0.6, mean_y: 0.6, std_x: 0.5, std_y: 0.5 };
        let ds = gen_dataset_with(&tp(), 2000, law, 2).unwrap();
        assert!(ds.actions().iter().all(|&a| tp().contains(a)));
        assert!((ds.stats.mean_x - 0.55).abs() < 0.1);
    }

    #[test]
    fn same_seed_same_bits() {
        let g = GameSpec::<f64>::multiplication();
        let a = gen_dataset(&g, 500, 9).unwrap();
        let b = gen_dataset(&g, 500, 9).unwrap();
        assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = gen_dataset(&g, 500, 10).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn grid_optimum_examples() {
        let m = GameSpec::<f64>::multiplication();
        let (a, v) = grid_optimum(&m, 101).unwrap();
        assert_eq!((a.ax, a.ay, v), (-1.0, -1.0, 1.0));
        assert!(grid_optimum(&m, 1).is_err());
        // resolution 2 sees only the corners: max of xy there is 1, first at (-1,-1)
        let mut g = m.clone();
        g.coefficients = BTreeMap::from([((1, 0), 1.0), ((0, 1), 2.0)]);
        let (a, v) = grid_optimum(&g, 2).unwrap();
        assert_eq!((a.ax, a.ay, v), (1.0, 1.0, 3.0));
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let law = DatasetLaw::ClippedGaussian { mean_x: 0.1, mean_y: -0.2, std_x: 0.3, std_y: 0.4 };
        let ds = gen_dataset_with(&tp(), 37, law, 4).unwrap();
        write_dataset(&ds, &path).unwrap();
        let back: OfflineDataset<f64> = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 38);
    }
}
