//! Maps between bounded trajectory coordinates and the unconstrained space the
//! diffusion model works in.
//!
//! [`BoundedMap`] is the affine-then-logit map for a known interval.
//! [`CdfNormalizer`] first uniformizes each dimension with its empirical CDF
//! and then applies the logit, which also removes skew.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{check_len, Error, Result};
use crate::scalar::{fmt_exact, logit, sigmoid, Scalar};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundedMap<T> {
    pub low: T,
    pub high: T,
    pub epsilon: T,
}

impl<T: Scalar> BoundedMap<T> {
    pub fn new(low: T, high: T) -> Result<Self> {
        Self::with_epsilon(low, high, T::c(DEFAULT_EPSILON))
    }

    pub fn with_epsilon(low: T, high: T, epsilon: T) -> Result<Self> {
        if !(low < high) {
            return Err(Error::InvalidArgument(format!("bounded map needs low < high, got [{low}, {high}]")));
        }
        if !(epsilon > T::zero() && epsilon < T::c(0.5)) {
            return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
        }
        Ok(BoundedMap { low, high, epsilon })
    }

    /// `logit(clip((x - low) / (high - low), eps, 1 - eps))`.
    pub fn forward(&self, x: T) -> T {
        let u = (x - self.low) / (self.high - self.low);
        let u = u.max(self.epsilon).min(T::one() - self.epsilon);
        logit(u)
    }

    /// `low + (high - low) * sigmoid(z)`.
    pub fn inverse(&self, z: T) -> Result<T> {
        if !z.is_finite() {
            return Err(Error::Numeric(format!("bounded inverse of {z}")));
        }
        let x = self.low + (self.high - self.low) * sigmoid(z);
        Ok(x.max(self.low).min(self.high))
    }

    /// `d inverse / dz` at `z`.
    pub fn inverse_derivative(&self, z: T) -> T {
        let s = sigmoid(z);
        (self.high - self.low) * s * (T::one() - s)
    }
}

/// Per-dimension empirical CDF followed by a logit.
///
/// The CDF interpolates linearly between order statistics placed at
/// `k / (n - 1)`, so the sample minimum maps to 0, the maximum to 1 and the
/// map is continuous and increasing in between.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfNormalizer<T> {
    supports: Vec<Vec<T>>,
    pub epsilon: T,
}

impl<T: Scalar> CdfNormalizer<T> {
    /// Fits one sorted support per column of `data` (rows are samples).
    pub fn fit(data: ArrayView2<T>) -> Result<Self> {
        Self::fit_with_epsilon(data, T::c(DEFAULT_EPSILON))
    }

    pub fn fit_with_epsilon(data: ArrayView2<T>, epsilon: T) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "cdf normalizer needs at least 2 samples per dimension, got {}",
                data.nrows()
            )));
        }
        if !(epsilon > T::zero() && epsilon < T::c(0.5)) {
            return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
        }
        let mut supports = Vec::with_capacity(data.ncols());
        for col in data.axis_iter(Axis(1)) {
            let mut s = col.to_vec();
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("cdf normalizer input".into()));
            }
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            supports.push(s);
        }
        Ok(CdfNormalizer { supports, epsilon })
    }

    pub fn dim(&self) -> usize {
        self.supports.len()
    }

    pub fn support(&self, d: usize) -> &[T] {
        &self.supports[d]
    }

    /// A dimension whose samples all share one value. Its forward image is 0.5.
    pub fn is_constant(&self, d: usize) -> bool {
        let s = &self.supports[d];
        s[0] == s[s.len() - 1]
    }

    pub fn constant_dims(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&d| self.is_constant(d)).collect()
    }

    /// Empirical CDF of dimension `d` at `x`, in `[0, 1]`.
    pub fn cdf(&self, d: usize, x: T) -> T {
        let s = &self.supports[d];
        let n = s.len();
        if self.is_constant(d) {
            return T::c(0.5);
        }
        if x <= s[0] {
            return T::zero();
        }
        if x >= s[n - 1] {
            return T::one();
        }
        // last order statistic <= x; x < s[n-1] guarantees k + 1 < n
        let k = s.partition_point(|&v| v <= x) - 1;
        let frac = (x - s[k]) / (s[k + 1] - s[k]);
        (T::from_usize_lossy(k) + frac) / T::from_usize_lossy(n - 1)
    }

    /// Interpolated quantile of dimension `d` at `u` (clamped into `[0, 1]`).
    pub fn quantile(&self, d: usize, u: T) -> T {
        let s = &self.supports[d];
        let n = s.len();
        if self.is_constant(d) {
            return s[0];
        }
        let u = u.max(T::zero()).min(T::one());
        let (k, frac) = self.segment(n, u);
        s[k] + frac * (s[k + 1] - s[k])
    }

    fn segment(&self, n: usize, u: T) -> (usize, T) {
        let pos = u * T::from_usize_lossy(n - 1);
        let k = pos.floor().to_usize().unwrap_or(0).min(n - 2);
        (k, pos - T::from_usize_lossy(k))
    }

    /// Slope of the quantile function at `u`; outside `[0, 1]` the slope of the
    /// end segment is used.
    pub fn quantile_slope(&self, d: usize, u: T) -> T {
        let s = &self.supports[d];
        let n = s.len();
        if self.is_constant(d) {
            return T::zero();
        }
        let (k, _) = self.segment(n, u.max(T::zero()).min(T::one()));
        (s[k + 1] - s[k]) * T::from_usize_lossy(n - 1)
    }

    fn forward_scalar(&self, d: usize, x: T) -> T {
        let u = self.cdf(d, x).max(self.epsilon).min(T::one() - self.epsilon);
        logit(u)
    }

    fn inverse_scalar(&self, d: usize, z: T) -> T {
        self.quantile(d, sigmoid(z))
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        check_len(self.dim(), x.len())?;
        Ok(x.iter().enumerate().map(|(d, &v)| self.forward_scalar(d, v)).collect())
    }

    pub fn inverse(&self, z: &[T]) -> Result<Vec<T>> {
        check_len(self.dim(), z.len())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cdf inverse input".into()));
        }
        Ok(z.iter().enumerate().map(|(d, &v)| self.inverse_scalar(d, v)).collect())
    }

    /// `d x_d / d z_d` of the inverse map at diffusion-space value `z`.
    pub fn inverse_derivative(&self, d: usize, z: T) -> T {
        let u = sigmoid(z);
        self.quantile_slope(d, u) * u * (T::one() - u)
    }

    /// Row-wise [`forward`](Self::forward) over a sample matrix.
    pub fn forward_matrix(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        check_len(self.dim(), x.ncols())?;
        let mut out = x.to_owned();
        for (d, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| self.forward_scalar(d, v));
        }
        Ok(out)
    }

    pub fn inverse_matrix(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        check_len(self.dim(), z.ncols())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cdf inverse input".into()));
        }
        let mut out = z.to_owned();
        for (d, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| self.inverse_scalar(d, v));
        }
        Ok(out)
    }

    /// Text form: one line per dimension listing the sorted support.
    pub fn to_text(&self) -> String {
        let mut out = String::from("cdf_normalizer 1\n");
        writeln!(out, "epsilon {}", fmt_exact(self.epsilon)).unwrap();
        writeln!(out, "dims {}", self.dim()).unwrap();
        for s in &self.supports {
            write!(out, "{}", s.len()).unwrap();
            for v in s {
                write!(out, " {}", fmt_exact(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or(Error::Parse { line: 0, message: format!("missing {what}") })
        };
        let (_, magic) = next("header")?;
        if magic.trim() != "cdf_normalizer 1" {
            return Err(Error::Parse { line: 1, message: format!("unexpected header `{magic}`") });
        }
        let parse_kv = |(ln, line): (usize, &str), key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or(Error::Parse { line: ln + 1, message: format!("expected `{key}`") })
        };
        let eps_line = next("epsilon")?;
        let eps_ln = eps_line.0 + 1;
        let epsilon: f64 = parse_kv(eps_line, "epsilon")?
            .parse()
            .map_err(|_| Error::Parse { line: eps_ln, message: "bad epsilon".into() })?;
        let dims_line = next("dims")?;
        let dims_ln = dims_line.0 + 1;
        let dims: usize = parse_kv(dims_line, "dims")?
            .parse()
            .map_err(|_| Error::Parse { line: dims_ln, message: "bad dims".into() })?;
        let mut supports = Vec::with_capacity(dims);
        for _ in 0..dims {
            let (ln, line) = next("support")?;
            let mut parts = line.split_whitespace();
            let bad = || Error::Parse { line: ln + 1, message: "bad support line".into() };
            let n: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let vals: Vec<T> = parts.map(|p| p.parse::<f64>().map(T::c)).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            if vals.len() != n || n < 2 || vals.windows(2).any(|w| w[0] > w[1]) {
                return Err(bad());
            }
            supports.push(vals);
        }
        Ok(CdfNormalizer { supports, epsilon: T::c(epsilon) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
