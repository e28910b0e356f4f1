//! Feed-forward EDM denoiser with hand-written reverse-mode gradients.
//!
//! Network input per row is `[c_in * tau_hat | noise features | condition
//! embedding]`. Noise features are fixed sinusoids of `c_noise`; the condition
//! embedding is a learned affine map of the (standardized) condition, or a
//! learned null vector when the condition is absent or dropped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::rng;
use crate::scalar::{fmt_exact, silu, silu_grad, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Flattened trajectory dimension `d_tau`.
    pub dim: usize,
    /// Raw condition width; 0 for a purely unconditional model.
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub noise_emb_dim: usize,
    pub cond_emb_dim: usize,
}

impl DenoiserConfig {
    pub fn new(dim: usize, cond_dim: usize) -> Self {
        DenoiserConfig { dim, cond_dim, hidden: vec![64, 64], noise_emb_dim: 32, cond_emb_dim: 32 }
    }

    fn input_width(&self) -> usize {
        self.dim + self.noise_emb_dim + self.cond_emb_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamLayout {
    cond_w: usize,
    cond_b: usize,
    null: usize,
    layers: Vec<Dense>,
    total: usize,
}

impl ParamLayout {
    fn new(cfg: &DenoiserConfig) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let cond_w = take(cfg.cond_dim * cfg.cond_emb_dim);
        let cond_b = take(cfg.cond_emb_dim);
        let null = take(cfg.cond_emb_dim);
        let mut widths = vec![cfg.input_width()];
        widths.extend(&cfg.hidden);
        widths.push(cfg.dim);
        let layers = widths
            .windows(2)
            .map(|w| {
                let wo = take(w[0] * w[1]);
                let bo = take(w[1]);
                Dense { w: wo, b: bo, fan_in: w[0], fan_out: w[1] }
            })
            .collect();
        ParamLayout { cond_w, cond_b, null, layers, total: off }
    }
}

/// How each row of a batch is conditioned.
#[derive(Debug, Clone, Copy)]
pub enum CondInput<'a, T> {
    /// Learned null embedding for every row.
    Null,
    /// One condition vector shared by every row.
    Shared(&'a [T]),
    /// Per-row conditions; rows flagged in `dropped` use the null embedding.
    Rows { cond: ArrayView2<'a, T>, dropped: Option<&'a [bool]> },
}

/// EDM preconditioning coefficients for one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond<T> {
    pub c_skip: T,
    pub c_out: T,
    pub c_in: T,
    pub c_noise: T,
}

impl<T: Scalar> Precond<T> {
    pub fn new(sigma: T, sigma_data: T) -> Self {
        let s2 = sigma * sigma;
        let d2 = sigma_data * sigma_data;
        let root = (s2 + d2).sqrt();
        Precond {
            c_skip: d2 / (s2 + d2),
            c_out: sigma * sigma_data / root,
            c_in: T::one() / root,
            c_noise: sigma.ln() / T::c(4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<T> {
    pub config: DenoiserConfig,
    pub sigma_data: T,
    /// Affine standardization applied to raw conditions: `(y - shift) / scale`.
    pub cond_shift: Vec<T>,
    pub cond_scale: Vec<T>,
    /// Set when trained with condition dropout 1: every condition maps to null.
    pub null_only: bool,
    params: Vec<T>,
    layout: ParamLayout,
}

struct Tape<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

/// Inputs of one loss evaluation. Every random quantity is explicit so the
/// loss is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct LossBatch<T> {
    pub clean: Array2<T>,
    pub sigma: Array1<T>,
    pub noise: Array2<T>,
    pub cond: Option<Array2<T>>,
    pub dropped: Vec<bool>,
}

impl<T: Scalar> DenoiserModel<T> {
    /// LeCun-normal weights, zero biases and a zero null embedding.
    pub fn new(config: DenoiserConfig, sigma_data: T, seed: u64) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::InvalidArgument("denoiser dimension must be positive".into()));
        }
        if !(sigma_data > T::zero() && sigma_data.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_data must be positive, got {sigma_data}")));
        }
        if config.noise_emb_dim % 2 != 0 {
            return Err(Error::InvalidArgument("noise embedding width must be even".into()));
        }
        let layout = ParamLayout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut r = rng::stream(seed, "denoiser-init", 0);
        let mut fill = |off: usize, n: usize, scale: f64, r: &mut rng::StreamRng| {
            for p in &mut params[off..off + n] {
                *p = T::c(scale * rng::normal(r));
            }
        };
        if config.cond_dim > 0 {
            fill(layout.cond_w, config.cond_dim * config.cond_emb_dim, 1.0 / (config.cond_dim as f64).sqrt(), &mut r);
        }
        for d in &layout.layers {
            fill(d.w, d.fan_in * d.fan_out, 1.0 / (d.fan_in as f64).sqrt(), &mut r);
        }
        Ok(DenoiserModel {
            cond_shift: vec![T::zero(); config.cond_dim],
            cond_scale: vec![T::one(); config.cond_dim],
            null_only: false,
            config,
            sigma_data,
            params,
            layout,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Fits the condition standardization to a label matrix.
    pub fn set_cond_standardization(&mut self, labels: ArrayView2<T>) -> Result<()> {
        check_len(self.config.cond_dim, labels.ncols())?;
        let n = T::from_usize_lossy(labels.nrows().max(1));
        for (j, col) in labels.axis_iter(Axis(1)).enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|&v| (v - mean).powi(2)).sum::<T>() / n;
            self.cond_shift[j] = mean;
            self.cond_scale[j] = if var > T::zero() { var.sqrt() } else { T::one() };
        }
        Ok(())
    }

    fn mat(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((rows, cols), &self.params[off..off + rows * cols]).unwrap()
    }

    fn vec(&self, off: usize, n: usize) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.params[off..off + n])
    }

    fn noise_features(&self, freqs: &[T], c_noise: T, out: &mut [T]) {
        let k = freqs.len();
        for (i, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (f * c_noise).sin_cos();
            out[i] = sin;
            out[k + i] = cos;
        }
    }

    /// Geometric frequencies from 0.5 to 16.
    fn frequencies(&self) -> Vec<T> {
        let k = self.config.noise_emb_dim / 2;
        (0..k)
            .map(|i| {
                let t = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
                T::c(0.5 * 32f64.powf(t))
            })
            .collect()
    }

    fn embed_condition(&self, cond: CondInput<'_, T>, rows: usize) -> Result<Array2<T>> {
        let e = self.config.cond_emb_dim;
        let c = self.config.cond_dim;
        let null = self.vec(self.layout.null, e);
        let mut out = Array2::zeros((rows, e));
        let standardize = |y: ArrayView1<T>| -> Array1<T> {
            Array1::from_iter(y.iter().enumerate().map(|(j, &v)| (v - self.cond_shift[j]) / self.cond_scale[j]))
        };
        let project = |y: Array1<T>| -> Array1<T> {
            y.dot(&self.mat(self.layout.cond_w, c, e)) + &self.vec(self.layout.cond_b, e)
        };
        let cond = if self.null_only { CondInput::Null } else { cond };
        match cond {
            CondInput::Null => out.rows_mut().into_iter().for_each(|mut r| r.assign(&null)),
            CondInput::Shared(y) => {
                check_len(c, y.len())?;
                let emb = project(standardize(ArrayView1::from(y)));
                out.rows_mut().into_iter().for_each(|mut r| r.assign(&emb));
            }
            CondInput::Rows { cond, dropped } => {
                check_len(c, cond.ncols())?;
                check_len(rows, cond.nrows())?;
                if let Some(d) = dropped {
                    check_len(rows, d.len())?;
                }
                for (i, mut r) in out.rows_mut().into_iter().enumerate() {
                    if dropped.is_some_and(|d| d[i]) {
                        r.assign(&null);
                    } else {
                        r.assign(&project(standardize(cond.row(i))));
                    }
                }
            }
        }
        Ok(out)
    }

    fn build_input(&self, x: ArrayView2<T>, pre: &[Precond<T>], cond: CondInput<'_, T>) -> Result<Array2<T>> {
        let (b, d) = x.dim();
        check_len(self.config.dim, d)?;
        let ne = self.config.noise_emb_dim;
        let mut input = Array2::zeros((b, self.config.input_width()));
        let mut feats = vec![T::zero(); ne];
        let freqs = self.frequencies();
        for i in 0..b {
            let p = pre[i];
            let mut row = input.row_mut(i);
            for j in 0..d {
                row[j] = p.c_in * x[[i, j]];
            }
            self.noise_features(&freqs, p.c_noise, &mut feats);
            for j in 0..ne {
                row[d + j] = feats[j];
            }
        }
        let emb = self.embed_condition(cond, b)?;
        input.slice_mut(s![.., d + ne..]).assign(&emb);
        Ok(input)
    }

    fn network(&self, input: Array2<T>, keep_tape: bool) -> (Array2<T>, Option<Tape<T>>) {
        let n_layers = self.layout.layers.len();
        let mut tape = Tape { inputs: Vec::new(), pre: Vec::new() };
        let mut a = input;
        for (l, d) in self.layout.layers.iter().enumerate() {
            let z = a.dot(&self.mat(d.w, d.fan_in, d.fan_out)) + &self.vec(d.b, d.fan_out);
            if l + 1 == n_layers {
                if keep_tape {
                    tape.inputs.push(a);
                }
                return (z, keep_tape.then_some(tape));
            }
            let next = z.mapv(silu);
            if keep_tape {
                tape.inputs.push(a);
                tape.pre.push(z);
            }
            a = next;
        }
        unreachable!("network has at least one layer")
    }

    /// Raw network output `F` for a batch.
    fn raw_output(&self, x: ArrayView2<T>, pre: &[Precond<T>], cond: CondInput<'_, T>) -> Result<Array2<T>> {
        let input = self.build_input(x, pre, cond)?;
        Ok(self.network(input, false).0)
    }

    /// Preconditioned denoiser `D(x; sigma)` for a batch sharing one noise level.
    pub fn denoise_batch(&self, x: ArrayView2<T>, sigma: T, cond: CondInput<'_, T>) -> Result<Array2<T>> {
        if !(sigma > T::zero()) {
            return Err(Error::InvalidArgument(format!("denoise needs sigma > 0, got {sigma}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("denoiser input".into()));
        }
        let p = Precond::new(sigma, self.sigma_data);
        let pre = vec![p; x.nrows()];
        let f = self.raw_output(x, &pre, cond)?;
        Ok(x.mapv(|v| p.c_skip * v) + &f.mapv(|v| p.c_out * v))
    }

    /// Single-trajectory form of [`denoise_batch`](Self::denoise_batch).
    pub fn denoise(&self, tau_hat: &[T], sigma: T, cond: Option<&[T]>) -> Result<Vec<T>> {
        let x = ArrayView2::from_shape((1, tau_hat.len()), tau_hat).map_err(|_| Error::Shape {
            expected: self.dim(),
            got: tau_hat.len(),
        })?;
        let c = match cond {
            Some(y) => CondInput::Shared(y),
            None => CondInput::Null,
        };
        Ok(self.denoise_batch(x, sigma, c)?.into_raw_vec_and_offset().0)
    }

    fn loss_parts(&self, batch: &LossBatch<T>) -> Result<(Array2<T>, Array2<T>, Vec<Precond<T>>)> {
        let (b, d) = batch.clean.dim();
        check_len(self.config.dim, d)?;
        check_len(b, batch.sigma.len())?;
        check_len(b, batch.dropped.len())?;
        let pre: Vec<Precond<T>> = batch.sigma.iter().map(|&s| Precond::new(s, self.sigma_data)).collect();
        let mut noisy = batch.clean.clone();
        let mut target = Array2::zeros((b, d));
        for i in 0..b {
            let p = pre[i];
            for j in 0..d {
                let z = batch.clean[[i, j]] + batch.sigma[i] * batch.noise[[i, j]];
                noisy[[i, j]] = z;
                target[[i, j]] = (batch.clean[[i, j]] - p.c_skip * z) / p.c_out;
            }
        }
        Ok((noisy, target, pre))
    }

    fn cond_input<'a>(&self, batch: &'a LossBatch<T>) -> CondInput<'a, T> {
        match &batch.cond {
            Some(c) => CondInput::Rows { cond: c.view(), dropped: Some(&batch.dropped) },
            None => CondInput::Null,
        }
    }

    /// EDM-weighted loss `mean(lambda(sigma) * (D - clean)^2)`, which equals the
    /// mean squared error of the raw output against its effective target.
    pub fn loss(&self, batch: &LossBatch<T>) -> Result<T> {
        let (noisy, target, pre) = self.loss_parts(batch)?;
        let f = self.raw_output(noisy.view(), &pre, self.cond_input(batch))?;
        let n = T::from_usize_lossy(f.len());
        Ok((&f - &target).mapv(|v| v * v).sum() / n)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &LossBatch<T>) -> Result<(T, Vec<T>)> {
        let (noisy, target, pre) = self.loss_parts(batch)?;
        let cond = self.cond_input(batch);
        let input = self.build_input(noisy.view(), &pre, cond)?;
        let (f, tape) = self.network(input, true);
        let tape = tape.expect("tape requested");
        let n = T::from_usize_lossy(f.len());
        let diff = &f - &target;
        let loss = diff.mapv(|v| v * v).sum() / n;

        let mut grad = vec![T::zero(); self.params.len()];
        let mut delta = diff.mapv(|v| T::c(2.0) * v / n);
        let n_layers = self.layout.layers.len();
        for l in (0..n_layers).rev() {
            let d = &self.layout.layers[l];
            let gw = tape.inputs[l].t().dot(&delta);
            add_into(&mut grad[d.w..d.w + d.fan_in * d.fan_out], gw.view());
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grad[d.b..d.b + d.fan_out].iter_mut().zip(gb.iter()) {
                *g += *v;
            }
            let da = delta.dot(&self.mat(d.w, d.fan_in, d.fan_out).t());
            if l > 0 {
                delta = da * &tape.pre[l - 1].mapv(silu_grad);
            } else {
                delta = da;
            }
        }

        // delta now holds d loss / d input; route the embedding columns
        let dim = self.config.dim;
        let ne = self.config.noise_emb_dim;
        let e = self.config.cond_emb_dim;
        let c = self.config.cond_dim;
        let d_emb = delta.slice(s![.., dim + ne..]);
        for i in 0..d_emb.nrows() {
            let row = d_emb.row(i);
            let use_null = self.null_only || batch.cond.is_none() || batch.dropped[i];
            if use_null {
                for (g, v) in grad[self.layout.null..self.layout.null + e].iter_mut().zip(row.iter()) {
                    *g += *v;
                }
            } else {
                let y = batch.cond.as_ref().unwrap().row(i);
                for (g, v) in grad[self.layout.cond_b..self.layout.cond_b + e].iter_mut().zip(row.iter()) {
                    *g += *v;
                }
                for k in 0..c {
                    let yk = (y[k] - self.cond_shift[k]) / self.cond_scale[k];
                    let base = self.layout.cond_w + k * e;
                    for (g, v) in grad[base..base + e].iter_mut().zip(row.iter()) {
                        *g += yk * *v;
                    }
                }
            }
        }
        Ok((loss, grad))
    }

    /// Text checkpoint: header, standardization and every parameter with 17
    /// significant digits.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::from("coda_denoiser 1\n");
        writeln!(out, "dim {}", c.dim).unwrap();
        writeln!(out, "cond_dim {}", c.cond_dim).unwrap();
        let hidden: Vec<String> = c.hidden.iter().map(|h| h.to_string()).collect();
        writeln!(out, "hidden {}", hidden.join(" ")).unwrap();
        writeln!(out, "noise_emb_dim {}", c.noise_emb_dim).unwrap();
        writeln!(out, "cond_emb_dim {}", c.cond_emb_dim).unwrap();
        writeln!(out, "sigma_data {}", fmt_exact(self.sigma_data)).unwrap();
        let join = |v: &[T]| v.iter().map(|x| fmt_exact(*x)).collect::<Vec<_>>().join(" ");
        writeln!(out, "cond_shift {}", join(&self.cond_shift)).unwrap();
        writeln!(out, "cond_scale {}", join(&self.cond_scale)).unwrap();
        writeln!(out, "null_only {}", u8::from(self.null_only)).unwrap();
        writeln!(out, "params {}", self.params.len()).unwrap();
        for p in &self.params {
            writeln!(out, "{}", fmt_exact(*p)).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
            let (ln, line) = lines.next().ok_or(Error::Parse { line: 0, message: format!("missing `{key}`") })?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::Parse { line: ln + 1, message: format!("expected `{key}`") });
            }
            Ok((ln + 1, parts.map(str::to_string).collect()))
        };
        let (_, magic) = field("coda_denoiser")?;
        if magic != ["1"] {
            return Err(Error::Parse { line: 1, message: "unsupported checkpoint version".into() });
        }
        fn nums<U: std::str::FromStr>((ln, v): (usize, Vec<String>)) -> Result<Vec<U>> {
            v.iter()
                .map(|s| s.parse::<U>().map_err(|_| Error::Parse { line: ln, message: format!("bad number `{s}`") }))
                .collect()
        }
        fn one<U: std::str::FromStr + Copy>(f: (usize, Vec<String>)) -> Result<U> {
            let ln = f.0;
            nums::<U>(f)?.first().copied().ok_or(Error::Parse { line: ln, message: "missing value".into() })
        }
        let dim = one::<usize>(field("dim")?)?;
        let cond_dim = one::<usize>(field("cond_dim")?)?;
        let hidden = nums::<usize>(field("hidden")?)?;
        let noise_emb_dim = one::<usize>(field("noise_emb_dim")?)?;
        let cond_emb_dim = one::<usize>(field("cond_emb_dim")?)?;
        let sigma_data = one::<f64>(field("sigma_data")?)?;
        let cond_shift = nums::<f64>(field("cond_shift")?)?;
        let cond_scale = nums::<f64>(field("cond_scale")?)?;
        let null_only = one::<u8>(field("null_only")?)? == 1;
        let count = one::<usize>(field("params")?)?;
        let config = DenoiserConfig { dim, cond_dim, hidden, noise_emb_dim, cond_emb_dim };
        let mut model = DenoiserModel::new(config, T::c(sigma_data), 0)?;
        check_len(model.params.len(), count)?;
        check_len(cond_dim, cond_shift.len())?;
        check_len(cond_dim, cond_scale.len())?;
        model.cond_shift = cond_shift.into_iter().map(T::c).collect();
        model.cond_scale = cond_scale.into_iter().map(T::c).collect();
        model.null_only = null_only;
        for (i, p) in model.params.iter_mut().enumerate() {
            let (ln, line) = lines.next().ok_or(Error::Parse { line: 0, message: "truncated parameters".into() })?;
            let v: f64 = line.trim().parse().map_err(|_| Error::Parse { line: ln + 1, message: format!("bad parameter {i}") })?;
            *p = T::c(v);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: ArrayView2<T>) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += *s;
    }
}

/// Draws a loss batch from a diffusion-space data matrix.
pub fn draw_loss_batch<T: Scalar, R: Rng + ?Sized>(
    data: ArrayView2<T>,
    cond: Option<ArrayView2<T>>,
    batch: usize,
    law: &super::TrainNoiseLaw<T>,
    cond_dropout: f64,
    rng: &mut R,
) -> LossBatch<T> {
    let n = data.nrows();
    let d = data.ncols();
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
    let mut clean = Array2::zeros((batch, d));
    for (mut row, &i) in clean.rows_mut().into_iter().zip(&idx) {
        row.assign(&data.row(i));
    }
    let sigma = Array1::from_iter((0..batch).map(|_| law.sample(rng)));
    let mut noise = Array2::zeros((batch, d));
    fill_normal(noise.view_mut(), rng);
    let cond = cond.map(|c| {
        let mut out = Array2::zeros((batch, c.ncols()));
        for (mut row, &i) in out.rows_mut().into_iter().zip(&idx) {
            row.assign(&c.row(i));
        }
        out
    });
    let dropped = (0..batch).map(|_| rng.random::<f64>() < cond_dropout).collect();
    LossBatch { clean, sigma, noise, cond, dropped }
}

pub(crate) fn fill_normal<T: Scalar, R: Rng + ?Sized>(mut m: ArrayViewMut2<T>, rng: &mut R) {
    m.iter_mut().for_each(|v| *v = T::c(rng::normal(rng)));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(cond_dim: usize) -> DenoiserModel<f64> {
        let cfg = DenoiserConfig { dim: 3, cond_dim, hidden: vec![6], noise_emb_dim: 4, cond_emb_dim: 3 };
        let mut m = DenoiserModel::new(cfg, 0.8, 5).unwrap();
        // non-trivial biases and null vector so every parameter has a gradient path
        let mut r = rng::stream(9, "perturb", 0);
        m.params_mut().iter_mut().for_each(|p| *p += 0.3 * rng::normal(&mut r));
        m
    }

    fn toy_batch(cond_dim: usize) -> LossBatch<f64> {
        let mut r = rng::stream(1, "batch", 0);
        let data = Array2::from_shape_fn((16, 3), |_| rng::normal(&mut r));
        let cond = Array2::from_shape_fn((16, cond_dim.max(1)), |_| rng::normal(&mut r));
        let law = super::super::TrainNoiseLaw::default();
        let cond = (cond_dim > 0).then_some(cond);
        draw_loss_batch(data.view(), cond.as_ref().map(|c| c.view()), 8, &law, 0.3, &mut r)
    }

    #[test]
    fn precond_algebra() {
        let p = Precond::new(0.5f64, 0.5);
        assert_eq!(p.c_skip, 0.5);
        let tiny = Precond::new(1e-9f64, 1.0);
        assert!((tiny.c_skip - 1.0).abs() < 1e-15);
        assert!(tiny.c_out < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for cond_dim in [0, 2] {
            let model = toy(cond_dim);
            let batch = toy_batch(cond_dim);
            assert!(batch.dropped.iter().any(|&d| d) || cond_dim == 0);
            let (_, grad) = model.loss_and_grad(&batch).unwrap();
            let h = 1e-4;
            for i in 0..model.num_params() {
                let mut plus = model.clone();
                plus.params_mut()[i] += h;
                let mut minus = model.clone();
                minus.params_mut()[i] -= h;
                let fd = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(rel < 1e-3, "param {i}: fd {fd} vs analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn zero_network_output_gives_skip_connection() {
        let cfg = DenoiserConfig::new(2, 0);
        let mut m = DenoiserModel::<f64>::new(cfg, 1.0, 0).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let out = m.denoise(&[0.7, -1.2], 1e-6, None).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-9 && (out[1] + 1.2).abs() < 1e-9);
        let out = m.denoise(&[0.7, -1.2], 1.0, None).unwrap();
        assert!((out[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn denoise_rejects_bad_input() {
        let m = DenoiserModel::<f64>::new(DenoiserConfig::new(2, 0), 1.0, 0).unwrap();
        assert!(m.denoise(&[0.0, 0.0], 0.0, None).is_err());
        assert!(matches!(m.denoise(&[f64::NAN, 0.0], 1.0, None), Err(Error::Numeric(_))));
        assert!(matches!(m.denoise(&[0.0], 1.0, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn denoise_is_deterministic_and_row_independent() {
        let m = toy(2);
        let mut r = rng::stream(4, "x", 0);
        let x = Array2::from_shape_fn((5, 3), |_| rng::normal(&mut r));
        let y = [0.3, -0.1];
        let full = m.denoise_batch(x.view(), 0.4, CondInput::Shared(&y)).unwrap();
        let again = m.denoise_batch(x.view(), 0.4, CondInput::Shared(&y)).unwrap();
        assert_eq!(full, again);
        let single = m.denoise(x.row(3).as_slice().unwrap(), 0.4, Some(&y)).unwrap();
        assert_eq!(full.row(3).to_vec(), single);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = toy(2);
        m.cond_shift = vec![0.1, -0.2];
        m.cond_scale = vec![2.0, 0.5];
        m.null_only = true;
        let back = DenoiserModel::<f64>::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(DenoiserModel::<f64>::from_text("coda_denoiser 2\n").is_err());
    }
}
