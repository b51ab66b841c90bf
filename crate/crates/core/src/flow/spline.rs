//! Monotone rational-quadratic splines with identity tails.
//!
//! Each transformed coordinate is parameterized by `3K - 1` unconstrained
//! values laid out as `[widths (K), heights (K), interior derivatives (K-1)]`.
//! Widths and heights go through a softmax with a floor, the derivatives
//! through a shifted softplus with a floor. The shift makes an all-zero
//! parameter vector produce unit derivatives, so zero parameters give the
//! exact identity map. Outside `[-B, B]` the map is the identity.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, CustomOp};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            bins: 11,
            tail_bound: 10.0,
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineConfig {
    pub fn params_per_dim(&self) -> usize {
        3 * self.bins - 1
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.bins as f64;
        if self.bins < 1
            || !(self.tail_bound > 0.0)
            || self.min_bin_width * k >= 1.0
            || self.min_bin_height * k >= 1.0
            || !(self.min_derivative > 0.0 && self.min_derivative < 1.0)
        {
            return Err(Error::Config(format!(
                "invalid spline configuration {self:?}"
            )));
        }
        Ok(())
    }

    /// Softplus offset that maps a zero parameter to derivative exactly 1.
    fn derivative_shift(&self) -> f64 {
        (1.0 - self.min_derivative).exp_m1().ln()
    }
}

/// One coordinate's spline: the raw parameters plus the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RQSpline {
    pub raw: Vec<f64>,
    pub config: SplineConfig,
}

impl RQSpline {
    pub fn new(raw: Vec<f64>, config: SplineConfig) -> Result<Self> {
        if raw.len() != config.params_per_dim() {
            return Err(Error::Shape(format!(
                "spline needs {} parameters, got {}",
                config.params_per_dim(),
                raw.len()
            )));
        }
        Ok(Self { raw, config })
    }

    pub fn identity(config: SplineConfig) -> Self {
        Self {
            raw: vec![0.0; config.params_per_dim()],
            config,
        }
    }

    pub fn forward(&self, x: f64) -> (f64, f64) {
        rqs_forward(x, &self.raw, &self.config)
    }

    pub fn inverse(&self, y: f64) -> (f64, f64) {
        rqs_inverse(y, &self.raw, &self.config)
    }

    /// Knot positions `(xs, ys, derivatives)`, each of length `K + 1`.
    pub fn knots(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let k = knots(&self.raw, &self.config);
        (k.xs, k.ys, k.ds)
    }
}

struct Knots {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
    /// Softmax outputs, kept for the backward pass.
    sw: Vec<f64>,
    sh: Vec<f64>,
}

fn softmax(u: &[f64]) -> Vec<f64> {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Cumulative knots in `[-B, B]` from softmax fractions with a floor.
fn cum_knots(frac: &[f64], min: f64, bound: f64) -> Vec<f64> {
    let k = frac.len();
    let mut out = Vec::with_capacity(k + 1);
    out.push(-bound);
    let mut acc = 0.0;
    for f in &frac[..k - 1] {
        acc += min + (1.0 - min * k as f64) * f;
        out.push(-bound + 2.0 * bound * acc);
    }
    out.push(bound);
    out
}

fn knots(raw: &[f64], cfg: &SplineConfig) -> Knots {
    let k = cfg.bins;
    let sw = softmax(&raw[..k]);
    let sh = softmax(&raw[k..2 * k]);
    let shift = cfg.derivative_shift();
    let mut ds = Vec::with_capacity(k + 1);
    ds.push(1.0);
    ds.extend(
        raw[2 * k..]
            .iter()
            .map(|u| cfg.min_derivative + softplus(u + shift)),
    );
    ds.push(1.0);
    Knots {
        xs: cum_knots(&sw, cfg.min_bin_width, cfg.tail_bound),
        ys: cum_knots(&sh, cfg.min_bin_height, cfg.tail_bound),
        ds,
        sw,
        sh,
    }
}

/// Index of the bin containing `v` (the last bin includes its right edge).
fn find_bin(edges: &[f64], v: f64) -> usize {
    let k = edges.len() - 1;
    let mut i = 0;
    while i + 1 < k && v >= edges[i + 1] {
        i += 1;
    }
    i
}

trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn c(v: f64) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Forward-mode dual number over the seven local bin quantities.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 7],
}

impl Dual {
    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 7];
        d[i] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Self { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a -= b);
        Self { v: self.v - o.v, d }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; 7];
        for i in 0..7 {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; 7];
        for i in 0..7 {
            d[i] = (self.d[i] - v * o.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|a| *a = -*a);
        Self { v: -self.v, d }
    }
}

impl Scalar for Dual {
    fn c(v: f64) -> Self {
        Self { v, d: [0.0; 7] }
    }
    fn ln(self) -> Self {
        let inv = 1.0 / self.v;
        let mut d = self.d;
        d.iter_mut().for_each(|a| *a *= inv);
        Self { v: self.v.ln(), d }
    }
}

/// Rational-quadratic map inside one bin and its log-derivative.
///
/// Arguments: input, bin left edge, bin width, bin bottom, bin height,
/// derivative at the left and right knots.
fn in_bin<T: Scalar>(x: T, x0: T, w: T, y0: T, h: T, d0: T, d1: T) -> (T, T) {
    let one = T::c(1.0);
    let two = T::c(2.0);
    let s = h / w;
    let xi = (x - x0) / w;
    let t = xi * (one - xi);
    let num = h * (s * xi * xi + d0 * t);
    let den = s + (d1 + d0 - two * s) * t;
    let y = y0 + num / den;
    let omx = one - xi;
    let dnum = d1 * xi * xi + two * s * t + d0 * omx * omx;
    let logdet = two * s.ln() + dnum.ln() - two * den.ln();
    (y, logdet)
}

pub fn rqs_forward(x: f64, raw: &[f64], cfg: &SplineConfig) -> (f64, f64) {
    let b = cfg.tail_bound;
    if !(-b..=b).contains(&x) {
        return (x, 0.0);
    }
    let k = knots(raw, cfg);
    let i = find_bin(&k.xs, x);
    in_bin(
        x,
        k.xs[i],
        k.xs[i + 1] - k.xs[i],
        k.ys[i],
        k.ys[i + 1] - k.ys[i],
        k.ds[i],
        k.ds[i + 1],
    )
}

/// Inverse map; the returned log-derivative is that of the inverse, i.e. the
/// negated forward log-derivative at the returned point.
pub fn rqs_inverse(y: f64, raw: &[f64], cfg: &SplineConfig) -> (f64, f64) {
    let b = cfg.tail_bound;
    if !(-b..=b).contains(&y) {
        return (y, 0.0);
    }
    let k = knots(raw, cfg);
    let i = find_bin(&k.ys, y);
    let (x0, w) = (k.xs[i], k.xs[i + 1] - k.xs[i]);
    let (y0, h) = (k.ys[i], k.ys[i + 1] - k.ys[i]);
    let (d0, d1) = (k.ds[i], k.ds[i + 1]);
    let s = h / w;
    let dy = y - y0;
    let a = h * (s - d0) + dy * (d1 + d0 - 2.0 * s);
    let bq = h * d0 - dy * (d1 + d0 - 2.0 * s);
    let c = -s * dy;
    let disc = (bq * bq - 4.0 * a * c).max(0.0);
    let xi = (2.0 * c / (-bq - disc.sqrt())).clamp(0.0, 1.0);
    let x = x0 + xi * w;
    let (_, logdet) = in_bin(x, x0, w, y0, h, d0, d1);
    (x, -logdet)
}

/// Softmax backward: `du_i = s_i (g_i - sum_j g_j s_j)`.
fn softmax_backward(s: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
    for i in 0..s.len() {
        out[i] += s[i] * (g[i] - dot);
    }
}

/// Gradients of `gy * y + gl * logdet` with respect to `x` and the raw
/// parameters, accumulated into `graw`. Returns the `x` gradient.
pub fn rqs_forward_backward(
    x: f64,
    raw: &[f64],
    cfg: &SplineConfig,
    gy: f64,
    gl: f64,
    graw: &mut [f64],
) -> f64 {
    let bound = cfg.tail_bound;
    if !(-bound..=bound).contains(&x) {
        return gy;
    }
    let kn = knots(raw, cfg);
    let nb = cfg.bins;
    let i = find_bin(&kn.xs, x);
    let (y, l) = in_bin(
        Dual::var(x, 0),
        Dual::var(kn.xs[i], 1),
        Dual::var(kn.xs[i + 1] - kn.xs[i], 2),
        Dual::var(kn.ys[i], 3),
        Dual::var(kn.ys[i + 1] - kn.ys[i], 4),
        Dual::var(kn.ds[i], 5),
        Dual::var(kn.ds[i + 1], 6),
    );
    let g: Vec<f64> = (0..7).map(|j| gy * y.d[j] + gl * l.d[j]).collect();

    // Knot gradients; widths are differences of adjacent knots.
    let mut gxs = vec![0.0; nb + 1];
    let mut gys = vec![0.0; nb + 1];
    gxs[i] += g[1] - g[2];
    gxs[i + 1] += g[2];
    gys[i] += g[3] - g[4];
    gys[i + 1] += g[4];

    let to_fraction = |gk: &[f64], min: f64| -> Vec<f64> {
        // knot_j = -B + 2B * sum_{m<j} (min + (1 - min K) f_m) for 1 <= j < K
        let scale = 2.0 * bound * (1.0 - min * nb as f64);
        let mut gf = vec![0.0; nb];
        let mut suffix = 0.0;
        for j in (1..nb).rev() {
            suffix += gk[j];
            gf[j - 1] = scale * suffix;
        }
        gf
    };
    let gfw = to_fraction(&gxs, cfg.min_bin_width);
    let gfh = to_fraction(&gys, cfg.min_bin_height);
    softmax_backward(&kn.sw, &gfw, &mut graw[..nb]);
    softmax_backward(&kn.sh, &gfh, &mut graw[nb..2 * nb]);

    let shift = cfg.derivative_shift();
    for (knot, gd) in [(i, g[5]), (i + 1, g[6])] {
        if knot > 0 && knot < nb {
            graw[2 * nb + knot - 1] += gd * sigmoid(raw[2 * nb + knot - 1] + shift);
        }
    }
    g[0]
}

/// Elementwise spline transform as a graph op.
///
/// Inputs: `x (n, m)` and raw parameters `(n, m * (3K - 1))`.
/// Output: `(n, 2m)`, the transformed values followed by per-coordinate
/// log-derivatives.
#[derive(Debug, Clone)]
pub struct RqsOp {
    pub config: SplineConfig,
}

impl CustomOp for RqsOp {
    fn name(&self) -> &'static str {
        "rqs"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [x, params] = inputs else {
            return Err(Error::InvalidArgument("rqs takes (x, params)".into()));
        };
        let p = self.config.params_per_dim();
        if x.rank() != 2
            || params.rank() != 2
            || params.rows() != x.rows()
            || params.shape()[1] != x.shape()[1] * p
        {
            return Err(Error::Shape(format!(
                "rqs: x {:?} with params {:?}",
                x.shape(),
                params.shape()
            )));
        }
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; n * 2 * m];
        for r in 0..n {
            let pr = params.row(r);
            for j in 0..m {
                let (y, l) = rqs_forward(x.at(r, j), &pr[j * p..(j + 1) * p], &self.config);
                out[r * 2 * m + j] = y;
                out[r * 2 * m + m + j] = l;
            }
        }
        Tensor::new(vec![n, 2 * m], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, params) = (inputs[0], inputs[1]);
        let p = self.config.params_per_dim();
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let mut gx = vec![0.0; n * m];
        let mut gp = vec![0.0; params.numel()];
        for r in 0..n {
            let pr = params.row(r);
            for j in 0..m {
                let gy = grad[r * 2 * m + j];
                let gl = grad[r * 2 * m + m + j];
                if gy == 0.0 && gl == 0.0 {
                    continue;
                }
                let off = r * m * p + j * p;
                gx[r * m + j] = rqs_forward_backward(
                    x.at(r, j),
                    &pr[j * p..(j + 1) * p],
                    &self.config,
                    gy,
                    gl,
                    &mut gp[off..off + p],
                );
            }
        }
        vec![Some(gx), Some(gp)]
    }
}
