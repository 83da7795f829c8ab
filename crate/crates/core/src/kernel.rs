//! First stage: leave-one-out one-sided kernel regressions for time-varying
//! `(alpha_it, beta_it)`.
//!
//! The estimate at `t0` regresses `R_it` on `X_t = (1, f_t)` over `t < t0`
//! with weights `h^{-1} K((t - t0) / (T h))`, where `K` lives on `[-1, 0]`.
//! Nothing at or after `t0` enters, so the estimates carry no look-ahead and
//! `R_{i t0} - X_{t0}' b_{i t0}` is an out-of-sample residual. A uniform
//! kernel reproduces the usual rolling-window OLS on the last `floor(T h)`
//! periods.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::WeightedLine;
use crate::panel::{FactorSeries, PanelData};

/// Largest admissible condition number of a weighted 2x2 Gram matrix.
pub const CONDITION_CEILING: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Uniform,
    Epanechnikov,
    Triangular,
}

impl KernelKind {
    /// Kernel density on `[-1, 0]`, zero elsewhere.
    pub fn eval(self, u: f64) -> f64 {
        if !(-1.0..=0.0).contains(&u) {
            return 0.0;
        }
        match self {
            KernelKind::Uniform => 1.0,
            KernelKind::Epanechnikov => 1.5 * (1.0 - u * u),
            KernelKind::Triangular => 2.0 * (1.0 + u),
        }
    }

    /// `int_{-1}^{0} K(u)^2 du`.
    pub fn squared_integral(self) -> f64 {
        match self {
            KernelKind::Uniform => 1.0,
            KernelKind::Epanechnikov => 1.2,
            KernelKind::Triangular => 4.0 / 3.0,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Uniform => "uniform",
            KernelKind::Epanechnikov => "epanechnikov",
            KernelKind::Triangular => "triangular",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(KernelKind::Uniform),
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            "triangular" => Ok(KernelKind::Triangular),
            other => Err(Error::validation(
                "kernel",
                format!("unknown kernel `{other}`"),
            )),
        }
    }
}

/// Kernel family and bandwidth `h` (a fraction of the sample length).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub h: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, h: f64) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::validation("h", "bandwidth must lie in (0, 1)"));
        }
        Ok(Self { kind, h })
    }

    pub fn uniform(h: f64) -> Result<Self> {
        Self::new(KernelKind::Uniform, h)
    }

    /// Window length `floor(T h)`.
    pub fn window(&self, n_periods: usize) -> usize {
        (n_periods as f64 * self.h + 1e-9).floor() as usize
    }

    /// `max(10, ceil(0.25 T h))`.
    pub fn min_obs(&self, n_periods: usize) -> usize {
        10.max((0.25 * n_periods as f64 * self.h - 1e-9).ceil() as usize)
    }

    /// Zero-based estimation range `[floor(Th), T - floor(Th)]`.
    pub fn valid_range(&self, n_periods: usize) -> Result<RangeInclusive<usize>> {
        let w = self.window(n_periods);
        if w == 0 || 2 * w > n_periods {
            return Err(Error::Config(format!(
                "empty estimation range: window {w} with {n_periods} periods"
            )));
        }
        Ok(w..=n_periods - w)
    }

    /// Weights `h^{-1} K(-k / (T h))` for lags `k = 1..=window`.
    fn lag_weights(&self, n_periods: usize) -> Vec<f64> {
        let th = n_periods as f64 * self.h;
        (1..=self.window(n_periods))
            .map(|k| self.kind.eval(-(k as f64) / th) / self.h)
            .collect()
    }
}

/// `h^{-1} K((t - t0) / (T h))`, zero unless `t0 - floor(Th) <= t < t0`.
pub fn kernel_weight(spec: &KernelSpec, t: usize, t0: usize, n_periods: usize) -> f64 {
    let w = spec.window(n_periods);
    if t >= t0 || t + w < t0 {
        return 0.0;
    }
    let u = (t as f64 - t0 as f64) / (n_periods as f64 * spec.h);
    spec.kind.eval(u) / spec.h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
}

fn fit_window(
    returns: &[f64],
    factor: &[f64],
    lag_weights: &[f64],
    t0: usize,
    min_obs: usize,
    line: &mut WeightedLine,
) -> Result<Coefficients> {
    line.clear();
    for (k, &w) in lag_weights.iter().enumerate() {
        let lag = k + 1;
        if lag > t0 || w == 0.0 {
            continue;
        }
        let t = t0 - lag;
        let r = returns[t];
        if r.is_nan() {
            continue;
        }
        line.push(factor[t], r, w);
    }
    if line.len() < min_obs {
        return Err(Error::InsufficientData(format!(
            "{} in-window observations at t0={t0}, need {min_obs}",
            line.len()
        )));
    }
    let fit = line.solve(CONDITION_CEILING)?;
    Ok(Coefficients {
        alpha: fit.intercept,
        beta: fit.slope,
    })
}

/// Kernel-weighted regression of one asset's returns on `(1, f_t)` over `t < t0`.
///
/// `returns_i` uses `NaN` for missing periods; those carry zero weight.
pub fn rolling_coeffs(
    returns_i: &[f64],
    factor: &FactorSeries,
    spec: &KernelSpec,
    t0: usize,
) -> Result<Coefficients> {
    let n_periods = factor.len();
    if returns_i.len() != n_periods {
        return Err(Error::validation("returns", "length differs from factor"));
    }
    if t0 >= n_periods {
        return Err(Error::validation("t0", "outside the sample"));
    }
    let mut line = WeightedLine::with_capacity(spec.window(n_periods));
    fit_window(
        returns_i,
        &factor.values,
        &spec.lag_weights(n_periods),
        t0,
        spec.min_obs(n_periods),
        &mut line,
    )
}

/// First-stage estimates on the trimmed range, with out-of-sample residuals.
///
/// Matrices are period-major `T x n`; `NaN` marks an absent entry (outside the
/// estimation range, a failed window, or a missing return for residuals).
#[derive(Debug, Clone, PartialEq)]
pub struct BetaPanel {
    pub kernel: KernelSpec,
    pub n_periods: usize,
    pub n_assets: usize,
    pub valid_start: usize,
    pub valid_end: usize,
    pub(crate) alpha_hat: Vec<f64>,
    pub(crate) beta_hat: Vec<f64>,
    pub(crate) residuals: Vec<f64>,
    pub(crate) factor: Vec<f64>,
    /// Number of `(i, t0)` windows masked for failing a precondition.
    pub masked: usize,
}

impl BetaPanel {
    fn cell(v: &[f64], n: usize, t: usize, i: usize) -> Option<f64> {
        let x = v[t * n + i];
        (!x.is_nan()).then_some(x)
    }

    pub fn alpha(&self, t: usize, i: usize) -> Option<f64> {
        Self::cell(&self.alpha_hat, self.n_assets, t, i)
    }

    pub fn beta(&self, t: usize, i: usize) -> Option<f64> {
        Self::cell(&self.beta_hat, self.n_assets, t, i)
    }

    pub fn residual(&self, t: usize, i: usize) -> Option<f64> {
        Self::cell(&self.residuals, self.n_assets, t, i)
    }

    pub fn valid_periods(&self) -> RangeInclusive<usize> {
        self.valid_start..=self.valid_end
    }

    /// Assets with both an estimated beta and an observed return at `t`.
    pub fn sortable(&self, t: usize) -> Vec<(usize, f64)> {
        (0..self.n_assets)
            .filter_map(|i| match (self.beta(t, i), self.residual(t, i)) {
                (Some(b), Some(_)) => Some((i, b)),
                _ => None,
            })
            .collect()
    }

    /// Every estimated beta on the valid range.
    pub fn pooled_betas(&self) -> Vec<f64> {
        self.valid_periods()
            .flat_map(|t| (0..self.n_assets).filter_map(move |i| self.beta(t, i)))
            .collect()
    }

    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    /// Residuals at `t` indexed by asset, `NaN` where absent.
    pub fn residual_row(&self, t: usize) -> &[f64] {
        &self.residuals[t * self.n_assets..(t + 1) * self.n_assets]
    }
}

/// Runs [`rolling_coeffs`] for every asset and every `t0` in the valid range.
pub fn estimate_beta_panel(
    panel: &PanelData,
    factor: &FactorSeries,
    spec: &KernelSpec,
) -> Result<BetaPanel> {
    let n_periods = panel.n_periods();
    if factor.len() != n_periods {
        return Err(Error::Alignment(format!(
            "factor has {} periods, panel has {n_periods}",
            factor.len()
        )));
    }
    let range = spec.valid_range(n_periods)?;
    let min_obs = spec.min_obs(n_periods);
    if spec.window(n_periods) < min_obs {
        return Err(Error::Config(format!(
            "window {} is shorter than the minimum {min_obs} observations",
            spec.window(n_periods)
        )));
    }
    let n = panel.n_assets();
    let weights = spec.lag_weights(n_periods);
    let columns: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let returns = panel.column(i);
            let mut line = WeightedLine::with_capacity(weights.len());
            let mut alphas = vec![f64::NAN; n_periods];
            let mut betas = vec![f64::NAN; n_periods];
            let mut masked = 0;
            for t0 in range.clone() {
                match fit_window(&returns, &factor.values, &weights, t0, min_obs, &mut line) {
                    Ok(c) => {
                        alphas[t0] = c.alpha;
                        betas[t0] = c.beta;
                    }
                    Err(_) => masked += 1,
                }
            }
            (alphas, betas, masked)
        })
        .collect();

    let mut alpha_hat = vec![f64::NAN; n_periods * n];
    let mut beta_hat = vec![f64::NAN; n_periods * n];
    let mut residuals = vec![f64::NAN; n_periods * n];
    let mut masked = 0;
    for (i, (a, b, m)) in columns.into_iter().enumerate() {
        masked += m;
        for t in range.clone() {
            alpha_hat[t * n + i] = a[t];
            beta_hat[t * n + i] = b[t];
            if let Some(r) = panel.get(t, i) {
                residuals[t * n + i] = r - a[t] - b[t] * factor.values[t];
            }
        }
    }
    Ok(BetaPanel {
        kernel: *spec,
        n_periods,
        n_assets: n,
        valid_start: *range.start(),
        valid_end: *range.end(),
        alpha_hat,
        beta_hat,
        residuals,
        factor: factor.values.clone(),
        masked,
    })
}

/// First-stage variance pieces at one `t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstStageVariance {
    pub t0: usize,
    /// Local level of `sigma_t^2`, truncated at zero.
    pub sigma2: f64,
    /// Local slope of the squared-residual fit (reported only).
    pub varsigma2: f64,
    /// `A(t0) = sum_t w(t, t0) X_t X_t'`.
    pub a_hat: Matrix2<f64>,
    /// `T A(t0)^{-1} sigma2 int K^2`.
    pub sigma_b: Matrix2<f64>,
}

impl FirstStageVariance {
    /// `sqrt(T h) Sigma_b^{-1/2} (b_hat - b)`; `None` when `Sigma_b` is singular.
    pub fn standardize(
        &self,
        n_periods: usize,
        h: f64,
        b_hat: Coefficients,
        b: Coefficients,
    ) -> Option<[f64; 2]> {
        let eig = self.sigma_b.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return None;
        }
        let inv_root = eig.eigenvectors
            * Matrix2::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
            * eig.eigenvectors.transpose();
        let d = Vector2::new(b_hat.alpha - b.alpha, b_hat.beta - b.beta);
        let z = inv_root * d * (n_periods as f64 * h).sqrt();
        Some([z[0], z[1]])
    }
}

/// Local-constant level of squared residuals around `t0` plus the sandwich
/// pieces for `(alpha_hat, beta_hat)` at `t0`.
pub fn first_stage_variance(beta_panel: &BetaPanel, t0: usize) -> Result<FirstStageVariance> {
    let spec = beta_panel.kernel;
    let n_periods = beta_panel.n_periods;
    if t0 >= n_periods {
        return Err(Error::validation("t0", "outside the sample"));
    }
    let th = n_periods as f64 * spec.h;
    let window = spec.window(n_periods);
    let mut line = WeightedLine::default();
    let mut periods_used = 0;
    for lag in 1..=window.min(t0) {
        let t = t0 - lag;
        let u = -(lag as f64) / th;
        let k = spec.kind.eval(u);
        let before = line.len();
        for i in 0..beta_panel.n_assets {
            if let Some(e) = beta_panel.residual(t, i) {
                line.push(-(lag as f64) / n_periods as f64, e * e, k);
            }
        }
        if line.len() > before {
            periods_used += 1;
        }
    }
    if periods_used < 2 {
        return Err(Error::InsufficientData(format!(
            "residuals available in {periods_used} window periods at t0={t0}"
        )));
    }
    let fit = line.solve(CONDITION_CEILING)?;
    let sigma2 = fit.intercept.max(0.0);

    let mut a_hat = Matrix2::zeros();
    for lag in 1..=window.min(t0) {
        let t = t0 - lag;
        let w = kernel_weight(&spec, t, t0, n_periods);
        let x = Vector2::new(1.0, beta_panel.factor[t]);
        a_hat += w * x * x.transpose();
    }
    let condition = {
        let eig = a_hat.symmetric_eigen();
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    };
    if !(condition <= CONDITION_CEILING) {
        return Err(Error::SingularWindow { condition });
    }
    let a_inv = a_hat
        .try_inverse()
        .ok_or(Error::SingularWindow { condition })?;
    let sigma_b = a_inv * (n_periods as f64 * sigma2 * spec.kind.squared_integral());
    Ok(FirstStageVariance {
        t0,
        sigma2,
        varsigma2: fit.slope,
        a_hat,
        sigma_b: 0.5 * (sigma_b + sigma_b.transpose()),
    })
}
