//! Variance estimators for the sorted-portfolio curves.
//!
//! * Fama-MacBeth: the time-series covariance of the per-period curves. It
//!   also absorbs the time variation of `mu_t(beta)` and is conservative for
//!   the average of the conditional means.
//! * Plug-in: the factor-innovation term (with a fitted conditional mean of the
//!   factor) plus the idiosyncratic term, both computed bin by bin.
//! * Per-period `sigma_t(beta)` and the butterfly variance `sigma_D`, both
//!   built from the within-bin residual variances `sigma_j^2`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::BetaPanel;
use crate::panel::FactorSeries;
use crate::sorting::{MuCurve, PartitionScheme, SortedPanel};

/// First zero-based period at which the expanding AR(1) fit is used.
pub const AR1_START: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondMeanKind {
    Zero,
    Constant,
    Ar1,
}

impl fmt::Display for CondMeanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CondMeanKind::Zero => "zero",
            CondMeanKind::Constant => "constant",
            CondMeanKind::Ar1 => "ar1",
        })
    }
}

impl FromStr for CondMeanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zero" => Ok(CondMeanKind::Zero),
            "constant" => Ok(CondMeanKind::Constant),
            "ar1" => Ok(CondMeanKind::Ar1),
            other => Err(Error::validation(
                "condmean",
                format!("unknown kind `{other}`"),
            )),
        }
    }
}

/// Fitted `h_{t-1}`, an estimate of `E(f_t | F_{t-1})` from data before `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondMeanModel {
    pub kind: CondMeanKind,
    /// Full-sample coefficients: `[]`, `[mean]` or `[intercept, slope]`.
    pub params: Vec<f64>,
    /// `fitted[t]` depends on `f_0 .. f_{t-1}` only.
    pub fitted: Vec<f64>,
    /// Set when the AR(1) regressor was degenerate and the expanding mean was used.
    pub fallback: bool,
}

/// Running first and second co-moments of `(x, y)` pairs.
#[derive(Debug, Default, Clone, Copy)]
struct Moments {
    n: f64,
    mx: f64,
    my: f64,
    sxx: f64,
    sxy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        let dx = x - self.mx;
        self.mx += dx / self.n;
        let dy = y - self.my;
        self.my += dy / self.n;
        self.sxx += dx * (x - self.mx);
        self.sxy += dx * (y - self.my);
    }

    fn line(&self) -> Option<(f64, f64)> {
        let tol = 1e-12 * self.n * (1.0 + self.mx * self.mx);
        if self.n < 2.0 || !(self.sxx > tol) {
            return None;
        }
        let slope = self.sxy / self.sxx;
        Some((self.my - slope * self.mx, slope))
    }
}

pub fn fit_factor_condmean(factor: &FactorSeries, kind: CondMeanKind) -> Result<CondMeanModel> {
    let f = &factor.values;
    let n = f.len();
    if n == 0 {
        return Err(Error::InsufficientData("empty factor series".into()));
    }
    let expanding_mean = || {
        let mut out = Vec::with_capacity(n);
        let mut sum = 0.0;
        for t in 0..n {
            out.push(if t == 0 { 0.0 } else { sum / t as f64 });
            sum += f[t];
        }
        out
    };
    match kind {
        CondMeanKind::Zero => Ok(CondMeanModel {
            kind,
            params: Vec::new(),
            fitted: vec![0.0; n],
            fallback: false,
        }),
        CondMeanKind::Constant => Ok(CondMeanModel {
            kind,
            params: vec![f.iter().sum::<f64>() / n as f64],
            fitted: expanding_mean(),
            fallback: false,
        }),
        CondMeanKind::Ar1 => {
            if n < AR1_START {
                return Err(Error::InsufficientData(format!(
                    "AR(1) fit needs at least {AR1_START} periods, got {n}"
                )));
            }
            let mean = expanding_mean();
            let mut fitted = Vec::with_capacity(n);
            let mut m = Moments::default();
            let mut fallback = false;
            for t in 0..n {
                if t >= 2 {
                    m.push(f[t - 2], f[t - 1]);
                }
                if t < AR1_START {
                    fitted.push(mean[t]);
                    continue;
                }
                match m.line() {
                    Some((c, phi)) => fitted.push(c + phi * f[t - 1]),
                    None => {
                        fallback = true;
                        fitted.push(mean[t]);
                    }
                }
            }
            m.push(f[n - 2], f[n - 1]);
            let params = match m.line() {
                Some((c, phi)) => vec![c, phi],
                None => {
                    fallback = true;
                    vec![f.iter().sum::<f64>() / n as f64, 0.0]
                }
            };
            Ok(CondMeanModel {
                kind,
                params,
                fitted,
                fallback,
            })
        }
    }
}

/// Per-bin sums for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub t: usize,
    pub n_t: usize,
    pub j_count: usize,
    pub count: Vec<usize>,
    pub sum_beta: Vec<f64>,
    pub sum_eps2: Vec<f64>,
}

impl BinStats {
    /// `residuals_t[i]` is asset `i`'s out-of-sample residual at the partition's period.
    pub fn new(partition: &PartitionScheme, residuals_t: &[f64]) -> Result<Self> {
        let j = partition.j_count;
        let mut s = Self {
            t: partition.t,
            n_t: partition.n_t(),
            j_count: j,
            count: vec![0; j],
            sum_beta: vec![0.0; j],
            sum_eps2: vec![0.0; j],
        };
        for m in &partition.members {
            let e = residuals_t.get(m.asset).copied().unwrap_or(f64::NAN);
            if e.is_nan() {
                return Err(Error::validation(
                    "residuals",
                    format!(
                        "asset {} sorted at t={} has no residual",
                        m.asset, partition.t
                    ),
                ));
            }
            s.count[m.bin] += 1;
            s.sum_beta[m.bin] += m.beta;
            s.sum_eps2[m.bin] += e * e;
        }
        Ok(s)
    }

    /// `sigma_j^2 = (n_t / J_t) sum_{i in j} eps_i^2 / N_j^2`.
    pub fn sigma_j2(&self) -> Vec<f64> {
        let ratio = self.n_t as f64 / self.j_count as f64;
        self.count
            .iter()
            .zip(&self.sum_eps2)
            .map(|(&c, &s)| {
                if c == 0 {
                    0.0
                } else {
                    ratio * s / (c * c) as f64
                }
            })
            .collect()
    }

    pub fn ratio(&self) -> f64 {
        self.n_t as f64 / self.j_count as f64
    }
}

/// Bin statistics for every sorted period, in the panel's row order.
pub fn bin_stats(sorted: &SortedPanel, betas: &BetaPanel) -> Result<Vec<BinStats>> {
    sorted
        .partitions
        .iter()
        .map(|p| BinStats::new(p, betas.residual_row(p.t)))
        .collect()
}

/// Within-bin residual variances of one period.
pub fn sigma_j2(partition: &PartitionScheme, residuals_t: &[f64]) -> Result<Vec<f64>> {
    Ok(BinStats::new(partition, residuals_t)?.sigma_j2())
}

/// `sigma_t(beta) = sum_j p_j(beta) sigma_j^2`; `NaN` outside the period's support.
pub fn sigma_t_curve(
    partition: &PartitionScheme,
    residuals_t: &[f64],
    grid: &[f64],
) -> Result<Vec<f64>> {
    let s = sigma_j2(partition, residuals_t)?;
    Ok(grid
        .iter()
        .map(|&b| partition.locate(b).map_or(f64::NAN, |j| s[j]))
        .collect())
}

fn check_rows(curve: &MuCurve, stats: &[BinStats]) -> Result<()> {
    if curve.periods.len() != stats.len() || curve.periods.iter().zip(stats).any(|(&t, s)| t != s.t)
    {
        return Err(Error::validation(
            "curve",
            "periods differ from the bin statistics",
        ));
    }
    Ok(())
}

/// Plug-in variance of `sqrt(T) (mu_hat(beta) - mu(beta))` on the curve's grid.
pub fn plugin_variance(
    stats: &[BinStats],
    factor: &[f64],
    cm: &CondMeanModel,
    curve: &MuCurve,
) -> Result<Vec<f64>> {
    check_rows(curve, stats)?;
    let k = curve.len();
    let mut acc = vec![0.0; k];
    let mut used = vec![0usize; k];
    for (row, s) in stats.iter().enumerate() {
        let innov = factor[s.t] - cm.fitted[s.t];
        let per_bin: Vec<f64> = (0..s.j_count)
            .map(|j| {
                let c = s.count[j] as f64;
                if c == 0.0 {
                    return 0.0;
                }
                let mean_beta = s.sum_beta[j] / c;
                mean_beta * mean_beta * innov * innov + s.sum_eps2[j] / (c * c)
            })
            .collect();
        for v in 0..k {
            if let Some(j) = curve.bin_index[row][v] {
                acc[v] += per_bin[j];
                used[v] += 1;
            }
        }
    }
    if let Some(v) = used.iter().position(|&u| u == 0) {
        return Err(Error::AllMasked {
            beta: curve.grid[v],
        });
    }
    Ok(acc.iter().zip(&used).map(|(a, &u)| a / u as f64).collect())
}

/// `T^{-1} sum_t (mu_t(b1) - mu(b1)) (mu_t(b2) - mu(b2))` over jointly unmasked periods.
///
/// A point seen in fewer than two periods is an error. A pair of points that
/// co-occur in fewer than two periods gets covariance zero.
pub fn fm_covariance(curve: &MuCurve) -> Result<DMatrix<f64>> {
    let k = curve.len();
    let mut cov = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let (mut s, mut c) = (0.0, 0usize);
            for row in &curve.values_t {
                let (x, y) = (row[a], row[b]);
                if !x.is_nan() && !y.is_nan() {
                    s += (x - curve.values[a]) * (y - curve.values[b]);
                    c += 1;
                }
            }
            if c < 2 && a != b {
                continue;
            }
            if c < 2 {
                return Err(Error::InsufficientData(format!(
                    "grid point {} is unmasked in {c} periods",
                    curve.grid[a]
                )));
            }
            cov[(a, b)] = s / c as f64;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    Ok(cov)
}

/// Variance inputs for the grand-mean bands and the high-minus-low test.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimates {
    pub fm_cov: DMatrix<f64>,
    pub plugin_var: Vec<f64>,
    /// Per period row: `sigma_j^2` by bin.
    pub sigma_j2: Vec<Vec<f64>>,
    /// Per period row: `sigma_t(beta)` on the grid, `NaN` where masked.
    pub sigma_t: Vec<Vec<f64>>,
    pub condmean: CondMeanKind,
}

impl VarianceEstimates {
    pub fn fm_var(&self) -> Vec<f64> {
        (0..self.fm_cov.nrows())
            .map(|v| self.fm_cov[(v, v)])
            .collect()
    }
}

pub fn estimate_variances(
    stats: &[BinStats],
    betas: &BetaPanel,
    curve: &MuCurve,
    cm: &CondMeanModel,
) -> Result<VarianceEstimates> {
    let fm_cov = fm_covariance(curve)?;
    let plugin_var = plugin_variance(stats, betas.factor(), cm, curve)?;
    let sigma_j2: Vec<Vec<f64>> = stats.iter().map(BinStats::sigma_j2).collect();
    let sigma_t = curve
        .bin_index
        .iter()
        .zip(&sigma_j2)
        .map(|(bins, s)| bins.iter().map(|j| j.map_or(f64::NAN, |j| s[j])).collect())
        .collect();
    Ok(VarianceEstimates {
        fm_cov,
        plugin_var,
        sigma_j2,
        sigma_t,
        condmean: cm.kind,
    })
}

/// Grid indices `(lo, mid, hi)` of a butterfly with `beta_lo + beta_hi = 2 beta_mid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub lo: usize,
    pub mid: usize,
    pub hi: usize,
}

/// Every `(a, c)` pair with `a < c` whose midpoint is also a grid index.
pub fn grid_triples(k: usize) -> Vec<Triple> {
    let mut out = Vec::new();
    for lo in 0..k {
        for hi in (lo + 2..k).step_by(2) {
            out.push(Triple {
                lo,
                mid: (lo + hi) / 2,
                hi,
            });
        }
    }
    out
}

pub fn check_triples(grid: &[f64], triples: &[Triple]) -> Result<()> {
    let scale = grid.iter().fold(1.0_f64, |a, b| a.max(b.abs()));
    for tr in triples {
        let (a, b, c) = (
            grid.get(tr.lo).copied(),
            grid.get(tr.mid).copied(),
            grid.get(tr.hi).copied(),
        );
        match (a, b, c) {
            (Some(a), Some(b), Some(c)) if (a + c - 2.0 * b).abs() <= 1e-9 * scale => {}
            _ => {
                return Err(Error::validation(
                    "triples",
                    format!(
                        "({}, {}, {}) is not an equispaced grid triple",
                        tr.lo, tr.mid, tr.hi
                    ),
                ))
            }
        }
    }
    Ok(())
}

/// Butterfly contrasts and their variance structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterflyVariance {
    pub triples: Vec<Triple>,
    /// `T^{-1} sum_t mu_t(b1) + mu_t(b3) - 2 mu_t(b2)` over the triple's periods.
    pub d_bar: Vec<f64>,
    pub sigma_d: Vec<f64>,
    /// Covariance of the normalized contrasts; its diagonal is `sigma_d`.
    pub cov: DMatrix<f64>,
    /// Harmonic mean of `n_t / J_t` over the triple's periods.
    pub ratio: Vec<f64>,
    pub ratio_min: Vec<f64>,
    pub ratio_max: Vec<f64>,
    pub effective_t: Vec<usize>,
    pub degenerate: Vec<bool>,
}

type Contrast = [(usize, f64); 3];

fn contrast(bins: &[Option<usize>], tr: &Triple) -> Option<Contrast> {
    let (a, b, c) = (bins[tr.lo]?, bins[tr.mid]?, bins[tr.hi]?);
    Some([(a, 1.0), (c, 1.0), (b, -2.0)])
}

fn contrast_product(x: &Contrast, y: &Contrast, s: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &(j, cx) in x {
        for &(k, cy) in y {
            if j == k {
                acc += cx * cy * s[j];
            }
        }
    }
    acc
}

/// `sigma_D` and cross-covariances of the butterfly contrasts on the curve.
pub fn sigma_d(
    curve: &MuCurve,
    stats: &[BinStats],
    triples: &[Triple],
) -> Result<ButterflyVariance> {
    check_rows(curve, stats)?;
    check_triples(&curve.grid, triples)?;
    let m = triples.len();
    let rows = stats.len();
    let s2: Vec<Vec<f64>> = stats.iter().map(BinStats::sigma_j2).collect();
    // contrasts[row][k]
    let contrasts: Vec<Vec<Option<Contrast>>> = curve
        .bin_index
        .iter()
        .map(|bins| triples.iter().map(|tr| contrast(bins, tr)).collect())
        .collect();

    let mut d_bar = vec![0.0; m];
    let mut effective_t = vec![0usize; m];
    let mut inv_ratio = vec![0.0; m];
    let mut ratio_min = vec![f64::INFINITY; m];
    let mut ratio_max = vec![0.0_f64; m];
    for (row, cs) in contrasts.iter().enumerate() {
        let vals = &curve.values_t[row];
        let r = stats[row].ratio();
        for (k, tr) in triples.iter().enumerate() {
            if cs[k].is_some() {
                d_bar[k] += vals[tr.lo] + vals[tr.hi] - 2.0 * vals[tr.mid];
                effective_t[k] += 1;
                inv_ratio[k] += 1.0 / r;
                ratio_min[k] = ratio_min[k].min(r);
                ratio_max[k] = ratio_max[k].max(r);
            }
        }
    }
    // A triple never observed whole gets zeros and counts as degenerate.
    for k in 0..m {
        if effective_t[k] == 0 {
            ratio_min[k] = 0.0;
            continue;
        }
        d_bar[k] /= effective_t[k] as f64;
    }
    let ratio: Vec<f64> = (0..m)
        .map(|k| {
            if effective_t[k] == 0 {
                0.0
            } else {
                effective_t[k] as f64 / inv_ratio[k]
            }
        })
        .collect();

    let mut cov = DMatrix::<f64>::zeros(m, m);
    for row in 0..rows {
        let cs = &contrasts[row];
        for a in 0..m {
            let Some(x) = &cs[a] else { continue };
            for b in a..m {
                let Some(y) = &cs[b] else { continue };
                cov[(a, b)] += contrast_product(x, y, &s2[row]);
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let norm = ((effective_t[a] * effective_t[b]) as f64).sqrt();
            if norm > 0.0 {
                cov[(a, b)] /= norm;
            }
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let sigma_d: Vec<f64> = (0..m).map(|k| cov[(k, k)].max(0.0)).collect();
    let degenerate = sigma_d.iter().map(|&s| s <= 0.0).collect();
    Ok(ButterflyVariance {
        triples: triples.to_vec(),
        d_bar,
        sigma_d,
        cov,
        ratio,
        ratio_min,
        ratio_max,
        effective_t,
        degenerate,
    })
}
