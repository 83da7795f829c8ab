//! Critical values from simulated Gaussian suprema, uniform bands and tests.
//!
//! Draws are generated in fixed-size chunks, each from its own random stream,
//! so results do not depend on the number of threads. Quantiles are order
//! statistics of the sorted draws; keeping the draws in a [`SupDraws`] lets
//! several levels share them, which makes bands nest across `alpha`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{clip_to_correlation, covariance_to_correlation, symmetric_sqrt};
use crate::rng::{stream, stream_key};
use crate::sorting::{high_minus_low_point, HighMinusLow, MuCurve};
use crate::variance::{BinStats, ButterflyVariance, Triple, VarianceEstimates};

/// Eigenvalue floor applied to correlation matrices before simulation.
pub const EIGEN_FLOOR: f64 = 1e-10;

const CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSimSpec {
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for GaussianSimSpec {
    fn default() -> Self {
        Self {
            draws: 10_000,
            alpha: 0.05,
            seed: 0x5EED_0001,
        }
    }
}

impl GaussianSimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.draws < 100 {
            return Err(Error::validation("draws", "need at least 100 draws"));
        }
        check_alpha(self.alpha)
    }

    /// Same draw count and level with a derived seed.
    pub fn derive(&self, salt: u64) -> Self {
        Self {
            seed: stream_key(self.seed, salt),
            ..*self
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha", "must lie in (0, 1)"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupMode {
    /// `max_k |Z_k|`
    AbsSup,
    /// `max_k Z_k`
    Signed,
}

/// Sorted simulated values of a statistic of a Gaussian vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SupDraws {
    sorted: Vec<f64>,
}

impl SupDraws {
    /// Simulates `stat(R z)` for `z ~ N(0, I_dim)`; `root = None` means `R = I`.
    pub fn simulate<F>(
        dim: usize,
        root: Option<&DMatrix<f64>>,
        sim: &GaussianSimSpec,
        stat: F,
    ) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        sim.validate()?;
        if dim == 0 {
            return Err(Error::validation("dim", "empty Gaussian vector"));
        }
        // Row-major copy for a tight mat-vec loop.
        let rows: Option<Vec<f64>> = root.map(|r| {
            let mut v = Vec::with_capacity(dim * dim);
            for i in 0..dim {
                for j in 0..dim {
                    v.push(r[(i, j)]);
                }
            }
            v
        });
        let chunks = sim.draws.div_ceil(CHUNK);
        let mut values: Vec<f64> = (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = stream(sim.seed, c as u64);
                let len = CHUNK.min(sim.draws - c * CHUNK);
                let mut z = vec![0.0; dim];
                let mut y = vec![0.0; dim];
                let mut out = Vec::with_capacity(len);
                for _ in 0..len {
                    for v in z.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    let s = match &rows {
                        Some(r) => {
                            for i in 0..dim {
                                let row = &r[i * dim..(i + 1) * dim];
                                y[i] = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                            }
                            stat(&y)
                        }
                        None => stat(&z),
                    };
                    out.push(s);
                }
                out.into_iter()
            })
            .collect();
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical("simulated statistic is NaN".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { sorted: values })
    }

    /// Draws of `max |Z|` or `max Z` under a correlation matrix (clipped first).
    pub fn correlated(corr: &DMatrix<f64>, sim: &GaussianSimSpec, mode: SupMode) -> Result<Self> {
        let clipped = clip_to_correlation(corr, EIGEN_FLOOR)?;
        let root = symmetric_sqrt(&clipped)?;
        Self::simulate(corr.nrows(), Some(&root), sim, sup_stat(mode))
    }

    /// Draws of `max_j |Z_j|` over `dim` independent standard normals.
    pub fn iid_max_abs(dim: usize, sim: &GaussianSimSpec) -> Result<Self> {
        Self::simulate(dim, None, sim, sup_stat(SupMode::AbsSup))
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Order statistic `ceil(S (1 - alpha))`.
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        check_alpha(alpha)?;
        let s = self.sorted.len();
        let k = ((s as f64 * (1.0 - alpha)) - 1e-9)
            .ceil()
            .clamp(1.0, s as f64) as usize;
        Ok(self.sorted[k - 1])
    }
}

fn sup_stat(mode: SupMode) -> impl Fn(&[f64]) -> f64 + Sync {
    move |y: &[f64]| match mode {
        SupMode::AbsSup => y.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
        SupMode::Signed => y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `(1 - alpha)` quantile of the supremum of a Gaussian vector with correlation `corr`.
pub fn sup_gaussian_quantile(
    corr: &DMatrix<f64>,
    sim: &GaussianSimSpec,
    mode: SupMode,
) -> Result<f64> {
    SupDraws::correlated(corr, sim, mode)?.quantile(sim.alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    /// Plug-in scale: targets the average of the conditional means over the sample.
    GrandMeanSharp,
    /// Fama-MacBeth scale: targets the limit of that average, conservatively.
    GrandMeanConservative,
    /// Per-period band for the systematic realized return.
    FixedT,
}

impl BandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BandKind::GrandMeanSharp => "grand_mean_sharp",
            BandKind::GrandMeanConservative => "grand_mean_conservative",
            BandKind::FixedT => "fixed_t",
        }
    }
}

/// `center +/- half_width` on a grid; masked points carry `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub kind: BandKind,
    pub grid: Vec<f64>,
    pub center: Vec<f64>,
    /// Standard error per grid point (`half_width / q_hat`).
    pub se: Vec<f64>,
    pub half_width: Vec<f64>,
    pub q_hat: f64,
    pub alpha: f64,
    /// Period of a fixed-t band.
    pub period: Option<usize>,
}

impl Band {
    pub fn lower(&self) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.half_width)
            .map(|(c, h)| c - h)
            .collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.half_width)
            .map(|(c, h)| c + h)
            .collect()
    }

    /// Whether `truth` lies inside the band at every unmasked grid point.
    pub fn covers(&self, truth: &[f64]) -> bool {
        self.pointwise(truth).into_iter().flatten().all(|x| x)
    }

    /// Per-point coverage, `None` at masked points.
    pub fn pointwise(&self, truth: &[f64]) -> Vec<Option<bool>> {
        self.center
            .iter()
            .zip(&self.half_width)
            .zip(truth)
            .map(|((c, h), x)| (!c.is_nan()).then(|| (x - c).abs() <= *h))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrandMeanTarget {
    /// `T^{-1} sum_t mu_t(beta)`: plug-in scale, FM correlation.
    MuBarT,
    /// The limit of that average: FM scale and correlation.
    MuLimit,
}

/// Correlation of the grand-mean estimates across the grid.
///
/// The Fama-MacBeth correlation of two points is shrunk by their period
/// overlap `T_ab / sqrt(T_a T_b)`, since each point averages over its own
/// unmasked periods. A curve without per-period rows counts as fully overlapping.
pub fn grand_mean_correlation(curve: &MuCurve, var: &VarianceEstimates) -> Result<DMatrix<f64>> {
    let k = curve.len();
    if var.fm_cov.nrows() != k {
        return Err(Error::validation(
            "variances",
            "grid size differs from the curve",
        ));
    }
    let mut corr = covariance_to_correlation(&var.fm_cov, EIGEN_FLOOR)?;
    if curve.values_t.is_empty() {
        return Ok(corr);
    }
    for a in 0..k {
        for b in a + 1..k {
            let ta = curve.effective_t[a] as f64;
            let tb = curve.effective_t[b] as f64;
            let shrink = common_periods(curve, a, b) as f64 / (ta * tb).sqrt();
            corr[(a, b)] *= shrink;
            corr[(b, a)] = corr[(a, b)];
        }
    }
    Ok(corr)
}

/// Max-abs draws under [`grand_mean_correlation`].
pub fn grand_mean_draws(
    curve: &MuCurve,
    var: &VarianceEstimates,
    sim: &GaussianSimSpec,
) -> Result<SupDraws> {
    SupDraws::correlated(&grand_mean_correlation(curve, var)?, sim, SupMode::AbsSup)
}

/// Grand-mean band from pre-simulated draws.
pub fn grand_mean_band_from(
    curve: &MuCurve,
    var: &VarianceEstimates,
    draws: &SupDraws,
    target: GrandMeanTarget,
    alpha: f64,
) -> Result<Band> {
    let k = curve.len();
    if var.plugin_var.len() != k || var.fm_cov.nrows() != k {
        return Err(Error::validation(
            "variances",
            "grid size differs from the curve",
        ));
    }
    let q = draws.quantile(alpha)?;
    let (scale, kind) = match target {
        GrandMeanTarget::MuBarT => (var.plugin_var.clone(), BandKind::GrandMeanSharp),
        GrandMeanTarget::MuLimit => (var.fm_var(), BandKind::GrandMeanConservative),
    };
    let se: Vec<f64> = scale
        .iter()
        .zip(&curve.effective_t)
        .map(|(s, &t)| (s.max(0.0) / t as f64).sqrt())
        .collect();
    Ok(Band {
        kind,
        grid: curve.grid.clone(),
        center: curve.values.clone(),
        half_width: se.iter().map(|s| s * q).collect(),
        se,
        q_hat: q,
        alpha,
        period: None,
    })
}

/// Uniform band for the grand mean at level `sim.alpha`.
pub fn grand_mean_band(
    curve: &MuCurve,
    var: &VarianceEstimates,
    sim: &GaussianSimSpec,
    target: GrandMeanTarget,
) -> Result<Band> {
    let draws = grand_mean_draws(curve, var, sim)?;
    grand_mean_band_from(curve, var, &draws, target, sim.alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "test")]
pub enum TestDetails {
    GrandMeanZero {
        /// Grid index attaining the statistic.
        argmax: usize,
    },
    HighMinusLow {
        selection: HighMinusLow,
        calibration: HmlCalibration,
        /// Standard error of the spread at the selected pair.
        se_diff: f64,
    },
    Butterfly {
        triple: Triple,
        used: usize,
        excluded: usize,
        ratio_min: f64,
        ratio_max: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub details: TestDetails,
}

impl TestResult {
    fn new(statistic: f64, critical_value: f64, alpha: f64, details: TestDetails) -> Self {
        Self {
            statistic,
            critical_value,
            reject: statistic > critical_value,
            alpha,
            details,
        }
    }
}

fn ratio_stat(center: f64, se: f64) -> f64 {
    if se > 0.0 {
        center.abs() / se
    } else if center == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Rejects `mu(beta) = 0 for all beta` when zero leaves the band somewhere.
pub fn test_grand_mean_zero(band: &Band) -> TestResult {
    let (mut stat, mut argmax) = (0.0_f64, 0);
    for (v, (&c, &s)) in band.center.iter().zip(&band.se).enumerate() {
        if c.is_nan() {
            continue;
        }
        let z = ratio_stat(c, s);
        if z > stat {
            stat = z;
            argmax = v;
        }
    }
    TestResult::new(
        stat,
        band.q_hat,
        band.alpha,
        TestDetails::GrandMeanZero { argmax },
    )
}

/// Periods where both grid points are unmasked.
fn common_periods(curve: &MuCurve, a: usize, b: usize) -> usize {
    curve
        .values_t
        .iter()
        .filter(|r| !r[a].is_nan() && !r[b].is_nan())
        .count()
}

/// Null distribution used for the high-minus-low spread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HmlCalibration {
    /// Range `max_b G(b) - min_b G(b)` of the Gaussian limit over the whole grid.
    #[default]
    Range,
    /// `|G(b*) - G(b**)|` at the selected pair, treating the selection as fixed.
    SelectedPair,
}

impl std::fmt::Display for HmlCalibration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HmlCalibration::Range => "range",
            HmlCalibration::SelectedPair => "selected_pair",
        })
    }
}

impl std::str::FromStr for HmlCalibration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "range" => Ok(HmlCalibration::Range),
            "selected_pair" | "selected" => Ok(HmlCalibration::SelectedPair),
            other => Err(Error::validation(
                "hml_calibration",
                format!("unknown value `{other}`"),
            )),
        }
    }
}

/// Tests for a zero spread between the highest and lowest point of the curve.
///
/// Standard errors use the plug-in scale with [`grand_mean_correlation`].
pub fn test_high_minus_low(
    curve: &MuCurve,
    var: &VarianceEstimates,
    sim: &GaussianSimSpec,
    calibration: HmlCalibration,
) -> Result<TestResult> {
    sim.validate()?;
    let k = curve.len();
    if var.plugin_var.len() != k {
        return Err(Error::validation(
            "variances",
            "grid size differs from the curve",
        ));
    }
    let sel = high_minus_low_point(curve);
    let (s, d) = (sel.star, sel.dblstar);
    let details = |se_diff| TestDetails::HighMinusLow {
        selection: sel,
        calibration,
        se_diff,
    };
    if s == d {
        return Ok(TestResult::new(0.0, 0.0, sim.alpha, details(0.0)));
    }
    let se: Vec<f64> = var
        .plugin_var
        .iter()
        .zip(&curve.effective_t)
        .map(|(v, &t)| (v.max(0.0) / t as f64).sqrt())
        .collect();
    let corr = clip_to_correlation(&grand_mean_correlation(curve, var)?, EIGEN_FLOOR)?;
    let se_diff = (se[s] * se[s] + se[d] * se[d] - 2.0 * corr[(s, d)] * se[s] * se[d])
        .max(0.0)
        .sqrt();
    let critical = match calibration {
        HmlCalibration::Range => {
            let root = symmetric_sqrt(&corr)?;
            let draws = SupDraws::simulate(k, Some(&root), sim, |z| {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for (x, w) in z.iter().zip(&se) {
                    lo = lo.min(x * w);
                    hi = hi.max(x * w);
                }
                hi - lo
            })?;
            draws.quantile(sim.alpha)?
        }
        HmlCalibration::SelectedPair if se_diff > 0.0 => {
            let pair = DMatrix::from_row_slice(2, 2, &[1.0, corr[(s, d)], corr[(s, d)], 1.0]);
            let root = symmetric_sqrt(&clip_to_correlation(&pair, EIGEN_FLOOR)?)?;
            let (a, b) = (se[s], se[d]);
            let draws = SupDraws::simulate(2, Some(&root), sim, |z| (a * z[0] - b * z[1]).abs())?;
            draws.quantile(sim.alpha)?
        }
        HmlCalibration::SelectedPair => 0.0,
    };
    Ok(TestResult::new(
        sel.spread,
        critical,
        sim.alpha,
        details(se_diff),
    ))
}

/// Sup test over butterfly contrasts; degenerate contrasts are left out.
pub fn test_butterfly(bv: &ButterflyVariance, sim: &GaussianSimSpec) -> Result<TestResult> {
    sim.validate()?;
    let keep: Vec<usize> = (0..bv.triples.len())
        .filter(|&k| !bv.degenerate[k])
        .collect();
    if keep.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {} butterfly contrasts have zero variance",
            bv.triples.len()
        )));
    }
    let (mut stat, mut best) = (f64::NEG_INFINITY, keep[0]);
    for &k in &keep {
        let z = (bv.effective_t[k] as f64 * bv.ratio[k]).sqrt() * bv.d_bar[k].abs()
            / bv.sigma_d[k].sqrt();
        if z > stat {
            stat = z;
            best = k;
        }
    }
    let cov = DMatrix::from_fn(keep.len(), keep.len(), |a, b| bv.cov[(keep[a], keep[b])]);
    let corr = covariance_to_correlation(&cov, EIGEN_FLOOR)?;
    let q = sup_gaussian_quantile(&corr, sim, SupMode::AbsSup)?;
    Ok(TestResult::new(
        stat,
        q,
        sim.alpha,
        TestDetails::Butterfly {
            triple: bv.triples[best],
            used: keep.len(),
            excluded: bv.triples.len() - keep.len(),
            ratio_min: bv.ratio_min[best],
            ratio_max: bv.ratio_max[best],
        },
    ))
}

/// Cached `max_j |Z_j|` draws per number of bins.
#[derive(Debug, Clone)]
pub struct MaxAbsCache {
    sim: GaussianSimSpec,
    draws: HashMap<usize, SupDraws>,
}

impl MaxAbsCache {
    pub fn new(sim: GaussianSimSpec) -> Self {
        Self {
            sim,
            draws: HashMap::new(),
        }
    }

    pub fn draws(&mut self, j: usize) -> Result<&SupDraws> {
        if !self.draws.contains_key(&j) {
            let d = SupDraws::iid_max_abs(j, &self.sim.derive(j as u64))?;
            self.draws.insert(j, d);
        }
        Ok(&self.draws[&j])
    }

    pub fn quantile(&mut self, j: usize, alpha: f64) -> Result<f64> {
        self.draws(j)?.quantile(alpha)
    }
}

/// Band for `M_t(beta)` at the period in row `row` of the curve.
///
/// `M_hat_t(beta) +/- sigma_t(beta)^{1/2} q sqrt(J_t / n_t)` with `q` the
/// quantile of the largest of `J_t` independent `|N(0, 1)|`.
pub fn fixed_t_band(
    curve: &MuCurve,
    row: usize,
    sigma_t: &[f64],
    stats: &BinStats,
    cache: &mut MaxAbsCache,
    alpha: f64,
) -> Result<Band> {
    let center = curve
        .values_t
        .get(row)
        .ok_or_else(|| Error::validation("row", "no such period in the curve"))?
        .clone();
    if curve.periods[row] != stats.t || sigma_t.len() != center.len() {
        return Err(Error::validation("sigma_t", "does not match the curve row"));
    }
    let q = cache.quantile(stats.j_count, alpha)?;
    let factor = (stats.j_count as f64 / stats.n_t as f64).sqrt();
    let se: Vec<f64> = sigma_t.iter().map(|s| s.max(0.0).sqrt() * factor).collect();
    Ok(Band {
        kind: BandKind::FixedT,
        grid: curve.grid.clone(),
        center,
        half_width: se.iter().map(|s| s * q).collect(),
        se,
        q_hat: q,
        alpha,
        period: Some(stats.t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sorting::MuCurve;

    fn sim(draws: usize) -> GaussianSimSpec {
        GaussianSimSpec {
            draws,
            alpha: 0.05,
            seed: 99,
        }
    }

    #[test]
    fn scalar_quantile_matches_normal() {
        let q = sup_gaussian_quantile(&DMatrix::identity(1, 1), &sim(200_000), SupMode::AbsSup)
            .unwrap();
        assert!((q - 1.959964).abs() < 0.02, "{q}");
        let q1 = sup_gaussian_quantile(&DMatrix::identity(1, 1), &sim(200_000), SupMode::Signed)
            .unwrap();
        assert!((q1 - 1.644854).abs() < 0.02, "{q1}");
    }

    #[test]
    fn perfectly_correlated_is_one_dimensional() {
        let corr = DMatrix::from_element(6, 6, 1.0);
        let q = sup_gaussian_quantile(&corr, &sim(100_000), SupMode::AbsSup).unwrap();
        assert!((q - 1.959964).abs() < 0.03, "{q}");
    }

    #[test]
    fn quantile_monotone_in_alpha_on_shared_draws() {
        let corr = DMatrix::from_fn(5, 5, |i, j| 0.5_f64.powi((i as i32 - j as i32).abs()));
        let d = SupDraws::correlated(&corr, &sim(5000), SupMode::AbsSup).unwrap();
        let qs: Vec<f64> = [0.2, 0.1, 0.05, 0.01]
            .iter()
            .map(|&a| d.quantile(a).unwrap())
            .collect();
        assert!(qs.windows(2).all(|w| w[0] <= w[1]), "{qs:?}");
    }

    #[test]
    fn draws_are_deterministic() {
        let corr = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.3 });
        let a = SupDraws::correlated(&corr, &sim(3000), SupMode::AbsSup).unwrap();
        let b = SupDraws::correlated(&corr, &sim(3000), SupMode::AbsSup).unwrap();
        assert_eq!(a, b);
        assert!(sim(50).validate().is_err());
    }

    #[test]
    fn iid_max_abs_known_quantile() {
        // P(max_j |Z_j| <= q) = (2 Phi(q) - 1)^J; for J = 1 this is 1.96.
        let q = SupDraws::iid_max_abs(1, &sim(200_000))
            .unwrap()
            .quantile(0.05)
            .unwrap();
        assert!((q - 1.959964).abs() < 0.02, "{q}");
        // J = 10: q solves (2 Phi(q) - 1)^10 = 0.95, q = 2.8027.
        let q = SupDraws::iid_max_abs(10, &sim(200_000))
            .unwrap()
            .quantile(0.05)
            .unwrap();
        assert!((q - 2.8027).abs() < 0.03, "{q}");
    }

    fn var_from(fm: DMatrix<f64>, plugin: Vec<f64>) -> VarianceEstimates {
        VarianceEstimates {
            fm_cov: fm,
            plugin_var: plugin,
            sigma_j2: vec![],
            sigma_t: vec![],
            condmean: crate::variance::CondMeanKind::Ar1,
        }
    }

    #[test]
    fn band_nesting_and_zero_test() {
        let curve = MuCurve::from_values(vec![0.0, 1.0, 2.0], vec![0.5, 0.6, 0.8], 100);
        let fm = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.5, 0.2, 0.5, 1.0]);
        let var = var_from(fm, vec![0.5, 0.5, 0.5]);
        let draws = grand_mean_draws(&curve, &var, &sim(5000)).unwrap();
        let wide =
            grand_mean_band_from(&curve, &var, &draws, GrandMeanTarget::MuLimit, 0.01).unwrap();
        let narrow =
            grand_mean_band_from(&curve, &var, &draws, GrandMeanTarget::MuLimit, 0.10).unwrap();
        for v in 0..3 {
            assert!(wide.lower()[v] <= narrow.lower()[v] && wide.upper()[v] >= narrow.upper()[v]);
        }
        let sharp =
            grand_mean_band_from(&curve, &var, &draws, GrandMeanTarget::MuBarT, 0.05).unwrap();
        assert!((sharp.se[0] - (0.5f64 / 100.0).sqrt()).abs() < 1e-15);
        // Band sits well above zero: reject.
        let t = test_grand_mean_zero(&sharp);
        assert!(t.reject && t.statistic > t.critical_value);
        assert!(sharp.lower().iter().all(|&l| l > 0.0));
    }

    #[test]
    fn zero_noise_band_collapses() {
        let curve = MuCurve::from_values(vec![0.0, 1.0], vec![0.3, 0.4], 50);
        let var = var_from(DMatrix::zeros(2, 2), vec![0.0, 0.0]);
        let b = grand_mean_band(&curve, &var, &sim(1000), GrandMeanTarget::MuBarT).unwrap();
        assert!(b.half_width.iter().all(|&h| h == 0.0));
        assert!(b.covers(&[0.3, 0.4]));
    }

    #[test]
    fn constant_curve_never_rejects_hml() {
        let mut curve = MuCurve::from_values(vec![0.0, 1.0, 2.0], vec![0.2; 3], 2);
        curve.values_t = vec![vec![0.1; 3], vec![0.3; 3]];
        curve.periods = vec![0, 1];
        let var = var_from(DMatrix::from_element(3, 3, 0.01), vec![0.01; 3]);
        let t = test_high_minus_low(&curve, &var, &sim(1000), HmlCalibration::Range).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!(!t.reject);
    }

    #[test]
    fn hml_critical_value_is_two_sided_normal() {
        let mut curve = MuCurve::from_values(vec![0.0, 1.0], vec![0.0, 1.0], 100);
        curve.values_t = vec![vec![0.0, 0.0]; 100];
        curve.periods = (0..100).collect();
        let fm = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let var = var_from(fm, vec![1.0, 2.0]);
        let t =
            test_high_minus_low(&curve, &var, &sim(200_000), HmlCalibration::SelectedPair).unwrap();
        let sd = (1.0f64 + 2.0 - 0.6).sqrt() / 10.0;
        assert!(
            (t.critical_value / sd - 1.96).abs() < 0.02,
            "{}",
            t.critical_value / sd
        );
        assert!(t.reject);
    }

    #[test]
    fn hml_range_of_two_independent_points() {
        // Range of two iid N(0, 1) is |Z1 - Z2| ~ sqrt(2) |Z|.
        let mut curve = MuCurve::from_values(vec![0.0, 1.0], vec![0.0, 1.0], 100);
        curve.values_t = vec![vec![0.0, 0.0]; 100];
        curve.periods = (0..100).collect();
        let var = var_from(DMatrix::identity(2, 2), vec![100.0, 100.0]);
        let t = test_high_minus_low(&curve, &var, &sim(200_000), HmlCalibration::Range).unwrap();
        assert!(
            (t.critical_value - 1.96 * 2f64.sqrt()).abs() < 0.03,
            "{}",
            t.critical_value
        );
        assert!(!t.reject);
    }

    #[test]
    fn hml_range_dominates_selected_pair() {
        let mut curve = MuCurve::from_values(
            (0..6).map(f64::from).collect(),
            vec![0.3, 0.1, 0.5, 0.2, 0.0, 0.4],
            50,
        );
        curve.values_t = vec![vec![0.0; 6]; 50];
        curve.periods = (0..50).collect();
        let var = var_from(DMatrix::identity(6, 6), vec![1.0; 6]);
        let range = test_high_minus_low(&curve, &var, &sim(20_000), HmlCalibration::Range).unwrap();
        let pair =
            test_high_minus_low(&curve, &var, &sim(20_000), HmlCalibration::SelectedPair).unwrap();
        assert_eq!(range.statistic, pair.statistic);
        assert!(range.critical_value > pair.critical_value);
    }

    #[test]
    fn overlap_shrinks_correlation() {
        let n = f64::NAN;
        let mut curve = MuCurve::from_values(vec![0.0, 1.0], vec![0.0, 0.0], 0);
        curve.values_t = vec![
            vec![1.0, 1.0],
            vec![-1.0, -1.0],
            vec![1.0, n],
            vec![-1.0, n],
        ];
        curve.periods = (0..4).collect();
        curve.effective_t = vec![4, 2];
        let var = var_from(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
            vec![1.0, 1.0],
        );
        let c = grand_mean_correlation(&curve, &var).unwrap();
        assert!(
            (c[(0, 1)] - 0.5 * 2.0 / 8f64.sqrt()).abs() < 1e-12,
            "{}",
            c[(0, 1)]
        );
    }

    #[test]
    fn single_triple_butterfly_is_z_test() {
        let bv = ButterflyVariance {
            triples: vec![Triple {
                lo: 0,
                mid: 1,
                hi: 2,
            }],
            d_bar: vec![0.05],
            sigma_d: vec![2.0],
            cov: DMatrix::from_element(1, 1, 2.0),
            ratio: vec![20.0],
            ratio_min: vec![20.0],
            ratio_max: vec![20.0],
            effective_t: vec![100],
            degenerate: vec![false],
        };
        let t = test_butterfly(&bv, &sim(200_000)).unwrap();
        let z = (100.0f64 * 20.0).sqrt() * 0.05 / 2f64.sqrt();
        assert!((t.statistic - z).abs() < 1e-12);
        assert!((t.critical_value - 1.96).abs() < 0.02);
        assert_eq!(t.reject, z > t.critical_value);

        let mut all_zero = bv.clone();
        all_zero.degenerate = vec![true];
        assert!(matches!(
            test_butterfly(&all_zero, &sim(1000)),
            Err(Error::Degenerate(_))
        ));
    }
}
