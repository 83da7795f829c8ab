//! Replication harness: simulate, estimate, infer and score against the truth.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dgp::{simulate_factor, simulate_panel, DgpSpec, GroundTruth};
use crate::error::{Error, Result};
use crate::inference::{
    fixed_t_band, grand_mean_band_from, grand_mean_draws, test_butterfly, test_grand_mean_zero,
    test_high_minus_low, GaussianSimSpec, GrandMeanTarget, HmlCalibration, MaxAbsCache,
};
use crate::kernel::{
    estimate_beta_panel, first_stage_variance, Coefficients, KernelKind, KernelSpec,
};
use crate::rng::{stream_key, substream};
use crate::sorting::{default_grid, mu_curve, sort_panel, MuCurve};
use crate::variance::{
    bin_stats, estimate_variances, fit_factor_condmean, grid_triples, plugin_variance, sigma_d,
    CondMeanKind,
};

/// Bandwidth as a function of the sample length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HRule {
    /// `h = c T^exponent`
    Power {
        c: f64,
        exponent: f64,
    },
    Fixed(f64),
}

impl Default for HRule {
    fn default() -> Self {
        HRule::Power {
            c: 1.0,
            exponent: -1.0 / 3.0,
        }
    }
}

impl HRule {
    pub fn h(&self, periods: usize) -> f64 {
        match *self {
            HRule::Power { c, exponent } => c * (periods as f64).powf(exponent),
            HRule::Fixed(h) => h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRule {
    /// Equispaced between two quantiles of the pooled estimated betas.
    Quantile {
        points: usize,
        lo: f64,
        hi: f64,
    },
    Fixed(Vec<f64>),
}

impl Default for GridRule {
    fn default() -> Self {
        GridRule::Quantile {
            points: 25,
            lo: 0.025,
            hi: 0.975,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// Max and RMS first-stage beta error.
    FirstStage,
    /// Standardized first-stage errors at random `(i, t0)`.
    Normality,
    /// Pointwise intervals, variance means, uniform bands.
    GrandMean,
    GrandMeanZero,
    HighMinusLow,
    Butterfly,
    FixedT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub spec: DgpSpec,
    pub reps: usize,
    pub h_rule: HRule,
    pub kernel: KernelKind,
    pub j1: usize,
    pub grid: GridRule,
    pub sim: GaussianSimSpec,
    pub condmean: CondMeanKind,
    pub hml: HmlCalibration,
    pub checks: Vec<Check>,
    pub base_seed: u64,
    /// Random `(i, t0)` draws per replication for the normality check.
    pub normality_points: usize,
    /// Innovation quantile above which a period counts as a large surprise.
    pub surprise_quantile: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            spec: DgpSpec::default(),
            reps: 100,
            h_rule: HRule::default(),
            kernel: KernelKind::Uniform,
            j1: 10,
            grid: GridRule::default(),
            sim: GaussianSimSpec::default(),
            condmean: CondMeanKind::Ar1,
            hml: HmlCalibration::Range,
            checks: vec![Check::FirstStage, Check::GrandMean],
            base_seed: 1,
            normality_points: 20,
            surprise_quantile: 0.8,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.sim.validate()?;
        if self.reps == 0 {
            return Err(Error::validation("reps", "need at least one replication"));
        }
        let h = self.h_rule.h(self.spec.periods);
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::validation(
                "h",
                format!("rule gives h = {h} outside (0, 1)"),
            ));
        }
        if self.j1 < 2 {
            return Err(Error::validation("J1", "must be at least 2"));
        }
        if !(self.surprise_quantile > 0.0 && self.surprise_quantile < 1.0) {
            return Err(Error::validation("surprise_quantile", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn has(&self, c: Check) -> bool {
        self.checks.contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageRecord {
    pub max_abs_err: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityRecord {
    pub z_alpha: Vec<f64>,
    pub z_beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandMeanRecord {
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    /// `T^{-1} sum_t mu_t(beta)` over each point's unmasked periods.
    pub truth: Vec<f64>,
    pub plugin_var: Vec<f64>,
    pub plugin_var_zero_cm: Vec<f64>,
    pub fm_var: Vec<f64>,
    pub plugin_cover: Vec<bool>,
    pub fm_cover: Vec<bool>,
    pub uniform_sharp: bool,
    pub uniform_conservative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedTRecord {
    /// Share of periods whose band covers `M_t` on the whole grid.
    pub cover_m: f64,
    pub cover_m_surprise: f64,
    /// Same bands scored against `mu_t`, on large-surprise periods.
    pub cover_mu_surprise: f64,
    pub periods: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub h: f64,
    pub first_stage: Option<FirstStageRecord>,
    pub normality: Option<NormalityRecord>,
    pub grand_mean: Option<GrandMeanRecord>,
    pub zero_reject: Option<bool>,
    pub hml_reject: Option<bool>,
    pub butterfly_reject: Option<bool>,
    pub fixed_t: Option<FixedTRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub outcome: std::result::Result<RepOutcome, String>,
}

fn z_crit(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - alpha / 2.0)
}

/// Truth averaged over each grid point's unmasked periods.
fn truth_on_curve(truth: &GroundTruth, curve: &MuCurve) -> Vec<f64> {
    (0..curve.len())
        .map(|v| {
            let rows: Vec<usize> = (0..curve.periods.len())
                .filter(|&r| curve.bin_index[r][v].is_some())
                .map(|r| curve.periods[r])
                .collect();
            truth.grand_mean_over(&rows, curve.grid[v])
        })
        .collect()
}

/// One replication, end to end. Stream `r` under the base seed drives every draw.
pub fn run_replication(cfg: &McConfig, r: usize) -> ReplicationRecord {
    ReplicationRecord {
        index: r,
        outcome: replicate(cfg, r).map_err(|e| e.to_string()),
    }
}

fn replicate(cfg: &McConfig, r: usize) -> Result<RepOutcome> {
    let spec = &cfg.spec;
    let seed = stream_key(cfg.base_seed, r as u64);
    let mut rng = substream(seed, 0, 0);
    let factor = simulate_factor(spec, &mut rng)?;
    let (panel, truth) = simulate_panel(spec, &factor, &mut rng)?;

    let h = cfg.h_rule.h(spec.periods);
    let kernel = KernelSpec::new(cfg.kernel, h)?;
    let betas = estimate_beta_panel(&panel, &factor, &kernel)?;
    let mut out = RepOutcome {
        h,
        first_stage: None,
        normality: None,
        grand_mean: None,
        zero_reject: None,
        hml_reject: None,
        butterfly_reject: None,
        fixed_t: None,
    };

    if cfg.has(Check::FirstStage) {
        let (mut max, mut ss, mut n) = (0.0_f64, 0.0, 0usize);
        for t in betas.valid_periods() {
            for i in 0..spec.n {
                if let Some(b) = betas.beta(t, i) {
                    let e = b - truth.beta_at(t, i);
                    max = max.max(e.abs());
                    ss += e * e;
                    n += 1;
                }
            }
        }
        out.first_stage = Some(FirstStageRecord {
            max_abs_err: max,
            rmse: (ss / n.max(1) as f64).sqrt(),
        });
    }

    if cfg.has(Check::Normality) {
        let mut pick = substream(seed, 1, 0);
        // The variance estimate needs residuals over a full window before t0.
        let (lo, hi) = (
            betas.valid_start + kernel.window(spec.periods),
            betas.valid_end,
        );
        let mut rec = NormalityRecord {
            z_alpha: Vec::new(),
            z_beta: Vec::new(),
        };
        for _ in 0..if lo <= hi { cfg.normality_points } else { 0 } {
            let t0 = pick.random_range(lo..=hi);
            let i = pick.random_range(0..spec.n);
            let (Some(a), Some(b)) = (betas.alpha(t0, i), betas.beta(t0, i)) else {
                continue;
            };
            let fsv = first_stage_variance(&betas, t0)?;
            let est = Coefficients { alpha: a, beta: b };
            let tru = Coefficients {
                alpha: truth.alpha_at(t0, i),
                beta: truth.beta_at(t0, i),
            };
            if let Some(z) = fsv.standardize(spec.periods, h, est, tru) {
                rec.z_alpha.push(z[0]);
                rec.z_beta.push(z[1]);
            }
        }
        out.normality = Some(rec);
    }

    let needs_curve = [
        Check::GrandMean,
        Check::GrandMeanZero,
        Check::HighMinusLow,
        Check::Butterfly,
        Check::FixedT,
    ]
    .iter()
    .any(|&c| cfg.has(c));
    if !needs_curve {
        return Ok(out);
    }

    let sorted = sort_panel(&panel, &betas, cfg.j1, false)?;
    let grid = match &cfg.grid {
        GridRule::Quantile { points, lo, hi } => {
            default_grid(&betas.pooled_betas(), *points, *lo, *hi)?
        }
        GridRule::Fixed(g) => g.clone(),
    };
    let curve = mu_curve(&sorted.partitions, &sorted.returns, &grid)?;
    let stats = bin_stats(&sorted, &betas)?;
    let cm = fit_factor_condmean(&factor, cfg.condmean)?;
    let var = estimate_variances(&stats, &betas, &curve, &cm)?;
    let sim = cfg.sim.derive(seed);

    if cfg.has(Check::GrandMean) || cfg.has(Check::GrandMeanZero) {
        let draws = grand_mean_draws(&curve, &var, &sim)?;
        let sharp = grand_mean_band_from(&curve, &var, &draws, GrandMeanTarget::MuBarT, sim.alpha)?;
        if cfg.has(Check::GrandMeanZero) {
            out.zero_reject = Some(test_grand_mean_zero(&sharp).reject);
        }
        if cfg.has(Check::GrandMean) {
            let conservative =
                grand_mean_band_from(&curve, &var, &draws, GrandMeanTarget::MuLimit, sim.alpha)?;
            let tru = truth_on_curve(&truth, &curve);
            let z = z_crit(sim.alpha);
            let fm_var = var.fm_var();
            let cover = |scale: &[f64]| -> Vec<bool> {
                (0..curve.len())
                    .map(|v| {
                        let se = (scale[v].max(0.0) / curve.effective_t[v] as f64).sqrt();
                        (curve.values[v] - tru[v]).abs() <= z * se
                    })
                    .collect()
            };
            let zero_cm = fit_factor_condmean(&factor, CondMeanKind::Zero)?;
            out.grand_mean = Some(GrandMeanRecord {
                grid: curve.grid.clone(),
                estimate: curve.values.clone(),
                plugin_cover: cover(&var.plugin_var),
                fm_cover: cover(&fm_var),
                plugin_var_zero_cm: plugin_variance(&stats, betas.factor(), &zero_cm, &curve)?,
                plugin_var: var.plugin_var.clone(),
                fm_var,
                uniform_sharp: sharp.covers(&tru),
                uniform_conservative: conservative.covers(&tru),
                truth: tru,
            });
        }
    }

    if cfg.has(Check::HighMinusLow) {
        out.hml_reject = Some(test_high_minus_low(&curve, &var, &sim.derive(1), cfg.hml)?.reject);
    }

    if cfg.has(Check::Butterfly) {
        let bv = sigma_d(&curve, &stats, &grid_triples(curve.len()))?;
        out.butterfly_reject = Some(test_butterfly(&bv, &sim.derive(2))?.reject);
    }

    if cfg.has(Check::FixedT) {
        let mut cache = MaxAbsCache::new(sim.derive(3));
        let cm_true = &truth.cond_mean_f;
        let surprise: Vec<f64> = curve
            .periods
            .iter()
            .map(|&t| (factor.values[t] - cm_true[t]).abs())
            .collect();
        let mut sorted_s = surprise.clone();
        sorted_s.sort_by(f64::total_cmp);
        let cut = crate::sorting::quantile(&sorted_s, cfg.surprise_quantile);
        let (mut cm_all, mut cm_big, mut cmu_big, mut n_big) = (0usize, 0usize, 0usize, 0usize);
        for row in 0..curve.periods.len() {
            let t = curve.periods[row];
            let band = fixed_t_band(
                &curve,
                row,
                &var.sigma_t[row],
                &stats[row],
                &mut cache,
                sim.alpha,
            )?;
            let m: Vec<f64> = curve.grid.iter().map(|&b| truth.m(t, b)).collect();
            let mu: Vec<f64> = curve.grid.iter().map(|&b| truth.mu(t, b)).collect();
            let covers_m = band.covers(&m);
            cm_all += covers_m as usize;
            if surprise[row] > cut {
                n_big += 1;
                cm_big += covers_m as usize;
                cmu_big += band.covers(&mu) as usize;
            }
        }
        let rows = curve.periods.len();
        out.fixed_t = Some(FixedTRecord {
            cover_m: cm_all as f64 / rows as f64,
            cover_m_surprise: cm_big as f64 / n_big.max(1) as f64,
            cover_mu_surprise: cmu_big as f64 / n_big.max(1) as f64,
            periods: rows,
        });
    }
    Ok(out)
}

/// A proportion with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub se: f64,
    pub reps: usize,
}

impl Rate {
    pub fn from_mean(rate: f64, reps: usize) -> Self {
        Self {
            rate,
            se: (rate * (1.0 - rate) / reps as f64).sqrt(),
            reps,
        }
    }

    pub fn from_flags<I: IntoIterator<Item = bool>>(flags: I) -> Self {
        let (mut hit, mut n) = (0usize, 0usize);
        for f in flags {
            hit += f as usize;
            n += 1;
        }
        Self::from_mean(hit as f64 / n.max(1) as f64, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageTable {
    pub mean_max_abs_err: f64,
    pub mean_rmse: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityTable {
    pub cover_alpha: Rate,
    pub cover_beta: Rate,
    pub mean_z_beta: f64,
    pub var_z_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandMeanTable {
    pub mean_grid: Vec<f64>,
    pub plugin_cover: Vec<Rate>,
    pub fm_cover: Vec<Rate>,
    pub mean_plugin_var: Vec<f64>,
    pub mean_fm_var: Vec<f64>,
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    /// Share of replications with the zero-mean plug-in at least the fitted one everywhere.
    pub zero_cm_dominates: Rate,
    pub uniform_sharp: Rate,
    pub uniform_conservative: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedTTable {
    pub cover_m: Rate,
    pub cover_m_surprise: Rate,
    pub cover_mu_surprise: Rate,
}

/// Every table the harness emits. Two runs with the same configuration
/// produce equal tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTables {
    pub reps: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub failures: Vec<(usize, String)>,
    pub first_stage: Option<FirstStageTable>,
    pub normality: Option<NormalityTable>,
    pub grand_mean: Option<GrandMeanTable>,
    pub zero_reject: Option<Rate>,
    pub hml_reject: Option<Rate>,
    pub butterfly_reject: Option<Rate>,
    pub fixed_t: Option<FixedTTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub wall_time_secs: f64,
    pub tables: McTables,
}

impl McReport {
    /// Failure share within the 5% budget.
    pub fn within_failure_budget(&self) -> bool {
        self.tables.failed as f64 <= 0.05 * self.tables.reps as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    s / n.max(1) as f64
}

/// Folds replication records (in index order) into report tables.
pub fn aggregate(records: &[ReplicationRecord]) -> Result<McTables> {
    let ok: Vec<&RepOutcome> = records
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .collect();
    let failures: Vec<(usize, String)> = records
        .iter()
        .filter_map(|r| r.outcome.as_ref().err().map(|e| (r.index, e.clone())))
        .collect();
    if ok.is_empty() {
        return Err(Error::EmptySuite {
            failed: failures.len(),
        });
    }

    let fs: Vec<&FirstStageRecord> = ok.iter().filter_map(|o| o.first_stage.as_ref()).collect();
    let first_stage = (!fs.is_empty()).then(|| FirstStageTable {
        mean_max_abs_err: mean(fs.iter().map(|r| r.max_abs_err)),
        mean_rmse: mean(fs.iter().map(|r| r.rmse)),
        reps: fs.len(),
    });

    let nr: Vec<&NormalityRecord> = ok.iter().filter_map(|o| o.normality.as_ref()).collect();
    let normality = (!nr.is_empty()).then(|| {
        let z = z_crit(0.05);
        let za: Vec<f64> = nr.iter().flat_map(|r| r.z_alpha.iter().copied()).collect();
        let zb: Vec<f64> = nr.iter().flat_map(|r| r.z_beta.iter().copied()).collect();
        let mb = mean(zb.iter().copied());
        NormalityTable {
            cover_alpha: Rate::from_flags(za.iter().map(|x| x.abs() <= z)),
            cover_beta: Rate::from_flags(zb.iter().map(|x| x.abs() <= z)),
            mean_z_beta: mb,
            var_z_beta: mean(zb.iter().map(|x| (x - mb).powi(2))),
        }
    });

    let gm: Vec<&GrandMeanRecord> = ok.iter().filter_map(|o| o.grand_mean.as_ref()).collect();
    let grand_mean = if gm.is_empty() {
        None
    } else {
        let k = gm[0].grid.len();
        if gm.iter().any(|r| r.grid.len() != k) {
            return Err(Error::validation(
                "grid",
                "grid size changed across replications",
            ));
        }
        let col = |f: &dyn Fn(&GrandMeanRecord, usize) -> f64| -> Vec<f64> {
            (0..k).map(|v| mean(gm.iter().map(|r| f(r, v)))).collect()
        };
        Some(GrandMeanTable {
            mean_grid: col(&|r, v| r.grid[v]),
            plugin_cover: (0..k)
                .map(|v| Rate::from_flags(gm.iter().map(|r| r.plugin_cover[v])))
                .collect(),
            fm_cover: (0..k)
                .map(|v| Rate::from_flags(gm.iter().map(|r| r.fm_cover[v])))
                .collect(),
            mean_plugin_var: col(&|r, v| r.plugin_var[v]),
            mean_fm_var: col(&|r, v| r.fm_var[v]),
            bias: col(&|r, v| r.estimate[v] - r.truth[v]),
            rmse: col(&|r, v| (r.estimate[v] - r.truth[v]).powi(2))
                .iter()
                .map(|x| x.sqrt())
                .collect(),
            zero_cm_dominates: Rate::from_flags(gm.iter().map(|r| {
                r.plugin_var_zero_cm
                    .iter()
                    .zip(&r.plugin_var)
                    .all(|(z, a)| z >= a)
            })),
            uniform_sharp: Rate::from_flags(gm.iter().map(|r| r.uniform_sharp)),
            uniform_conservative: Rate::from_flags(gm.iter().map(|r| r.uniform_conservative)),
        })
    };

    let flags = |f: &dyn Fn(&RepOutcome) -> Option<bool>| -> Option<Rate> {
        let v: Vec<bool> = ok.iter().filter_map(|o| f(o)).collect();
        (!v.is_empty()).then(|| Rate::from_flags(v))
    };

    let ft: Vec<&FixedTRecord> = ok.iter().filter_map(|o| o.fixed_t.as_ref()).collect();
    let fixed_t = (!ft.is_empty()).then(|| FixedTTable {
        cover_m: Rate::from_mean(mean(ft.iter().map(|r| r.cover_m)), ft.len()),
        cover_m_surprise: Rate::from_mean(mean(ft.iter().map(|r| r.cover_m_surprise)), ft.len()),
        cover_mu_surprise: Rate::from_mean(mean(ft.iter().map(|r| r.cover_mu_surprise)), ft.len()),
    });

    Ok(McTables {
        reps: records.len(),
        succeeded: ok.len(),
        failed: failures.len(),
        failures,
        first_stage,
        normality,
        grand_mean,
        zero_reject: flags(&|o| o.zero_reject),
        hml_reject: flags(&|o| o.hml_reject),
        butterfly_reject: flags(&|o| o.butterfly_reject),
        fixed_t,
    })
}

pub const SCHEMA_VERSION: u32 = 1;

/// Runs all replications in parallel and aggregates them in index order.
pub fn run_suite(cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let start = Instant::now();
    let records: Vec<ReplicationRecord> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| run_replication(cfg, r))
        .collect();
    let tables = aggregate(&records)?;
    Ok(McReport {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::Loading;

    fn small() -> McConfig {
        McConfig {
            spec: DgpSpec {
                n: 60,
                periods: 200,
                ..DgpSpec::default()
            },
            reps: 3,
            grid: GridRule::Quantile {
                points: 9,
                lo: 0.2,
                hi: 0.8,
            },
            sim: GaussianSimSpec {
                draws: 500,
                ..GaussianSimSpec::default()
            },
            checks: vec![
                Check::FirstStage,
                Check::Normality,
                Check::GrandMean,
                Check::GrandMeanZero,
                Check::HighMinusLow,
                Check::Butterfly,
                Check::FixedT,
            ],
            ..McConfig::default()
        }
    }

    #[test]
    fn noiseless_replication_is_exact() {
        let cfg = McConfig {
            spec: DgpSpec {
                n: 40,
                periods: 80,
                sigma_eps_coeffs: vec![0.0],
                loading: Loading::constant(1.0),
                ..DgpSpec::default()
            },
            reps: 1,
            checks: vec![Check::FirstStage],
            ..small()
        };
        let rec = run_replication(&cfg, 0);
        let fs = rec.outcome.unwrap().first_stage.unwrap();
        assert!(fs.max_abs_err < 1e-6, "{}", fs.max_abs_err);
    }

    #[test]
    fn same_index_same_record() {
        let cfg = small();
        assert_eq!(run_replication(&cfg, 2), run_replication(&cfg, 2));
        assert_ne!(run_replication(&cfg, 1), run_replication(&cfg, 2));
    }

    #[test]
    fn failures_are_isolated() {
        let good = small();
        let bad = McConfig {
            spec: DgpSpec {
                // Identical betas everywhere: the sort cannot form bins.
                eta_lo: 1.0,
                eta_hi: 1.0,
                loading: Loading::constant(1.0),
                sigma_eps_coeffs: vec![0.0],
                ..good.spec.clone()
            },
            ..good.clone()
        };
        let mut records: Vec<ReplicationRecord> =
            (0..3).map(|r| run_replication(&good, r)).collect();
        let failed = run_replication(&bad, 3);
        assert!(failed.outcome.is_err());
        records.push(failed);
        let t = aggregate(&records).unwrap();
        assert_eq!((t.succeeded, t.failed), (3, 1));
        assert!(matches!(
            aggregate(&records[3..]),
            Err(Error::EmptySuite { failed: 1 })
        ));
    }

    #[test]
    fn rate_arithmetic() {
        let r = Rate::from_flags([true, false]);
        assert_eq!(r.rate, 0.5);
        assert!((r.se - 0.353_553).abs() < 1e-6);
        assert_eq!(Rate::from_flags([true; 4]).rate, 1.0);
    }

    fn record(index: usize, reject: bool, cover: [bool; 2]) -> ReplicationRecord {
        ReplicationRecord {
            index,
            outcome: Ok(RepOutcome {
                h: 0.1,
                first_stage: Some(FirstStageRecord {
                    max_abs_err: index as f64,
                    rmse: 1.0,
                }),
                normality: None,
                grand_mean: Some(GrandMeanRecord {
                    grid: vec![0.0, 1.0],
                    estimate: vec![index as f64, 0.0],
                    truth: vec![0.0, 0.0],
                    plugin_var: vec![1.0, 1.0],
                    plugin_var_zero_cm: vec![1.0, 2.0],
                    fm_var: vec![2.0, index as f64],
                    plugin_cover: cover.to_vec(),
                    fm_cover: vec![true, true],
                    uniform_sharp: cover[0] && cover[1],
                    uniform_conservative: true,
                }),
                zero_reject: Some(reject),
                hml_reject: None,
                butterfly_reject: None,
                fixed_t: None,
            }),
        }
    }

    #[test]
    fn aggregate_matches_hand_sums() {
        let recs: Vec<ReplicationRecord> = vec![
            record(0, true, [true, true]),
            record(1, false, [true, false]),
            record(2, false, [false, false]),
            record(3, true, [true, true]),
            record(4, false, [true, true]),
        ];
        let t = aggregate(&recs).unwrap();
        assert_eq!(t.zero_reject.unwrap().rate, 2.0 / 5.0);
        let g = t.grand_mean.unwrap();
        assert_eq!(g.plugin_cover[0].rate, 4.0 / 5.0);
        assert_eq!(g.plugin_cover[1].rate, 3.0 / 5.0);
        assert_eq!(g.uniform_sharp.rate, 3.0 / 5.0);
        assert_eq!(g.mean_fm_var[1], (0.0 + 1.0 + 2.0 + 3.0 + 4.0) / 5.0);
        assert_eq!(g.bias[0], 2.0);
        assert!((g.rmse[0] - (30.0f64 / 5.0).sqrt()).abs() < 1e-15);
        assert_eq!(t.first_stage.unwrap().mean_max_abs_err, 2.0);
        assert_eq!(g.zero_cm_dominates.rate, 1.0);
    }

    #[test]
    fn suite_is_deterministic() {
        let cfg = small();
        let a = run_suite(&cfg).unwrap();
        let b = run_suite(&cfg).unwrap();
        assert_eq!(a.tables, b.tables);
        assert_eq!(a.config_hash, b.config_hash);
        assert!(a.within_failure_budget());
    }
}
