//! Estimation pipeline on loaded data, shared by the command-line tools.

use crate::error::{Error, Result};
use crate::inference::{
    fixed_t_band, grand_mean_band, test_butterfly, test_grand_mean_zero, test_high_minus_low, Band,
    MaxAbsCache, TestResult,
};
use crate::kernel::{estimate_beta_panel, BetaPanel};
use crate::montecarlo::GridRule;
use crate::panel::{FactorSeries, PanelData};
use crate::sorting::{default_grid, mu_curve, sort_panel, MuCurve, SortedPanel};
use crate::variance::{
    bin_stats, estimate_variances, fit_factor_condmean, grid_triples, sigma_d, BinStats,
    VarianceEstimates,
};

use super::config::RunConfig;

#[derive(Debug, Clone)]
pub struct Estimation {
    pub h: f64,
    pub betas: BetaPanel,
    pub sorted: SortedPanel,
    pub curve: MuCurve,
    pub stats: Vec<BinStats>,
    pub var: VarianceEstimates,
}

/// Betas, sorts, the curve and its variances. `factor` must be aligned to `panel`.
pub fn estimate(panel: &PanelData, factor: &FactorSeries, cfg: &RunConfig) -> Result<Estimation> {
    let t = panel.n_periods();
    let kernel = cfg.kernel_spec(t)?;
    let betas = estimate_beta_panel(panel, factor, &kernel)?;
    let sorted = sort_panel(panel, &betas, cfg.j1, cfg.value_weighted)?;
    let grid = match &cfg.grid {
        GridRule::Quantile { points, lo, hi } => {
            default_grid(&betas.pooled_betas(), *points, *lo, *hi)?
        }
        GridRule::Fixed(g) => g.clone(),
    };
    let curve = mu_curve(&sorted.partitions, &sorted.returns, &grid)?;
    let stats = bin_stats(&sorted, &betas)?;
    let cm = fit_factor_condmean(factor, cfg.condmean)?;
    let var = estimate_variances(&stats, &betas, &curve, &cm)?;
    Ok(Estimation {
        h: kernel.h,
        betas,
        sorted,
        curve,
        stats,
        var,
    })
}

/// Uniform band of the configured kind with the zero-curve test it implies.
pub fn band(est: &Estimation, cfg: &RunConfig) -> Result<(Band, TestResult)> {
    let band = grand_mean_band(&est.curve, &est.var, &cfg.sim(1), cfg.band)?;
    let zero = test_grand_mean_zero(&band);
    Ok((band, zero))
}

pub fn high_minus_low(est: &Estimation, cfg: &RunConfig) -> Result<TestResult> {
    test_high_minus_low(&est.curve, &est.var, &cfg.sim(2), cfg.hml)
}

pub fn butterfly(est: &Estimation, cfg: &RunConfig) -> Result<TestResult> {
    let bv = sigma_d(&est.curve, &est.stats, &grid_triples(est.curve.len()))?;
    test_butterfly(&bv, &cfg.sim(3))
}

/// Fixed-t band at `cfg.fixed_t_period`, or at the last sorted period.
pub fn fixed_t(est: &Estimation, panel: &PanelData, cfg: &RunConfig) -> Result<Band> {
    let rows = &est.curve.periods;
    let row = match &cfg.fixed_t_period {
        Some(label) => {
            let t = panel
                .periods()
                .iter()
                .position(|p| p == label)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "key `fixed_t_period`: no period `{label}` in the panel"
                    ))
                })?;
            rows.iter().position(|&r| r == t).ok_or_else(|| {
                Error::InsufficientData(format!("period `{label}` has no sorted cross-section"))
            })?
        }
        None => rows
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::InsufficientData("no sorted periods".into()))?,
    };
    let mut cache = MaxAbsCache::new(cfg.sim(4));
    fixed_t_band(
        &est.curve,
        row,
        &est.var.sigma_t[row],
        &est.stats[row],
        &mut cache,
        cfg.alpha,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_factor, simulate_panel, DgpSpec};
    use crate::rng::stream;

    fn data(cfg: &RunConfig) -> (PanelData, FactorSeries) {
        let mut rng = stream(cfg.dgp.seed, 0);
        let f = simulate_factor(&cfg.dgp, &mut rng).unwrap();
        let (p, _) = simulate_panel(&cfg.dgp, &f, &mut rng).unwrap();
        (p, f)
    }

    #[test]
    fn pipeline_runs_every_step() {
        let mut cfg = RunConfig {
            dgp: DgpSpec {
                n: 80,
                periods: 150,
                ..DgpSpec::default()
            },
            draws: 500,
            ..RunConfig::default()
        };
        cfg.set("grid_points", "9").unwrap();
        let (p, f) = data(&cfg);
        let est = estimate(&p, &f, &cfg).unwrap();
        assert_eq!(est.curve.len(), 9);
        let (b, _) = band(&est, &cfg).unwrap();
        assert!(b.half_width.iter().all(|h| *h > 0.0));
        high_minus_low(&est, &cfg).unwrap();
        butterfly(&est, &cfg).unwrap();
        let last = fixed_t(&est, &p, &cfg).unwrap();
        assert_eq!(last.period, est.curve.periods.last().copied());
        cfg.fixed_t_period = Some(p.periods()[0].clone());
        assert!(fixed_t(&est, &p, &cfg).is_err());
    }
}
