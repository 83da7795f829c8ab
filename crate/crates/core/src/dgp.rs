//! Synthetic panels from the linear stochastic-coefficient model with known truth.
//!
//! Returns follow `R_it = alpha(beta_it) + beta_it * f_t + eps_it` where
//!
//! * `f_t = tau(t/T) + x_t` and `x_t = rho * x_{t-1} + u_t` is a Gaussian AR(1)
//!   started from its stationary law,
//! * `beta_it = eta_i * g(t/T)` with per-asset scale `eta_i` and a smooth loading `g`,
//! * `eps_it ~ N(0, sigma(t/T)^2)` independent across assets and of the factor.
//!
//! Under this design `E(f_t | F_{t-1}) = tau(t/T) + rho * x_{t-1}`, so the
//! conditional expected return `mu_t(beta)` and the systematic realized return
//! `M_t(beta)` are available in closed form for scoring estimators.
//!
//! The default parameters are one admissible design (nonlinear `mu`,
//! time-varying betas); they are not the only design the estimators support.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{FactorSeries, PanelData};
use crate::sorting::MuCurve;

/// Evaluates `c0 + c1 x + c2 x^2 + ...`.
pub fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Smooth beta loading `g(u) = level + amplitude * sin(2 pi cycles u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Loading {
    pub level: f64,
    pub amplitude: f64,
    pub cycles: f64,
}

impl Loading {
    pub fn constant(level: f64) -> Self {
        Self {
            level,
            amplitude: 0.0,
            cycles: 0.0,
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.level + self.amplitude * (2.0 * std::f64::consts::PI * self.cycles * u).sin()
    }
}

/// Simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    /// Number of assets.
    pub n: usize,
    /// Number of periods.
    pub periods: usize,
    pub rho: f64,
    /// Polynomial trend `tau(u)`.
    pub tau_coeffs: Vec<f64>,
    pub sigma_x: f64,
    /// Polynomial `alpha(beta)`.
    pub alpha_coeffs: Vec<f64>,
    pub loading: Loading,
    /// `eta_i ~ Uniform[eta_lo, eta_hi]`; equal bounds give a constant scale.
    pub eta_lo: f64,
    pub eta_hi: f64,
    /// Polynomial idiosyncratic s.d. `sigma(u)`.
    pub sigma_eps_coeffs: Vec<f64>,
    /// Probability that an `(i, t)` return is observed.
    pub retention: f64,
    pub seed: u64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            n: 200,
            periods: 200,
            rho: 0.5,
            tau_coeffs: vec![0.2, 0.1],
            sigma_x: 1.0,
            alpha_coeffs: vec![0.5, 0.0, 0.3],
            loading: Loading {
                level: 1.0,
                amplitude: 0.5,
                cycles: 1.0,
            },
            eta_lo: 0.5,
            eta_hi: 1.5,
            sigma_eps_coeffs: vec![1.0],
            retention: 1.0,
            seed: 20_240_601,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::validation("n", "must be at least 1"));
        }
        if self.periods < 2 {
            return Err(Error::validation("periods", "must be at least 2"));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::validation("rho", "|rho| must be < 1"));
        }
        if !(self.sigma_x >= 0.0) || !self.sigma_x.is_finite() {
            return Err(Error::validation("sigma_x", "must be finite and >= 0"));
        }
        if !(self.eta_lo <= self.eta_hi) || !self.eta_lo.is_finite() || !self.eta_hi.is_finite() {
            return Err(Error::validation("eta", "need finite eta_lo <= eta_hi"));
        }
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return Err(Error::validation("retention", "must lie in (0, 1]"));
        }
        for (name, c) in [
            ("tau_coeffs", &self.tau_coeffs),
            ("alpha_coeffs", &self.alpha_coeffs),
            ("sigma_eps_coeffs", &self.sigma_eps_coeffs),
        ] {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(name, "coefficients must be finite"));
            }
        }
        if (0..=200).any(|k| poly(&self.sigma_eps_coeffs, k as f64 / 200.0) < 0.0) {
            return Err(Error::validation(
                "sigma_eps_coeffs",
                "sigma(u) must be >= 0 on [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn tau(&self, u: f64) -> f64 {
        poly(&self.tau_coeffs, u)
    }

    pub fn alpha(&self, beta: f64) -> f64 {
        poly(&self.alpha_coeffs, beta)
    }

    pub fn sigma_eps(&self, u: f64) -> f64 {
        poly(&self.sigma_eps_coeffs, u)
    }

    /// Rescaled time `t/T` for zero-based period index `k`.
    pub fn u(&self, k: usize) -> f64 {
        (k + 1) as f64 / self.periods as f64
    }
}

/// Known truth for one simulated draw. Matrices are period-major `T x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub n: usize,
    pub periods: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub eps: Vec<f64>,
    pub factor: Vec<f64>,
    /// `E(f_t | F_{t-1})`.
    pub cond_mean_f: Vec<f64>,
    pub alpha_coeffs: Vec<f64>,
    pub loading: Loading,
    pub eta: Vec<f64>,
}

impl GroundTruth {
    pub fn beta_at(&self, t: usize, i: usize) -> f64 {
        self.beta[t * self.n + i]
    }

    pub fn alpha_at(&self, t: usize, i: usize) -> f64 {
        self.alpha[t * self.n + i]
    }

    /// Conditional expected return `mu_t(beta) = alpha(beta) + beta E(f_t|F_{t-1})`.
    pub fn mu(&self, t: usize, beta: f64) -> f64 {
        poly(&self.alpha_coeffs, beta) + beta * self.cond_mean_f[t]
    }

    /// Systematic realized return `M_t(beta) = mu_t(beta) + beta (f_t - E(f_t|F_{t-1}))`.
    pub fn m(&self, t: usize, beta: f64) -> f64 {
        self.mu(t, beta) + beta * (self.factor[t] - self.cond_mean_f[t])
    }

    /// Average of `mu_t(beta)` over the given periods.
    pub fn grand_mean_over(&self, periods: &[usize], beta: f64) -> f64 {
        periods.iter().map(|&t| self.mu(t, beta)).sum::<f64>() / periods.len() as f64
    }

    /// Range of realized betas over all `(i, t)`.
    pub fn beta_support(&self) -> (f64, f64) {
        self.beta
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &b| {
                (lo.min(b), hi.max(b))
            })
    }
}

/// Draws the factor path.
pub fn simulate_factor<R: Rng + ?Sized>(spec: &DgpSpec, rng: &mut R) -> Result<FactorSeries> {
    spec.validate()?;
    let stationary_sd = spec.sigma_x / (1.0 - spec.rho * spec.rho).sqrt();
    let z: f64 = StandardNormal.sample(rng);
    let mut x_prev = stationary_sd * z;
    let mut values = Vec::with_capacity(spec.periods);
    let mut cond_mean = Vec::with_capacity(spec.periods);
    for k in 0..spec.periods {
        let tau = spec.tau(spec.u(k));
        let innovation: f64 = StandardNormal.sample(rng);
        let x = spec.rho * x_prev + spec.sigma_x * innovation;
        cond_mean.push(tau + spec.rho * x_prev);
        values.push(tau + x);
        x_prev = x;
    }
    let mut series = FactorSeries::from_values(values);
    series.cond_mean = Some(cond_mean);
    Ok(series)
}

/// Draws the return panel given a factor path.
pub fn simulate_panel<R: Rng + ?Sized>(
    spec: &DgpSpec,
    factor: &FactorSeries,
    rng: &mut R,
) -> Result<(PanelData, GroundTruth)> {
    spec.validate()?;
    if factor.len() != spec.periods {
        return Err(Error::validation(
            "factor",
            format!(
                "length {} does not match periods {}",
                factor.len(),
                spec.periods
            ),
        ));
    }
    let cond_mean_f = factor
        .cond_mean
        .clone()
        .ok_or_else(|| Error::validation("factor", "simulation needs the conditional mean"))?;
    let (n, t_len) = (spec.n, spec.periods);
    let eta: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            spec.eta_lo + (spec.eta_hi - spec.eta_lo) * u
        })
        .collect();

    let mut beta = Vec::with_capacity(n * t_len);
    let mut alpha = Vec::with_capacity(n * t_len);
    let mut eps = Vec::with_capacity(n * t_len);
    let mut cells = Vec::with_capacity(n * t_len);
    for k in 0..t_len {
        let u = spec.u(k);
        let g = spec.loading.eval(u);
        let sd = spec.sigma_eps(u);
        let f = factor.values[k];
        for &e in &eta {
            let b = e * g;
            let a = spec.alpha(b);
            let z: f64 = StandardNormal.sample(rng);
            let noise = sd * z;
            let keep = spec.retention >= 1.0 || rng.random::<f64>() < spec.retention;
            beta.push(b);
            alpha.push(a);
            eps.push(noise);
            cells.push(keep.then_some(a + b * f + noise));
        }
    }
    let panel = PanelData::new(
        factor.periods.clone(),
        (0..n).map(|i| format!("a{:05}", i + 1)).collect(),
        cells,
        None,
    )?;
    let truth = GroundTruth {
        n,
        periods: t_len,
        beta,
        alpha,
        eps,
        factor: factor.values.clone(),
        cond_mean_f,
        alpha_coeffs: spec.alpha_coeffs.clone(),
        loading: spec.loading,
        eta,
    };
    Ok((panel, truth))
}

/// Exact `T^{-1} sum_t mu_t(beta)` on `grid`, over all simulated periods.
pub fn true_grand_mean(truth: &GroundTruth, grid: &[f64]) -> Result<MuCurve> {
    let all: Vec<usize> = (0..truth.periods).collect();
    true_grand_mean_over(truth, grid, &all)
}

/// As [`true_grand_mean`], averaging over a subset of periods.
pub fn true_grand_mean_over(
    truth: &GroundTruth,
    grid: &[f64],
    periods: &[usize],
) -> Result<MuCurve> {
    if periods.is_empty() {
        return Err(Error::InsufficientData("no periods to average".into()));
    }
    let (lo, hi) = truth.beta_support();
    if let Some(&beta) = grid.iter().find(|&&b| b < lo || b > hi) {
        return Err(Error::OutOfRange { beta, lo, hi });
    }
    let values = grid
        .iter()
        .map(|&b| truth.grand_mean_over(periods, b))
        .collect();
    Ok(MuCurve::from_values(grid.to_vec(), values, periods.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn simulate(spec: &DgpSpec) -> (FactorSeries, PanelData, GroundTruth) {
        let mut rng = stream(spec.seed, 0);
        let f = simulate_factor(spec, &mut rng).unwrap();
        let (p, truth) = simulate_panel(spec, &f, &mut rng).unwrap();
        (f, p, truth)
    }

    #[test]
    fn degenerate_ar_is_white_noise() {
        let spec = DgpSpec {
            rho: 0.0,
            tau_coeffs: vec![0.0],
            periods: 20_000,
            ..DgpSpec::default()
        };
        let f = simulate_factor(&spec, &mut stream(1, 0)).unwrap();
        assert!(f.cond_mean.as_ref().unwrap().iter().all(|&c| c == 0.0));
        let m = f.values.iter().sum::<f64>() / f.len() as f64;
        let v = f.values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / f.len() as f64;
        assert!(m.abs() < 0.03, "mean {m}");
        assert!((v - 1.0).abs() < 0.04, "var {v}");
    }

    #[test]
    fn noiseless_trend() {
        let spec = DgpSpec {
            sigma_x: 0.0,
            tau_coeffs: vec![0.0, 1.0],
            periods: 50,
            ..DgpSpec::default()
        };
        let f = simulate_factor(&spec, &mut stream(1, 0)).unwrap();
        for (k, (&v, &c)) in f
            .values
            .iter()
            .zip(f.cond_mean.as_ref().unwrap())
            .enumerate()
        {
            let u = (k + 1) as f64 / 50.0;
            assert_eq!(v, u);
            assert_eq!(c, u);
        }
    }

    #[test]
    fn ar1_lag_one_autocorrelation() {
        let spec = DgpSpec {
            rho: 0.5,
            tau_coeffs: vec![0.0],
            periods: 10_000,
            ..DgpSpec::default()
        };
        let f = simulate_factor(&spec, &mut stream(42, 0)).unwrap();
        let x = &f.values;
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let num: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        let den: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
        let r1 = num / den;
        assert!(
            (r1 - 0.5).abs() < 3.0 / (x.len() as f64).sqrt(),
            "lag-1 acf {r1}"
        );
    }

    #[test]
    fn returns_equal_factor_in_trivial_design() {
        let spec = DgpSpec {
            n: 5,
            periods: 30,
            sigma_eps_coeffs: vec![0.0],
            eta_lo: 1.0,
            eta_hi: 1.0,
            loading: Loading::constant(1.0),
            alpha_coeffs: vec![0.0],
            ..DgpSpec::default()
        };
        let (f, p, _) = simulate(&spec);
        for t in 0..30 {
            for i in 0..5 {
                assert_eq!(p.get(t, i).unwrap(), f.values[t]);
            }
        }
    }

    #[test]
    fn structural_identity_holds() {
        let spec = DgpSpec {
            n: 40,
            periods: 60,
            ..DgpSpec::default()
        };
        let (f, p, truth) = simulate(&spec);
        let cm = f.cond_mean.as_ref().unwrap();
        for t in 0..60 {
            for i in 0..40 {
                let b = truth.beta_at(t, i);
                let r = p.get(t, i).unwrap();
                let resid = r - truth.mu(t, b) - b * (f.values[t] - cm[t]) - truth.eps[t * 40 + i];
                assert!(resid.abs() < 1e-12, "{resid}");
                assert!((truth.mu(t, b) - (truth.alpha_at(t, i) + b * cm[t])).abs() < 1e-12);
                let innov = truth.m(t, b) - truth.mu(t, b);
                assert!((innov - b * (f.values[t] - cm[t])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_returns_are_exact() {
        let spec = DgpSpec {
            n: 10,
            periods: 20,
            sigma_eps_coeffs: vec![0.0],
            ..DgpSpec::default()
        };
        let (f, p, truth) = simulate(&spec);
        for t in 0..20 {
            for i in 0..10 {
                let b = truth.beta_at(t, i);
                let r = p.get(t, i).unwrap() - spec.alpha(b) - b * f.values[t];
                assert!(r.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_sectional_mean_within_clt_bound() {
        let spec = DgpSpec {
            n: 50,
            periods: 50,
            ..DgpSpec::default()
        };
        let (f, p, truth) = simulate(&spec);
        let mut inside = 0;
        for t in 0..50 {
            let mean_r = (0..50).map(|i| p.get(t, i).unwrap()).sum::<f64>() / 50.0;
            let mean_sys = (0..50)
                .map(|i| {
                    let b = truth.beta_at(t, i);
                    spec.alpha(b) + b * f.values[t]
                })
                .sum::<f64>()
                / 50.0;
            let bound = 4.0 * spec.sigma_eps(spec.u(t)) / 50f64.sqrt();
            if (mean_r - mean_sys).abs() <= bound {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.95 * 50.0, "{inside}/50");
    }

    #[test]
    fn betas_lipschitz_and_scale_identical_across_periods() {
        let spec = DgpSpec {
            n: 30,
            periods: 100,
            ..DgpSpec::default()
        };
        let (_, _, truth) = simulate(&spec);
        let mut c: f64 = 0.0;
        for i in 0..30 {
            for t in 1..100 {
                let d = (truth.beta_at(t, i) - truth.beta_at(t - 1, i)).abs() * 100.0;
                c = c.max(d);
            }
        }
        // |g'| <= 0.5 * 2 pi and eta <= 1.5
        assert!(c <= 1.5 * 0.5 * 2.0 * std::f64::consts::PI + 1e-9);
        for t in [0, 37, 99] {
            let g = spec.loading.eval(spec.u(t));
            for i in 0..30 {
                assert!((truth.beta_at(t, i) / g - truth.eta[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = DgpSpec {
            n: 20,
            periods: 30,
            ..DgpSpec::default()
        };
        let (f1, p1, _) = simulate(&spec);
        let (f2, p2, _) = simulate(&spec);
        assert_eq!(f1, f2);
        assert_eq!(p1, p2);
        let mut rng = stream(spec.seed, 1);
        let f3 = simulate_factor(&spec, &mut rng).unwrap();
        assert_ne!(f1.values, f3.values);
    }

    #[test]
    fn retention_makes_panel_unbalanced() {
        let spec = DgpSpec {
            n: 100,
            periods: 20,
            retention: 0.7,
            ..DgpSpec::default()
        };
        let (_, p, _) = simulate(&spec);
        let kept: usize = (0..20).map(|t| p.count(t)).sum();
        let frac = kept as f64 / 2000.0;
        assert!((frac - 0.7).abs() < 0.05, "{frac}");
    }

    #[test]
    fn validation_names_field() {
        let bad = DgpSpec {
            rho: 1.0,
            ..DgpSpec::default()
        };
        match bad.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "rho"),
            other => panic!("{other:?}"),
        }
        let bad = DgpSpec {
            sigma_eps_coeffs: vec![0.5, -1.0],
            ..DgpSpec::default()
        };
        assert!(
            matches!(bad.validate(), Err(Error::Validation { field, .. }) if field == "sigma_eps_coeffs")
        );
    }

    #[test]
    fn grand_mean_special_cases() {
        let spec = DgpSpec {
            n: 20,
            periods: 40,
            rho: 0.0,
            tau_coeffs: vec![0.0],
            sigma_x: 0.0,
            ..DgpSpec::default()
        };
        let (_, _, truth) = simulate(&spec);
        let grid = [0.5, 1.0, 1.4];
        let c = true_grand_mean(&truth, &grid).unwrap();
        for (v, &b) in c.values.iter().zip(&grid) {
            assert!((v - spec.alpha(b)).abs() < 1e-12);
        }

        let spec = DgpSpec {
            alpha_coeffs: vec![0.0],
            tau_coeffs: vec![0.7],
            ..spec
        };
        let (_, _, truth) = simulate(&spec);
        let c = true_grand_mean(&truth, &grid).unwrap();
        for (v, &b) in c.values.iter().zip(&grid) {
            assert!((v - 0.7 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn grand_mean_matches_resummation() {
        let spec = DgpSpec {
            n: 30,
            periods: 80,
            ..DgpSpec::default()
        };
        let (_, _, truth) = simulate(&spec);
        let grid = [0.6, 0.9, 1.2];
        let c = true_grand_mean(&truth, &grid).unwrap();
        for (k, &b) in grid.iter().enumerate() {
            let mut acc = 0.0;
            for t in 0..80 {
                acc += 0.5 + 0.3 * b * b + b * truth.cond_mean_f[t];
            }
            assert!((c.values[k] - acc / 80.0).abs() < 1e-12);
        }
        assert!(matches!(
            true_grand_mean(&truth, &[10.0]),
            Err(Error::OutOfRange { .. })
        ));
    }
}
