//! `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored; text after a `#` on
//! a value line is a comment. Keys are unique per file. Lists are
//! comma-separated. Relative paths in a file resolve against its directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dgp::DgpSpec;
use crate::error::{Error, Result};
use crate::inference::{GaussianSimSpec, GrandMeanTarget, HmlCalibration};
use crate::io::data::ReturnUnit;
use crate::kernel::{KernelKind, KernelSpec};
use crate::montecarlo::{Check, GridRule, HRule, McConfig};
use crate::rng::stream_key;
use crate::variance::CondMeanKind;

/// Every key the parser accepts.
pub const KEYS: &[&str] = &[
    "seed",
    "kernel",
    "h",
    "h_c",
    "h_exponent",
    "j1",
    "grid_points",
    "grid_lo",
    "grid_hi",
    "grid",
    "draws",
    "alpha",
    "condmean",
    "hml",
    "band",
    "panel",
    "factor",
    "returns",
    "value_weighted",
    "fixed_t_period",
    "dgp.n",
    "dgp.periods",
    "dgp.rho",
    "dgp.tau",
    "dgp.sigma_x",
    "dgp.alpha",
    "dgp.loading_level",
    "dgp.loading_amplitude",
    "dgp.loading_cycles",
    "dgp.eta_lo",
    "dgp.eta_hi",
    "dgp.sigma_eps",
    "dgp.retention",
    "dgp.seed",
    "mc.reps",
    "mc.checks",
    "mc.surprise_quantile",
    "mc.normality_points",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub reps: usize,
    pub checks: Vec<Check>,
    pub surprise_quantile: f64,
    pub normality_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub kernel: KernelKind,
    pub h: HRule,
    pub j1: usize,
    pub grid: GridRule,
    /// Gaussian draws per simulated critical value.
    pub draws: usize,
    pub alpha: f64,
    pub condmean: CondMeanKind,
    pub hml: HmlCalibration,
    pub band: GrandMeanTarget,
    pub panel: Option<PathBuf>,
    pub factor: Option<PathBuf>,
    pub returns: ReturnUnit,
    pub value_weighted: bool,
    /// Date label of the period for `fixed-t`; the last sorted period if unset.
    pub fixed_t_period: Option<String>,
    pub dgp: DgpSpec,
    pub mc: McSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mc = McConfig::default();
        Self {
            seed: 1,
            kernel: KernelKind::Uniform,
            h: HRule::default(),
            j1: mc.j1,
            grid: GridRule::default(),
            draws: mc.sim.draws,
            alpha: mc.sim.alpha,
            condmean: CondMeanKind::Ar1,
            hml: HmlCalibration::Range,
            band: GrandMeanTarget::MuBarT,
            panel: None,
            factor: None,
            returns: ReturnUnit::Fraction,
            value_weighted: false,
            fixed_t_period: None,
            dgp: DgpSpec::default(),
            mc: McSettings {
                reps: mc.reps,
                checks: mc.checks,
                surprise_quantile: mc.surprise_quantile,
                normality_points: mc.normality_points,
            },
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("key `{key}`: cannot use `{value}`: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| num::<f64>(key, s))
        .collect()
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn check(key: &str, value: &str) -> Result<Check> {
    Ok(match value {
        "first_stage" => Check::FirstStage,
        "normality" => Check::Normality,
        "grand_mean" => Check::GrandMean,
        "grand_mean_zero" | "zero" => Check::GrandMeanZero,
        "high_minus_low" | "hml" => Check::HighMinusLow,
        "butterfly" => Check::Butterfly,
        "fixed_t" => Check::FixedT,
        _ => return Err(bad(key, value, "unknown check")),
    })
}

/// Splits `key = value` lines, rejecting duplicates. Returns `(key, value, line)`.
fn split_lines(text: &str, source: &str) -> Result<Vec<(String, String, usize)>> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Parse {
                path: source.to_string(),
                message: format!("line {line}: expected `key = value`"),
            });
        };
        let key = key.trim().to_string();
        if let Some(first) = seen.insert(key.clone(), line) {
            return Err(Error::Parse {
                path: source.to_string(),
                message: format!("line {line}: duplicate key `{key}` (first on line {first})"),
            });
        }
        out.push((key, value.trim().to_string(), line));
    }
    Ok(out)
}

impl RunConfig {
    /// Parses configuration text; `base` resolves relative paths.
    pub fn parse(text: &str, source: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value, line) in split_lines(text, source)? {
            cfg.set_inner(&key, &value, base)
                .map_err(|e| Error::Parse {
                    path: source.to_string(),
                    message: format!("line {line}: {e}"),
                })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string(), path.parent())
    }

    /// Applies one `key=value` override; paths are taken as given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_inner(key.trim(), value.trim(), None)
    }

    /// Applies a `key=value` string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{kv}` is not of the form key=value"))
        })?;
        self.set(k, v)
    }

    fn set_inner(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let power = |h: &HRule| match *h {
            HRule::Power { c, exponent } => (c, exponent),
            HRule::Fixed(_) => (1.0, -1.0 / 3.0),
        };
        let quantile = |g: &GridRule| match *g {
            GridRule::Quantile { points, lo, hi } => (points, lo, hi),
            GridRule::Fixed(_) => (25, 0.025, 0.975),
        };
        match key {
            "seed" => self.seed = num(key, value)?,
            "kernel" => self.kernel = value.parse().map_err(|e| bad(key, value, e))?,
            "h" => self.h = HRule::Fixed(num(key, value)?),
            "h_c" => {
                self.h = HRule::Power {
                    c: num(key, value)?,
                    exponent: power(&self.h).1,
                }
            }
            "h_exponent" => {
                self.h = HRule::Power {
                    c: power(&self.h).0,
                    exponent: num(key, value)?,
                }
            }
            "j1" => self.j1 = num(key, value)?,
            "grid_points" => {
                let (_, lo, hi) = quantile(&self.grid);
                self.grid = GridRule::Quantile {
                    points: num(key, value)?,
                    lo,
                    hi,
                };
            }
            "grid_lo" => {
                let (points, _, hi) = quantile(&self.grid);
                self.grid = GridRule::Quantile {
                    points,
                    lo: num(key, value)?,
                    hi,
                };
            }
            "grid_hi" => {
                let (points, lo, _) = quantile(&self.grid);
                self.grid = GridRule::Quantile {
                    points,
                    lo,
                    hi: num(key, value)?,
                };
            }
            "grid" => self.grid = GridRule::Fixed(list(key, value)?),
            "draws" => self.draws = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "condmean" => self.condmean = value.parse().map_err(|e| bad(key, value, e))?,
            "hml" => self.hml = value.parse().map_err(|e| bad(key, value, e))?,
            "band" => {
                self.band = match value {
                    "sharp" => GrandMeanTarget::MuBarT,
                    "conservative" => GrandMeanTarget::MuLimit,
                    _ => return Err(bad(key, value, "expected sharp or conservative")),
                }
            }
            "panel" => self.panel = Some(path(value)),
            "factor" => self.factor = Some(path(value)),
            "returns" => self.returns = value.parse().map_err(|e| bad(key, value, e))?,
            "value_weighted" => self.value_weighted = boolean(key, value)?,
            "fixed_t_period" => self.fixed_t_period = Some(value.to_string()),
            "dgp.n" => self.dgp.n = num(key, value)?,
            "dgp.periods" => self.dgp.periods = num(key, value)?,
            "dgp.rho" => self.dgp.rho = num(key, value)?,
            "dgp.tau" => self.dgp.tau_coeffs = list(key, value)?,
            "dgp.sigma_x" => self.dgp.sigma_x = num(key, value)?,
            "dgp.alpha" => self.dgp.alpha_coeffs = list(key, value)?,
            "dgp.loading_level" => self.dgp.loading.level = num(key, value)?,
            "dgp.loading_amplitude" => self.dgp.loading.amplitude = num(key, value)?,
            "dgp.loading_cycles" => self.dgp.loading.cycles = num(key, value)?,
            "dgp.eta_lo" => self.dgp.eta_lo = num(key, value)?,
            "dgp.eta_hi" => self.dgp.eta_hi = num(key, value)?,
            "dgp.sigma_eps" => self.dgp.sigma_eps_coeffs = list(key, value)?,
            "dgp.retention" => self.dgp.retention = num(key, value)?,
            "dgp.seed" => self.dgp.seed = num(key, value)?,
            "mc.reps" => self.mc.reps = num(key, value)?,
            "mc.checks" => {
                self.mc.checks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| check(key, s))
                    .collect::<Result<_>>()?
            }
            "mc.surprise_quantile" => self.mc.surprise_quantile = num(key, value)?,
            "mc.normality_points" => self.mc.normality_points = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Range checks on every field.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        match self.h {
            HRule::Fixed(h) if !(h > 0.0 && h < 1.0) => {
                return cfg(format!("key `h`: {h} is outside (0, 1)"))
            }
            HRule::Power { c, exponent } if !(c > 0.0 && exponent < 0.0 && exponent > -1.0) => {
                return cfg(
                    "keys `h_c`, `h_exponent`: need h_c > 0 and h_exponent in (-1, 0)".into(),
                )
            }
            _ => {}
        }
        if self.j1 < 2 {
            return cfg("key `j1`: must be at least 2".into());
        }
        match &self.grid {
            GridRule::Quantile { points, lo, hi } => {
                if *points < 2 {
                    return cfg("key `grid_points`: need at least 2".into());
                }
                if !(0.0 <= *lo && lo < hi && *hi <= 1.0) {
                    return cfg(
                        "keys `grid_lo`, `grid_hi`: need 0 <= grid_lo < grid_hi <= 1".into(),
                    );
                }
            }
            GridRule::Fixed(g) => {
                if g.len() < 2 || g.windows(2).any(|w| w[0] >= w[1]) {
                    return cfg("key `grid`: need at least 2 strictly increasing points".into());
                }
            }
        }
        self.sim(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.mc.reps == 0 {
            return cfg("key `mc.reps`: must be positive".into());
        }
        if !(self.mc.surprise_quantile > 0.0 && self.mc.surprise_quantile < 1.0) {
            return cfg("key `mc.surprise_quantile`: must lie in (0, 1)".into());
        }
        self.dgp
            .validate()
            .map_err(|e| Error::Config(format!("dgp: {e}")))
    }

    /// Errors naming `key` when an input path is unset.
    pub fn require_path(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "panel" => &self.panel,
            "factor" => &self.factor,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        };
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn kernel_spec(&self, periods: usize) -> Result<KernelSpec> {
        KernelSpec::new(self.kernel, self.h.h(periods))
    }

    /// Simulation settings for step `salt` of a run.
    pub fn sim(&self, salt: u64) -> GaussianSimSpec {
        GaussianSimSpec {
            draws: self.draws,
            alpha: self.alpha,
            seed: stream_key(self.seed, salt),
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            spec: self.dgp.clone(),
            reps: self.mc.reps,
            h_rule: self.h,
            kernel: self.kernel,
            j1: self.j1,
            grid: self.grid.clone(),
            sim: GaussianSimSpec {
                draws: self.draws,
                alpha: self.alpha,
                seed: self.seed,
            },
            condmean: self.condmean,
            hml: self.hml,
            checks: self.mc.checks.clone(),
            base_seed: self.seed,
            normality_points: self.mc.normality_points,
            surprise_quantile: self.mc.surprise_quantile,
        }
    }
}
