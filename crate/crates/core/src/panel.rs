//! Return panels and factor series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unbalanced panel of asset returns indexed by `(period, asset)`.
///
/// Returns are stored densely in period-major order with `NaN` marking a
/// missing observation; use [`PanelData::get`] to read them as `Option`.
#[derive(Debug, Clone)]
pub struct PanelData {
    periods: Vec<String>,
    assets: Vec<String>,
    returns: Vec<f64>,
    weights: Option<Vec<f64>>,
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Missing cells compare equal to each other.
impl PartialEq for PanelData {
    fn eq(&self, other: &Self) -> bool {
        self.periods == other.periods
            && self.assets == other.assets
            && same_bits(&self.returns, &other.returns)
            && match (&self.weights, &other.weights) {
                (None, None) => true,
                (Some(a), Some(b)) => same_bits(a, b),
                _ => false,
            }
    }
}

impl PanelData {
    /// Builds a panel from period-major cells (`cells[t * n + i]`).
    pub fn new(
        periods: Vec<String>,
        assets: Vec<String>,
        cells: Vec<Option<f64>>,
        weights: Option<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let (t_len, n) = (periods.len(), assets.len());
        if cells.len() != t_len * n {
            return Err(Error::validation(
                "returns",
                format!("expected {} cells, got {}", t_len * n, cells.len()),
            ));
        }
        if periods.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(
                "periods",
                "labels must be strictly increasing",
            ));
        }
        let mut ids = assets.clone();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("assets", "duplicate asset id"));
        }
        let mut returns = Vec::with_capacity(cells.len());
        for (k, c) in cells.into_iter().enumerate() {
            match c {
                Some(v) if !v.is_finite() => {
                    return Err(Error::validation(
                        "returns",
                        format!(
                            "non-finite return at period {}, asset {}",
                            k / n.max(1),
                            k % n.max(1)
                        ),
                    ))
                }
                Some(v) => returns.push(v),
                None => returns.push(f64::NAN),
            }
        }
        let weights = match weights {
            Some(w) if w.len() != t_len * n => {
                return Err(Error::validation(
                    "weights",
                    "length does not match returns",
                ))
            }
            Some(w) => Some(w.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()),
            None => None,
        };
        Ok(Self {
            periods,
            assets,
            returns,
            weights,
        })
    }

    /// Balanced panel with default labels, from a `T x n` period-major buffer.
    pub fn from_dense(n_periods: usize, n_assets: usize, returns: Vec<f64>) -> Result<Self> {
        let periods = (0..n_periods).map(|t| format!("{:06}", t + 1)).collect();
        let assets = (0..n_assets).map(|i| format!("a{:05}", i + 1)).collect();
        let cells = returns
            .into_iter()
            .map(|v| if v.is_nan() { None } else { Some(v) })
            .collect();
        Self::new(periods, assets, cells, None)
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        let v = self.returns[t * self.assets.len() + i];
        (!v.is_nan()).then_some(v)
    }

    pub fn weight(&self, t: usize, i: usize) -> Option<f64> {
        let w = self.weights.as_ref()?[t * self.assets.len() + i];
        (!w.is_nan()).then_some(w)
    }

    pub fn has_weights(&self) -> bool {
        self.weights.is_some()
    }

    /// Raw period slice; missing entries are `NaN`.
    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.assets.len();
        &self.returns[t * n..(t + 1) * n]
    }

    /// Time series of asset `i` with `NaN` for missing periods.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_periods())
            .map(|t| self.returns[t * self.n_assets() + i])
            .collect()
    }

    /// Number of observed returns at period `t` (n_t).
    pub fn count(&self, t: usize) -> usize {
        self.row(t).iter().filter(|v| !v.is_nan()).count()
    }

    /// Multiplies every return by `factor` (used for percent to fraction).
    pub fn scale_returns(&mut self, factor: f64) {
        self.returns.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Factor path `f_t`, optionally with the simulation's true conditional mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSeries {
    pub periods: Vec<String>,
    pub values: Vec<f64>,
    /// `E(f_t | F_{t-1})`, known only for simulated data.
    pub cond_mean: Option<Vec<f64>>,
}

impl FactorSeries {
    pub fn new(periods: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if periods.len() != values.len() {
            return Err(Error::validation(
                "factor",
                "period and value lengths differ",
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("factor", "non-finite factor value"));
        }
        Ok(Self {
            periods,
            values,
            cond_mean: None,
        })
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let periods = (0..values.len()).map(|t| format!("{:06}", t + 1)).collect();
        Self {
            periods,
            values,
            cond_mean: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_cells_read_as_none() {
        let p = PanelData::from_dense(2, 2, vec![1.0, f64::NAN, 0.5, 0.25]).unwrap();
        assert_eq!(p.get(0, 1), None);
        assert_eq!(p.get(1, 1), Some(0.25));
        assert_eq!(p.count(0), 1);
        assert_eq!(p.column(0), vec![1.0, 0.5]);
    }

    #[test]
    fn rejects_unsorted_periods_and_duplicate_assets() {
        let cells = vec![Some(0.0); 4];
        let e = PanelData::new(
            vec!["b".into(), "a".into()],
            vec!["x".into(), "y".into()],
            cells.clone(),
            None,
        );
        assert!(matches!(e, Err(Error::Validation { .. })));
        let e = PanelData::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "x".into()],
            cells,
            None,
        );
        assert!(matches!(e, Err(Error::Validation { .. })));
    }

    #[test]
    fn rejects_non_finite() {
        let e = PanelData::new(
            vec!["a".into()],
            vec!["x".into()],
            vec![Some(f64::INFINITY)],
            None,
        );
        assert!(e.is_err());
    }
}
