//! Second stage: beta-sorted portfolios.
//!
//! At each period the assets with an estimated beta are sorted on `beta_hat`
//! and split into `J_t` groups of near-equal size. The portfolio means `a_jt`
//! define a step function `mu_t(beta)` on the sorting variable, and the grand
//! mean `mu(beta)` averages those steps over time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::BetaPanel;
use crate::panel::PanelData;

/// `max(2, round(J1 * sqrt(n_t / n_max)))`.
pub fn choose_j(n_t: usize, j1: usize, n_max: usize) -> usize {
    let n_max = n_max.max(1);
    let j = (j1 as f64 * (n_t as f64 / n_max as f64).sqrt()).round() as usize;
    j.max(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub asset: usize,
    pub beta: f64,
    pub bin: usize,
}

/// Partition of one period's cross-section into beta bins.
///
/// Bin `j` (zero-based) covers `[edges[j], edges[j + 1])`; the last bin is
/// closed at the top. `edges` has `j_count + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub t: usize,
    pub j_count: usize,
    pub edges: Vec<f64>,
    /// Members in ascending `(beta, asset)` order.
    pub members: Vec<Member>,
    pub counts: Vec<usize>,
    pub q_hat: Vec<f64>,
    /// Original indices of bins that were empty and merged away.
    pub merged: Vec<usize>,
}

fn sorted_members(betas: &[(usize, f64)]) -> Result<Vec<(usize, f64)>> {
    if let Some(&(i, _)) = betas.iter().find(|(_, b)| !b.is_finite()) {
        return Err(Error::validation(
            "beta",
            format!("non-finite estimate for asset {i}"),
        ));
    }
    let mut sorted = betas.to_vec();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)));
    Ok(sorted)
}

fn distinct_count(sorted: &[(usize, f64)]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[0].1 != w[1].1).count()
}

impl PartitionScheme {
    /// Bin containing `beta`, or `None` outside `[edges[0], edges[J]]`.
    pub fn locate(&self, beta: f64) -> Option<usize> {
        let lo = self.edges[0];
        let hi = self.edges[self.j_count];
        if !(beta >= lo && beta <= hi) {
            return None;
        }
        let lower = &self.edges[..self.j_count];
        Some(lower.partition_point(|&l| l <= beta) - 1)
    }

    pub fn n_t(&self) -> usize {
        self.members.len()
    }

    /// Assigns assets to bins by fixed breakpoints, merging empty bins.
    ///
    /// An empty bin joins its left neighbour; an empty first bin joins the
    /// next non-empty bin to its right.
    pub fn from_edges(t: usize, betas: &[(usize, f64)], edges: &[f64]) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::validation(
                "edges",
                "need at least two strictly increasing breakpoints",
            ));
        }
        let sorted = sorted_members(betas)?;
        let mut edges = edges.to_vec();
        let mut members: Vec<Member> = Vec::with_capacity(sorted.len());
        {
            let j = edges.len() - 1;
            let scheme = Self {
                t,
                j_count: j,
                edges: edges.clone(),
                members: Vec::new(),
                counts: Vec::new(),
                q_hat: Vec::new(),
                merged: Vec::new(),
            };
            for &(asset, beta) in &sorted {
                let bin = scheme.locate(beta).ok_or_else(|| {
                    Error::validation(
                        "beta",
                        format!("asset {asset} lies outside the breakpoints"),
                    )
                })?;
                members.push(Member { asset, beta, bin });
            }
        }
        if members.is_empty() {
            return Err(Error::DegeneratePartition {
                distinct: 0,
                bins: edges.len() - 1,
            });
        }
        let mut counts = vec![0usize; edges.len() - 1];
        for m in &members {
            counts[m.bin] += 1;
        }
        let mut merged = Vec::new();
        // Original index of each surviving bin.
        let mut origin: Vec<usize> = (0..counts.len()).collect();
        let mut j = 0;
        while j < counts.len() {
            if counts[j] > 0 {
                j += 1;
                continue;
            }
            merged.push(origin[j]);
            if j == 0 {
                edges.remove(1);
            } else {
                edges.remove(j);
            }
            counts.remove(j);
            origin.remove(j);
        }
        let j_count = counts.len();
        let mut scheme = Self {
            t,
            j_count,
            edges,
            members: Vec::new(),
            counts: Vec::new(),
            q_hat: Vec::new(),
            merged,
        };
        for m in members.iter_mut() {
            m.bin = scheme.locate(m.beta).expect("member inside merged edges");
        }
        scheme.members = members;
        scheme.finish_counts();
        Ok(scheme)
    }

    fn finish_counts(&mut self) {
        let mut counts = vec![0usize; self.j_count];
        for m in &self.members {
            counts[m.bin] += 1;
        }
        let n = self.members.len() as f64;
        self.q_hat = counts.iter().map(|&c| c as f64 / n).collect();
        self.counts = counts;
    }
}

/// Sorts on `(beta_hat, asset)` and cuts into `J` consecutive chunks.
///
/// Chunk `j` (one-based) holds sorted positions `floor(n (j-1) / J) + 1 ..= floor(n j / J)`.
pub fn build_partition(
    t: usize,
    betas: &[(usize, f64)],
    j_count: usize,
) -> Result<PartitionScheme> {
    if j_count == 0 {
        return Err(Error::validation("J", "need at least one bin"));
    }
    let sorted = sorted_members(betas)?;
    let distinct = distinct_count(&sorted);
    if distinct < j_count {
        return Err(Error::DegeneratePartition {
            distinct,
            bins: j_count,
        });
    }
    let n = sorted.len();
    let mut members = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(j_count + 1);
    for j in 0..j_count {
        let (start, end) = (n * j / j_count, n * (j + 1) / j_count);
        edges.push(sorted[start].1);
        for &(asset, beta) in &sorted[start..end] {
            members.push(Member {
                asset,
                beta,
                bin: j,
            });
        }
    }
    edges.push(sorted[n - 1].1);
    let mut scheme = PartitionScheme {
        t,
        j_count,
        edges,
        members,
        counts: Vec::new(),
        q_hat: Vec::new(),
        merged: Vec::new(),
    };
    scheme.finish_counts();
    Ok(scheme)
}

/// Portfolio means `a_jt` for one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioReturns {
    pub t: usize,
    pub a_hat: Vec<f64>,
}

/// Equal-weighted mean return of each bin; `returns_t[i]` is asset `i`'s return.
pub fn portfolio_means(returns_t: &[f64], partition: &PartitionScheme) -> Result<PortfolioReturns> {
    weighted_means(returns_t, None, partition)
}

/// Value-weighted variant; missing or non-positive weights are an error.
pub fn value_weighted_means(
    returns_t: &[f64],
    weights_t: &[f64],
    partition: &PartitionScheme,
) -> Result<PortfolioReturns> {
    weighted_means(returns_t, Some(weights_t), partition)
}

fn weighted_means(
    returns_t: &[f64],
    weights_t: Option<&[f64]>,
    partition: &PartitionScheme,
) -> Result<PortfolioReturns> {
    let mut sum = vec![0.0; partition.j_count];
    let mut mass = vec![0.0; partition.j_count];
    let mut by_asset: Vec<&Member> = partition.members.iter().collect();
    by_asset.sort_by_key(|m| m.asset);
    for m in by_asset {
        let r = *returns_t.get(m.asset).ok_or_else(|| {
            Error::validation("returns", format!("asset {} out of bounds", m.asset))
        })?;
        if r.is_nan() {
            return Err(Error::validation(
                "returns",
                format!(
                    "asset {} sorted at t={} has no return",
                    m.asset, partition.t
                ),
            ));
        }
        let w = match weights_t {
            None => 1.0,
            Some(ws) => {
                let w = ws.get(m.asset).copied().unwrap_or(f64::NAN);
                if !(w > 0.0) {
                    return Err(Error::validation(
                        "weight",
                        format!(
                            "asset {} at t={} needs a positive weight",
                            m.asset, partition.t
                        ),
                    ));
                }
                w
            }
        };
        sum[m.bin] += w * r;
        mass[m.bin] += w;
    }
    Ok(PortfolioReturns {
        t: partition.t,
        a_hat: sum.iter().zip(&mass).map(|(s, w)| s / w).collect(),
    })
}

/// Per-period partitions and portfolio means over the first-stage valid range.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedPanel {
    pub partitions: Vec<PartitionScheme>,
    pub returns: Vec<PortfolioReturns>,
    /// Periods that could not be sorted, with the reason.
    pub skipped: Vec<(usize, Error)>,
    pub j1: usize,
    pub n_max: usize,
}

impl SortedPanel {
    pub fn periods(&self) -> Vec<usize> {
        self.partitions.iter().map(|p| p.t).collect()
    }
}

/// Sorts every valid period with `J_t = choose_j(n_t, J1, max_t n_t)`.
///
/// Periods with too few distinct betas are skipped; an error is returned only
/// when no period can be sorted.
pub fn sort_panel(
    panel: &PanelData,
    betas: &BetaPanel,
    j1: usize,
    value_weighted: bool,
) -> Result<SortedPanel> {
    if j1 < 2 {
        return Err(Error::validation("J1", "must be at least 2"));
    }
    if value_weighted && !panel.has_weights() {
        return Err(Error::Config(
            "value weighting requested but the panel has no weights".into(),
        ));
    }
    let periods: Vec<usize> = betas.valid_periods().collect();
    let sortable: Vec<Vec<(usize, f64)>> = periods.iter().map(|&t| betas.sortable(t)).collect();
    let n_max = sortable.iter().map(Vec::len).max().unwrap_or(0);
    let results: Vec<Result<(PartitionScheme, PortfolioReturns)>> = periods
        .par_iter()
        .zip(sortable.par_iter())
        .map(|(&t, cross)| {
            let j = choose_j(cross.len(), j1, n_max);
            let p = build_partition(t, cross, j)?;
            let a = if value_weighted {
                let w: Vec<f64> = (0..panel.n_assets())
                    .map(|i| panel.weight(t, i).unwrap_or(f64::NAN))
                    .collect();
                value_weighted_means(panel.row(t), &w, &p)?
            } else {
                portfolio_means(panel.row(t), &p)?
            };
            Ok((p, a))
        })
        .collect();
    let mut out = SortedPanel {
        partitions: Vec::new(),
        returns: Vec::new(),
        skipped: Vec::new(),
        j1,
        n_max,
    };
    for (&t, r) in periods.iter().zip(results) {
        match r {
            Ok((p, a)) => {
                out.partitions.push(p);
                out.returns.push(a);
            }
            Err(e) => out.skipped.push((t, e)),
        }
    }
    if out.partitions.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no sortable period among {} candidates",
            periods.len()
        )));
    }
    Ok(out)
}

/// Per-period step curves and their time average on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuCurve {
    pub grid: Vec<f64>,
    /// Period index of each row of `values_t` and `bin_index`.
    pub periods: Vec<usize>,
    /// `mu_t(beta_v)`; `NaN` where the grid point is outside period `t`'s support.
    pub values_t: Vec<Vec<f64>>,
    pub bin_index: Vec<Vec<Option<usize>>>,
    /// Grand mean `mu(beta_v)` over unmasked periods.
    pub values: Vec<f64>,
    /// Number of unmasked periods per grid point.
    pub effective_t: Vec<usize>,
}

impl MuCurve {
    /// Curve with grand-mean values only (no per-period rows).
    pub fn from_values(grid: Vec<f64>, values: Vec<f64>, effective_t: usize) -> Self {
        let k = grid.len();
        Self {
            grid,
            periods: Vec::new(),
            values_t: Vec::new(),
            bin_index: Vec::new(),
            values,
            effective_t: vec![effective_t; k],
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Row index of period `t`.
    pub fn row_of(&self, t: usize) -> Option<usize> {
        self.periods.binary_search(&t).ok()
    }
}

/// Evaluates `mu_t(beta) = sum_j p_jt(beta) a_jt` on `grid` and averages over time.
pub fn mu_curve(
    partitions: &[PartitionScheme],
    returns: &[PortfolioReturns],
    grid: &[f64],
) -> Result<MuCurve> {
    if partitions.len() != returns.len() {
        return Err(Error::validation(
            "returns",
            "one portfolio vector per partition required",
        ));
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::validation(
            "grid",
            "must be non-empty and strictly increasing",
        ));
    }
    if partitions.windows(2).any(|w| w[0].t >= w[1].t) {
        return Err(Error::validation(
            "partitions",
            "periods must be strictly increasing",
        ));
    }
    let k = grid.len();
    let mut values_t = Vec::with_capacity(partitions.len());
    let mut bin_index = Vec::with_capacity(partitions.len());
    let mut sum = vec![0.0; k];
    let mut effective_t = vec![0usize; k];
    for (p, a) in partitions.iter().zip(returns) {
        if p.t != a.t || a.a_hat.len() != p.j_count {
            return Err(Error::validation(
                "returns",
                format!("portfolio means do not match partition at t={}", p.t),
            ));
        }
        let bins: Vec<Option<usize>> = grid.iter().map(|&b| p.locate(b)).collect();
        let row: Vec<f64> = bins
            .iter()
            .map(|j| j.map_or(f64::NAN, |j| a.a_hat[j]))
            .collect();
        for v in 0..k {
            if bins[v].is_some() {
                sum[v] += row[v];
                effective_t[v] += 1;
            }
        }
        values_t.push(row);
        bin_index.push(bins);
    }
    if let Some(v) = effective_t.iter().position(|&c| c == 0) {
        return Err(Error::AllMasked { beta: grid[v] });
    }
    Ok(MuCurve {
        grid: grid.to_vec(),
        periods: partitions.iter().map(|p| p.t).collect(),
        values_t,
        bin_index,
        values: sum
            .iter()
            .zip(&effective_t)
            .map(|(s, &c)| s / c as f64)
            .collect(),
        effective_t,
    })
}

/// Linear-interpolation sample quantile (`p` in `[0, 1]`).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `points` equispaced values between the `lo` and `hi` quantiles of the pooled betas.
pub fn default_grid(pooled: &[f64], points: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::validation("grid_points", "need at least 2 points"));
    }
    if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
        return Err(Error::validation(
            "grid_quantiles",
            "need 0 <= lo < hi <= 1",
        ));
    }
    let mut v: Vec<f64> = pooled.iter().copied().filter(|b| b.is_finite()).collect();
    if v.is_empty() {
        return Err(Error::InsufficientData(
            "no estimated betas for the grid".into(),
        ));
    }
    v.sort_by(f64::total_cmp);
    let (a, b) = (quantile(&v, lo), quantile(&v, hi));
    if !(a < b) {
        return Err(Error::Degenerate(
            "beta quantile range has zero width".into(),
        ));
    }
    Ok(equispaced(a, b, points))
}

pub fn equispaced(a: f64, b: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| {
            if k + 1 == points {
                b
            } else {
                a + (b - a) * k as f64 / (points - 1) as f64
            }
        })
        .collect()
}

/// Grid locations of the curve's maximum and minimum and their spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighMinusLow {
    pub star: usize,
    pub dblstar: usize,
    pub beta_star: f64,
    pub beta_dblstar: f64,
    pub spread: f64,
}

/// Argmax and argmin of `mu(beta)` over the grid, first occurrence on ties.
pub fn high_minus_low_point(curve: &MuCurve) -> HighMinusLow {
    let (mut star, mut dblstar) = (0, 0);
    for (v, &x) in curve.values.iter().enumerate() {
        if x > curve.values[star] {
            star = v;
        }
        if x < curve.values[dblstar] {
            dblstar = v;
        }
    }
    HighMinusLow {
        star,
        dblstar,
        beta_star: curve.grid[star],
        beta_dblstar: curve.grid[dblstar],
        spread: curve.values[star] - curve.values[dblstar],
    }
}
