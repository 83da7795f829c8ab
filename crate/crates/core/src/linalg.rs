//! Small dense helpers: weighted two-parameter least squares and symmetric
//! matrix functions used by the inference routines.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition number of the symmetric 2x2 matrix `[[a, b], [b, c]]` given its
/// determinant (passed separately so callers can supply a cancellation-free value).
pub(crate) fn condition_2x2(a: f64, b: f64, c: f64, det: f64) -> f64 {
    let half_trace = 0.5 * (a + c);
    let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let lmax = half_trace + radius;
    let lmin = det / lmax;
    if !(lmin > 0.0) || !lmax.is_finite() {
        f64::INFINITY
    } else {
        lmax / lmin
    }
}

/// Weighted fit of `y = c0 + c1 x` with a condition-number guard.
///
/// Observations are kept so the slope can be computed from centered moments.
#[derive(Debug, Default, Clone)]
pub(crate) struct WeightedLine {
    obs: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LineFit {
    pub intercept: f64,
    pub slope: f64,
}

impl WeightedLine {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            obs: Vec::with_capacity(n),
        }
    }

    pub fn clear(&mut self) {
        self.obs.clear();
    }

    pub fn push(&mut self, x: f64, y: f64, w: f64) {
        self.obs.push((x, y, w));
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn solve(&self, ceiling: f64) -> Result<LineFit> {
        let sw: f64 = self.obs.iter().map(|o| o.2).sum();
        if !(sw > 0.0) {
            return Err(Error::SingularWindow {
                condition: f64::INFINITY,
            });
        }
        let xbar = self.obs.iter().map(|o| o.2 * o.0).sum::<f64>() / sw;
        let ybar = self.obs.iter().map(|o| o.2 * o.1).sum::<f64>() / sw;
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for &(x, y, w) in &self.obs {
            let dx = x - xbar;
            sxx += w * dx * dx;
            sxy += w * dx * (y - ybar);
        }
        // Gram of (1, x): [[sw, sw xbar], [sw xbar, sxx + sw xbar^2]]
        let swx = sw * xbar;
        let swxx = sxx + sw * xbar * xbar;
        let condition = condition_2x2(sw, swx, swxx, sw * sxx);
        if !(condition <= ceiling) {
            return Err(Error::SingularWindow { condition });
        }
        let slope = sxy / sxx;
        Ok(LineFit {
            intercept: ybar - slope * xbar,
            slope,
        })
    }
}

/// Eigenvalue-clips a symmetric matrix at `floor` and rescales to unit diagonal.
pub fn clip_to_correlation(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let k = m.nrows();
    if k != m.ncols() {
        return Err(Error::Numerical("matrix is not square".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..k).map(|i| rebuilt[(i, i)].sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Numerical("zero diagonal after clipping".into()));
    }
    Ok(DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            rebuilt[(i, j)] / (d[i] * d[j])
        }
    }))
}

/// Correlation matrix of a covariance matrix, clipped and renormalized.
///
/// Zero-variance coordinates are treated as independent of the rest.
pub fn covariance_to_correlation(cov: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let k = cov.nrows();
    let sd: Vec<f64> = (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let raw = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else if sd[i] > 0.0 && sd[j] > 0.0 {
            cov[(i, j)] / (sd[i] * sd[j])
        } else {
            0.0
        }
    });
    clip_to_correlation(&raw, floor)
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn symmetric_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let scale = eig
        .eigenvalues
        .iter()
        .fold(0.0_f64, |a, l| a.max(l.abs()))
        .max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-8 * scale) {
        return Err(Error::Numerical(
            "matrix is not positive semidefinite".into(),
        ));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_recovery() {
        let mut l = WeightedLine::default();
        for k in 0..20 {
            let x = k as f64 * 0.37 - 1.0;
            l.push(x, 2.0 + 3.0 * x, 1.0 + (k % 3) as f64);
        }
        let fit = l.solve(1e8).unwrap();
        assert!((fit.intercept - 2.0).abs() < 1e-12);
        assert!((fit.slope - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_regressor_is_singular() {
        let mut l = WeightedLine::default();
        for k in 0..20 {
            l.push(0.5, k as f64, 1.0);
        }
        match l.solve(1e8) {
            Err(Error::SingularWindow { condition }) => assert!(condition.is_infinite()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_restores_psd_unit_diagonal() {
        let m =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.99, -0.99, 0.99, 1.0, 0.99, -0.99, 0.99, 1.0]);
        let c = clip_to_correlation(&m, 1e-10).unwrap();
        let eig = SymmetricEigen::new(c.clone());
        assert!(eig.eigenvalues.iter().all(|&l| l > -1e-12));
        for i in 0..3 {
            assert!((c[(i, i)] - 1.0).abs() < 1e-15);
        }
        let r = symmetric_sqrt(&c).unwrap();
        assert!((&r * &r - &c).abs().max() < 1e-9);
    }
}
