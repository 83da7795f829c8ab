//! Beta-sorted portfolio estimation with rolling kernel betas.
//!
//! The pipeline has two stages. [`kernel`] estimates time-varying betas by
//! one-sided kernel regressions that only look backwards. [`sorting`] sorts
//! each period's cross-section on those betas into quantile portfolios and
//! turns the portfolio means into a step function of beta. [`variance`] and
//! [`inference`] then provide standard errors, uniform bands and tests on the
//! time average of that curve. [`dgp`] and [`montecarlo`] simulate panels with
//! known truth and score the whole procedure.

pub mod dgp;
pub mod error;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod montecarlo;
pub mod panel;
pub mod rng;
pub mod sorting;
pub mod variance;

pub use error::{Error, Result};
pub use kernel::{estimate_beta_panel, BetaPanel, KernelKind, KernelSpec};
pub use panel::{FactorSeries, PanelData};
pub use sorting::{MuCurve, PartitionScheme, PortfolioReturns, SortedPanel};
