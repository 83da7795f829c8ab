//! Shared fixtures for the benchmarks.

use betasort::dgp::{simulate_factor, simulate_panel, DgpSpec};
use betasort::io::run::{estimate, Estimation};
use betasort::io::RunConfig;
use betasort::rng::stream;
use betasort::{FactorSeries, PanelData};

/// Simulated panel of `n` assets over `periods` periods from the default design.
pub fn fixture(n: usize, periods: usize) -> (PanelData, FactorSeries) {
    let spec = DgpSpec {
        n,
        periods,
        ..DgpSpec::default()
    };
    let mut rng = stream(spec.seed, 0);
    let factor = simulate_factor(&spec, &mut rng).expect("valid design");
    let (panel, _) = simulate_panel(&spec, &factor, &mut rng).expect("valid design");
    (panel, factor)
}

pub fn config() -> RunConfig {
    RunConfig {
        draws: 2_000,
        ..RunConfig::default()
    }
}

pub fn estimated(n: usize, periods: usize) -> (PanelData, Estimation) {
    let (panel, factor) = fixture(n, periods);
    let est = estimate(&panel, &factor, &config()).expect("estimation succeeds");
    (panel, est)
}
