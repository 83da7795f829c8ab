//! Monte Carlo properties of the variance estimators and the zero test.

use betasort::dgp::{DgpSpec, Loading};
use betasort::inference::GaussianSimSpec;
use betasort::montecarlo::{run_suite, Check, GridRule, McConfig, McTables};
use betasort::variance::CondMeanKind;

fn run(
    spec: DgpSpec,
    reps: usize,
    checks: Vec<Check>,
    seed: u64,
    condmean: CondMeanKind,
) -> McTables {
    let cfg = McConfig {
        spec,
        reps,
        checks,
        base_seed: seed,
        condmean,
        sim: GaussianSimSpec {
            draws: 1000,
            ..GaussianSimSpec::default()
        },
        ..McConfig::default()
    };
    run_suite(&cfg).unwrap().tables
}

#[test]
fn zero_condmean_variance_dominates_fitted_one() {
    let spec = DgpSpec {
        loading: Loading::constant(1.0),
        ..DgpSpec::default()
    };
    let g = run(spec, 100, vec![Check::GrandMean], 11, CondMeanKind::Ar1)
        .grand_mean
        .unwrap();
    assert!(
        g.zero_cm_dominates.rate >= 0.95,
        "{:?}",
        g.zero_cm_dominates
    );
}

#[test]
fn fm_and_plugin_agree_when_mu_is_constant_in_time() {
    let spec = DgpSpec {
        n: 400,
        periods: 400,
        rho: 0.0,
        tau_coeffs: vec![0.2],
        ..DgpSpec::default()
    };
    // The outer deciles are left out: sorting on noisy betas biases the edge bins' mean loadings.
    let cfg = McConfig {
        spec,
        reps: 20,
        checks: vec![Check::GrandMean],
        base_seed: 12,
        grid: GridRule::Quantile {
            points: 25,
            lo: 0.1,
            hi: 0.9,
        },
        sim: GaussianSimSpec {
            draws: 1000,
            ..GaussianSimSpec::default()
        },
        ..McConfig::default()
    };
    let g = run_suite(&cfg).unwrap().tables.grand_mean.unwrap();
    for (v, (fm, pi)) in g.mean_fm_var.iter().zip(&g.mean_plugin_var).enumerate() {
        let ratio = fm / pi;
        assert!((0.7..=1.4).contains(&ratio), "point {v}: ratio {ratio}");
    }
}

#[test]
fn zero_test_size_and_power() {
    let null = DgpSpec {
        alpha_coeffs: vec![0.0],
        tau_coeffs: vec![0.0],
        rho: 0.0,
        ..DgpSpec::default()
    };
    let size = run(
        null,
        200,
        vec![Check::GrandMeanZero],
        13,
        CondMeanKind::Zero,
    )
    .zero_reject
    .unwrap();
    assert!(size.rate <= 0.10, "size {:?}", size);
    let power = run(
        DgpSpec::default(),
        50,
        vec![Check::GrandMeanZero],
        14,
        CondMeanKind::Ar1,
    )
    .zero_reject
    .unwrap();
    assert!(power.rate >= 0.9, "power {:?}", power);
}

#[test]
fn first_stage_error_shrinks_with_sample_length() {
    let err = |periods| {
        let spec = DgpSpec {
            periods,
            ..DgpSpec::default()
        };
        run(spec, 10, vec![Check::FirstStage], 15, CondMeanKind::Ar1)
            .first_stage
            .unwrap()
            .mean_rmse
    };
    let (short, long) = (err(100), err(800));
    assert!(long < 0.8 * short, "{short} vs {long}");
}
