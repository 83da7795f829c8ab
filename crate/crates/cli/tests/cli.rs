use std::path::Path;
use std::process::{Command, Output};

fn betasort(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betasort"))
        .args(args)
        .current_dir(cwd)
        .env("BETASORT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str =
    "dgp.n = 80\ndgp.periods = 150\ndraws = 500\ngrid_points = 9\ngrid_lo = 0.1\ngrid_hi = 0.9\n";

#[test]
fn simulate_then_every_estimation_command() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.conf"), SMALL).unwrap();
    let o = betasort(
        &["simulate", "--config", "c.conf", "--out", "sim"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let common = [
        "--config",
        "sim/run.conf",
        "--set",
        "draws=500",
        "--set",
        "grid_points=9",
        "--out",
        "est",
    ];
    for cmd in ["estimate", "band", "test-hml", "test-butterfly", "fixed-t"] {
        let args: Vec<&str> = std::iter::once(cmd).chain(common).collect();
        let o = betasort(&args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let est = dir.path().join("est");
    let band = std::fs::read_to_string(est.join("band.csv")).unwrap();
    assert!(band.starts_with("beta,center,lower,upper,se,kind\n"));
    assert_eq!(band.lines().count(), 10);
    for kind in ["estimate", "band", "test_hml", "test_butterfly", "fixed_t"] {
        let text = std::fs::read_to_string(est.join(format!("{kind}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schema_version"], 1, "{kind}");
        assert_eq!(v["kind"], kind);
        assert_eq!(v["inputs"].as_array().map(Vec::len), Some(2), "{kind}");
    }
}

#[test]
fn missing_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = betasort(&["estimate", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("panel"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["estimate", "--bogus"][..],
        &["frobnicate"],
        &["simulate", "--set", "colour=red"],
        &["simulate", "--set", "j1=1"],
    ] {
        let o = betasort(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(betasort(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // Identical betas for every asset leave nothing to sort on.
    let conf = format!(
        "{SMALL}dgp.eta_lo = 1\ndgp.eta_hi = 1\ndgp.loading_amplitude = 0\ndgp.sigma_eps = 0\n"
    );
    std::fs::write(dir.path().join("c.conf"), conf).unwrap();
    assert_eq!(
        betasort(
            &["simulate", "--config", "c.conf", "--out", "sim"],
            dir.path()
        )
        .status
        .code(),
        Some(0)
    );
    let o = betasort(
        &["estimate", "--config", "sim/run.conf", "--out", "est"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn montecarlo_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.conf"), SMALL).unwrap();
    let o = betasort(
        &[
            "montecarlo",
            "--config",
            "c.conf",
            "--set",
            "mc.reps=3",
            "--set",
            "mc.checks=first_stage,grand_mean",
            "--out",
            "mc",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tables = std::fs::read_to_string(dir.path().join("mc/mc_tables.csv")).unwrap();
    assert!(tables.contains("grand_mean,plugin_cover,0,"));
    let v: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("mc/montecarlo.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(v["result"]["tables"]["succeeded"], 3);
}
