//! `betasort` command-line tool.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use betasort::dgp::{simulate_factor, simulate_panel};
use betasort::io::output::{
    write_band_csv, write_betas_csv, write_curve_csv, write_mc_tables_csv, write_period_curves_csv,
};
use betasort::io::run::{self, Estimation};
use betasort::io::{
    align_factor, load_factor_csv, load_panel_csv, write_factor_csv, write_panel_csv, Artifact,
    RunConfig,
};
use betasort::montecarlo::run_suite;
use betasort::rng::stream;
use betasort::{FactorSeries, PanelData};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "betasort",
    version,
    about = "Beta-sorted portfolio estimation and inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set j1=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "betasort-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic panel and factor.
    Simulate(Common),
    /// Estimate betas and the beta-sorted curve.
    Estimate(Common),
    /// Uniform band for the grand-mean curve.
    Band(Common),
    /// High-minus-low spread test.
    TestHml(Common),
    /// Butterfly (convexity) test.
    TestButterfly(Common),
    /// Band for one period's systematic realized return.
    FixedT(Common),
    /// Monte Carlo suite on the simulation design.
    Montecarlo(Common),
}

type Inputs = Vec<(&'static str, PathBuf)>;
type Handler = fn(&RunConfig, &Path) -> Result<()>;

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load(cfg: &RunConfig) -> Result<(PanelData, FactorSeries, Inputs)> {
    let panel_path = cfg.require_path("panel")?.to_path_buf();
    let factor_path = cfg.require_path("factor")?.to_path_buf();
    let panel = load_panel_csv(&panel_path, cfg.returns)?;
    let factor = align_factor(&panel, &load_factor_csv(&factor_path)?)?;
    Ok((
        panel,
        factor,
        vec![("panel", panel_path), ("factor", factor_path)],
    ))
}

fn artifact<R: serde::Serialize>(
    kind: &str,
    cfg: &RunConfig,
    inputs: &[(&str, PathBuf)],
    result: R,
    out: &Path,
) -> Result<()> {
    let mut a = Artifact::new(kind, cfg, result);
    for (name, p) in inputs {
        a = a.with_input(name, p)?;
    }
    a.write_json(out.join(format!("{kind}.json")))?;
    Ok(())
}

fn estimated(cfg: &RunConfig) -> Result<(PanelData, Estimation, Inputs)> {
    let (panel, factor, inputs) = load(cfg)?;
    let est = run::estimate(&panel, &factor, cfg)?;
    Ok((panel, est, inputs))
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut rng = stream(cfg.dgp.seed, 0);
    let factor = simulate_factor(&cfg.dgp, &mut rng)?;
    let (panel, _) = simulate_panel(&cfg.dgp, &factor, &mut rng)?;
    let factor = FactorSeries::new(panel.periods().to_vec(), factor.values)?;
    write_panel_csv(&panel, create(&out.join("panel.csv"))?)?;
    write_factor_csv(&factor, create(&out.join("factor.csv"))?)?;
    fs::write(
        out.join("run.conf"),
        "# inputs written by `betasort simulate`\npanel = panel.csv\nfactor = factor.csv\n",
    )?;
    let summary = json!({ "periods": panel.n_periods(), "assets": panel.n_assets() });
    artifact("simulate", cfg, &[], summary, out)?;
    println!(
        "simulated {} periods x {} assets into {}",
        panel.n_periods(),
        panel.n_assets(),
        out.display()
    );
    Ok(())
}

fn estimate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (panel, est, inputs) = estimated(cfg)?;
    write_betas_csv(&panel, &est.betas, create(&out.join("betas.csv"))?)?;
    write_curve_csv(&est.curve, &est.var, create(&out.join("curve.csv"))?)?;
    write_period_curves_csv(&panel, &est.curve, create(&out.join("period_curves.csv"))?)?;
    let skipped: Vec<_> = est
        .sorted
        .skipped
        .iter()
        .map(|(t, e)| json!({ "date": panel.periods()[*t], "reason": e.to_string() }))
        .collect();
    let summary = json!({
        "h": est.h,
        "window": est.betas.kernel.window(panel.n_periods()),
        "valid_start": panel.periods()[est.betas.valid_start],
        "valid_end": panel.periods()[est.betas.valid_end],
        "masked_windows": est.betas.masked,
        "sorted_periods": est.curve.periods.len(),
        "skipped_periods": skipped,
        "grid": est.curve.grid,
        "mu_hat": est.curve.values,
        "effective_t": est.curve.effective_t,
    });
    artifact("estimate", cfg, &inputs, summary, out)?;
    println!(
        "estimated curve on {} grid points from {} periods",
        est.curve.len(),
        est.curve.periods.len()
    );
    Ok(())
}

fn band(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (_, est, inputs) = estimated(cfg)?;
    let (band, zero) = run::band(&est, cfg)?;
    write_band_csv(&band, create(&out.join("band.csv"))?)?;
    artifact(
        "band",
        cfg,
        &inputs,
        json!({ "band": band, "zero_test": zero }),
        out,
    )?;
    println!(
        "{} band: critical value {:.4}; zero curve {}",
        band.kind.as_str(),
        band.q_hat,
        if zero.reject {
            "rejected"
        } else {
            "not rejected"
        }
    );
    Ok(())
}

fn report_test(
    kind: &str,
    cfg: &RunConfig,
    inputs: &[(&str, PathBuf)],
    t: &betasort::inference::TestResult,
    out: &Path,
) -> Result<()> {
    artifact(kind, cfg, inputs, t, out)?;
    println!(
        "{kind}: statistic {:.4}, critical value {:.4} at {}: {}",
        t.statistic,
        t.critical_value,
        t.alpha,
        if t.reject { "reject" } else { "do not reject" }
    );
    Ok(())
}

fn fixed_t(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (panel, est, inputs) = estimated(cfg)?;
    let band = run::fixed_t(&est, &panel, cfg)?;
    write_band_csv(&band, create(&out.join("fixed_t_band.csv"))?)?;
    let date = band.period.map(|t| panel.periods()[t].clone());
    artifact(
        "fixed_t",
        cfg,
        &inputs,
        json!({ "date": date, "band": band }),
        out,
    )?;
    println!("fixed-t band for {}", date.unwrap_or_default());
    Ok(())
}

fn montecarlo(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mc = cfg.mc_config();
    let report = run_suite(&mc)?;
    write_mc_tables_csv(&report, create(&out.join("mc_tables.csv"))?)?;
    artifact("montecarlo", cfg, &[], &report, out)?;
    let t = &report.tables;
    println!(
        "{} of {} replications succeeded in {:.1}s",
        t.succeeded, t.reps, report.wall_time_secs
    );
    if !report.within_failure_budget() {
        eprintln!("warning: more than 5% of replications failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (common, cmd): (&Common, Handler) = match &cli.command {
        Command::Simulate(c) => (c, simulate),
        Command::Estimate(c) => (c, estimate),
        Command::Band(c) => (c, band),
        Command::TestHml(c) => (c, |cfg, out| {
            let (_, est, inputs) = estimated(cfg)?;
            report_test(
                "test_hml",
                cfg,
                &inputs,
                &run::high_minus_low(&est, cfg)?,
                out,
            )
        }),
        Command::TestButterfly(c) => (c, |cfg, out| {
            let (_, est, inputs) = estimated(cfg)?;
            report_test(
                "test_butterfly",
                cfg,
                &inputs,
                &run::butterfly(&est, cfg)?,
                out,
            )
        }),
        Command::FixedT(c) => (c, fixed_t),
        Command::Montecarlo(c) => (c, montecarlo),
    };
    let cfg = config(common)?;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("cannot create {}", common.out.display()))?;
    cmd(&cfg, &common.out)
}

fn threads() -> Result<()> {
    let Ok(v) = std::env::var("BETASORT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("BETASORT_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .downcast_ref::<betasort::Error>()
                .is_some_and(betasort::Error::is_numerical);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
