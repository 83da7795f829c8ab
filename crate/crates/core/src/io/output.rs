//! CSV and JSON result files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::Band;
use crate::kernel::BetaPanel;
use crate::montecarlo::{McReport, Rate};
use crate::panel::PanelData;
use crate::sorting::MuCurve;
use crate::variance::VarianceEstimates;

/// Version of every JSON artifact layout.
pub const SCHEMA_VERSION: u32 = 1;

fn io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

/// `date,asset_id,alpha,beta` for every estimated pair.
pub fn write_betas_csv<W: Write>(panel: &PanelData, betas: &BetaPanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "asset_id", "alpha", "beta"])
        .map_err(io)?;
    for t in betas.valid_periods() {
        for (i, asset) in panel.assets().iter().enumerate() {
            if let (Some(a), Some(b)) = (betas.alpha(t, i), betas.beta(t, i)) {
                w.write_record([
                    panel.periods()[t].as_str(),
                    asset,
                    &a.to_string(),
                    &b.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `beta,mu_hat,effective_t,plugin_var,fm_var` on the grid.
pub fn write_curve_csv<W: Write>(
    curve: &MuCurve,
    var: &VarianceEstimates,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["beta", "mu_hat", "effective_t", "plugin_var", "fm_var"])
        .map_err(io)?;
    let fm = var.fm_var();
    for v in 0..curve.len() {
        w.write_record([
            fmt(curve.grid[v]),
            fmt(curve.values[v]),
            curve.effective_t[v].to_string(),
            fmt(var.plugin_var[v]),
            fmt(fm[v]),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-period curves in long form: `date,beta,mu_t`; masked points are skipped.
pub fn write_period_curves_csv<W: Write>(
    panel: &PanelData,
    curve: &MuCurve,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "beta", "mu_t"]).map_err(io)?;
    for (row, &t) in curve.periods.iter().enumerate() {
        for (v, &x) in curve.values_t[row].iter().enumerate() {
            if !x.is_nan() {
                w.write_record([panel.periods()[t].clone(), fmt(curve.grid[v]), fmt(x)])
                    .map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `beta,center,lower,upper,se,kind`; masked points have empty numeric fields.
pub fn write_band_csv<W: Write>(band: &Band, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["beta", "center", "lower", "upper", "se", "kind"])
        .map_err(io)?;
    let (lo, hi) = (band.lower(), band.upper());
    for v in 0..band.grid.len() {
        w.write_record([
            fmt(band.grid[v]),
            fmt(band.center[v]),
            fmt(lo[v]),
            fmt(hi[v]),
            fmt(band.se[v]),
            band.kind.as_str().to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// `(table, metric, point, value, se, reps)`
type TableRow = (String, String, Option<usize>, f64, Option<f64>, usize);

/// Monte Carlo tables in long form: `table,metric,point,value,se,reps`.
pub fn write_mc_tables_csv<W: Write>(report: &McReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["table", "metric", "point", "value", "se", "reps"])
        .map_err(io)?;
    let t = &report.tables;
    let mut rows: Vec<TableRow> = vec![
        (
            "suite".into(),
            "succeeded".into(),
            None,
            t.succeeded as f64,
            None,
            t.reps,
        ),
        (
            "suite".into(),
            "failed".into(),
            None,
            t.failed as f64,
            None,
            t.reps,
        ),
    ];
    let n = t.succeeded;
    let push_rate =
        |rows: &mut Vec<_>, table: &str, metric: &str, point: Option<usize>, r: &Rate| {
            rows.push((
                table.to_string(),
                metric.to_string(),
                point,
                r.rate,
                Some(r.se),
                r.reps,
            ));
        };
    if let Some(fs) = &t.first_stage {
        rows.push((
            "first_stage".into(),
            "mean_max_abs_err".into(),
            None,
            fs.mean_max_abs_err,
            None,
            fs.reps,
        ));
        rows.push((
            "first_stage".into(),
            "mean_rmse".into(),
            None,
            fs.mean_rmse,
            None,
            fs.reps,
        ));
    }
    if let Some(nt) = &t.normality {
        push_rate(&mut rows, "normality", "cover_alpha", None, &nt.cover_alpha);
        push_rate(&mut rows, "normality", "cover_beta", None, &nt.cover_beta);
        rows.push((
            "normality".into(),
            "mean_z_beta".into(),
            None,
            nt.mean_z_beta,
            None,
            n,
        ));
        rows.push((
            "normality".into(),
            "var_z_beta".into(),
            None,
            nt.var_z_beta,
            None,
            n,
        ));
    }
    if let Some(g) = &t.grand_mean {
        for v in 0..g.mean_grid.len() {
            let p = Some(v);
            rows.push((
                "grand_mean".into(),
                "beta".into(),
                p,
                g.mean_grid[v],
                None,
                n,
            ));
            rows.push(("grand_mean".into(), "bias".into(), p, g.bias[v], None, n));
            rows.push(("grand_mean".into(), "rmse".into(), p, g.rmse[v], None, n));
            rows.push((
                "grand_mean".into(),
                "mean_plugin_var".into(),
                p,
                g.mean_plugin_var[v],
                None,
                n,
            ));
            rows.push((
                "grand_mean".into(),
                "mean_fm_var".into(),
                p,
                g.mean_fm_var[v],
                None,
                n,
            ));
            push_rate(
                &mut rows,
                "grand_mean",
                "plugin_cover",
                p,
                &g.plugin_cover[v],
            );
            push_rate(&mut rows, "grand_mean", "fm_cover", p, &g.fm_cover[v]);
        }
        push_rate(
            &mut rows,
            "grand_mean",
            "zero_cm_dominates",
            None,
            &g.zero_cm_dominates,
        );
        push_rate(
            &mut rows,
            "grand_mean",
            "uniform_sharp",
            None,
            &g.uniform_sharp,
        );
        push_rate(
            &mut rows,
            "grand_mean",
            "uniform_conservative",
            None,
            &g.uniform_conservative,
        );
    }
    for (name, r) in [
        ("zero_reject", &t.zero_reject),
        ("hml_reject", &t.hml_reject),
        ("butterfly_reject", &t.butterfly_reject),
    ] {
        if let Some(r) = r {
            push_rate(&mut rows, "tests", name, None, r);
        }
    }
    if let Some(f) = &t.fixed_t {
        push_rate(&mut rows, "fixed_t", "cover_m", None, &f.cover_m);
        push_rate(
            &mut rows,
            "fixed_t",
            "cover_m_surprise",
            None,
            &f.cover_m_surprise,
        );
        push_rate(
            &mut rows,
            "fixed_t",
            "cover_mu_surprise",
            None,
            &f.cover_mu_surprise,
        );
    }
    for (table, metric, point, x, se, reps) in rows {
        w.write_record([
            table,
            metric,
            point.map_or(String::new(), |p| p.to_string()),
            fmt(x),
            se.map_or(String::new(), fmt),
            reps.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

/// Self-describing JSON result of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<C, R> {
    pub schema_version: u32,
    pub kind: String,
    pub inputs: Vec<InputDigest>,
    pub config: C,
    pub result: R,
}

impl<C: Serialize, R: Serialize> Artifact<C, R> {
    pub fn new(kind: &str, config: C, result: R) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            inputs: Vec::new(),
            config,
            result,
        }
    }

    /// Records the digest of an input file.
    pub fn with_input(mut self, name: &str, path: &Path) -> Result<Self> {
        self.inputs.push(InputDigest {
            name: name.to_string(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::BandKind;

    #[test]
    fn band_csv_layout() {
        let band = Band {
            kind: BandKind::GrandMeanSharp,
            grid: vec![0.5, 1.0],
            center: vec![1.0, f64::NAN],
            se: vec![0.5, f64::NAN],
            half_width: vec![1.0, f64::NAN],
            q_hat: 2.0,
            alpha: 0.05,
            period: None,
        };
        let mut buf = Vec::new();
        write_band_csv(&band, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "beta,center,lower,upper,se,kind\n0.5,1,0,2,0.5,grand_mean_sharp\n1,,,,,grand_mean_sharp\n"
        );
    }

    #[test]
    fn artifact_carries_schema_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.csv");
        std::fs::write(&input, "abc").unwrap();
        let out = dir.path().join("a.json");
        Artifact::new("demo", serde_json::json!({"k": 1}), 3.5)
            .with_input("panel", &input)
            .unwrap()
            .write_json(&out)
            .unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["schema_version"], SCHEMA_VERSION);
        assert_eq!(v["kind"], "demo");
        assert_eq!(
            v["inputs"][0]["sha256"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
