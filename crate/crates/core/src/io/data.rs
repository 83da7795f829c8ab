//! Panel and factor CSV files.
//!
//! Dates are opaque labels ordered lexically (ISO-8601 sorts correctly).

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{FactorSeries, PanelData};

/// How many bad rows an error message lists before truncating.
const MAX_LISTED: usize = 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnUnit {
    #[default]
    Fraction,
    Percent,
}

impl ReturnUnit {
    /// Multiplier to the canonical fraction unit.
    pub fn to_fraction(self) -> f64 {
        match self {
            ReturnUnit::Fraction => 1.0,
            ReturnUnit::Percent => 0.01,
        }
    }
}

impl FromStr for ReturnUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fraction" => Ok(ReturnUnit::Fraction),
            "percent" => Ok(ReturnUnit::Percent),
            other => Err(Error::validation(
                "returns",
                format!("unknown unit `{other}`"),
            )),
        }
    }
}

fn parse_err(name: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: name.to_string(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn column(headers: &csv::StringRecord, name: &str, source: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| parse_err(source, format!("missing column `{name}`")))
}

fn number(field: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format!("cannot parse {what} `{field}`"))?;
    if !v.is_finite() {
        return Err(format!("{what} `{field}` is not finite"));
    }
    Ok(v)
}

fn summarize(problems: &[String]) -> String {
    let mut msg = problems
        .iter()
        .take(MAX_LISTED)
        .cloned()
        .collect::<Vec<_>>()
        .join("; ");
    if problems.len() > MAX_LISTED {
        msg.push_str(&format!("; and {} more", problems.len() - MAX_LISTED));
    }
    msg
}

struct Row {
    date: String,
    asset: String,
    ret: f64,
    weight: Option<f64>,
}

/// Reads `date,asset_id,ret[,weight]` from any reader; `source` names it in errors.
pub fn read_panel_csv<R: Read>(reader: R, source: &str, unit: ReturnUnit) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(source, e.to_string()))?
        .clone();
    let (c_date, c_asset, c_ret) = (
        column(&headers, "date", source)?,
        column(&headers, "asset_id", source)?,
        column(&headers, "ret", source)?,
    );
    let c_weight = headers.iter().position(|h| h.trim() == "weight");

    let mut rows = Vec::new();
    let mut problems = Vec::new();
    let mut seen: HashMap<(String, String), u64> = HashMap::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| rec.get(c).unwrap_or("");
        let (date, asset) = (field(c_date).to_string(), field(c_asset).to_string());
        if date.is_empty() || asset.is_empty() {
            problems.push(format!("line {line}: empty date or asset_id"));
            continue;
        }
        let ret = match number(field(c_ret), "return") {
            Ok(v) => v * unit.to_fraction(),
            Err(m) => {
                problems.push(format!("line {line}: {m}"));
                continue;
            }
        };
        let weight = match c_weight.map(field) {
            None | Some("") => None,
            Some(w) => match number(w, "weight") {
                Ok(v) => Some(v),
                Err(m) => {
                    problems.push(format!("line {line}: {m}"));
                    continue;
                }
            },
        };
        if let Some(first) = seen.insert((date.clone(), asset.clone()), line) {
            return Err(parse_err(
                source,
                format!("line {line}: duplicate (date, asset_id) = ({date}, {asset}), first seen on line {first}"),
            ));
        }
        rows.push(Row {
            date,
            asset,
            ret,
            weight,
        });
    }
    if !problems.is_empty() {
        return Err(parse_err(source, summarize(&problems)));
    }
    if rows.is_empty() {
        return Err(parse_err(source, "no data rows"));
    }

    let periods: Vec<String> = rows
        .iter()
        .map(|r| r.date.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let assets: Vec<String> = rows
        .iter()
        .map(|r| r.asset.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let p_index: HashMap<&str, usize> = periods
        .iter()
        .enumerate()
        .map(|(k, p)| (p.as_str(), k))
        .collect();
    let a_index: HashMap<&str, usize> = assets
        .iter()
        .enumerate()
        .map(|(k, a)| (a.as_str(), k))
        .collect();
    let n = assets.len();
    let mut cells = vec![None; periods.len() * n];
    let has_weights = rows.iter().any(|r| r.weight.is_some());
    let mut weights = has_weights.then(|| vec![None; periods.len() * n]);
    for r in &rows {
        let k = p_index[r.date.as_str()] * n + a_index[r.asset.as_str()];
        cells[k] = Some(r.ret);
        if let Some(w) = weights.as_mut() {
            w[k] = r.weight;
        }
    }
    PanelData::new(periods, assets, cells, weights)
}

pub fn load_panel_csv(path: impl AsRef<Path>, unit: ReturnUnit) -> Result<PanelData> {
    let path = path.as_ref();
    read_panel_csv(open(path)?, &path.display().to_string(), unit)
}

/// Writes observed cells as `date,asset_id,ret[,weight]` in fraction units.
///
/// `f64` display is the shortest string that parses back to the same value,
/// so reading the file again reproduces the panel exactly.
pub fn write_panel_csv<W: Write>(panel: &PanelData, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let weighted = panel.has_weights();
    let io = |e: csv::Error| Error::Io(e.to_string());
    if weighted {
        w.write_record(["date", "asset_id", "ret", "weight"])
            .map_err(io)?;
    } else {
        w.write_record(["date", "asset_id", "ret"]).map_err(io)?;
    }
    for (t, date) in panel.periods().iter().enumerate() {
        for (i, asset) in panel.assets().iter().enumerate() {
            let Some(r) = panel.get(t, i) else { continue };
            let mut rec = vec![date.clone(), asset.clone(), r.to_string()];
            if weighted {
                rec.push(panel.weight(t, i).map_or(String::new(), |x| x.to_string()));
            }
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `date,factor`; rows are sorted by date.
pub fn read_factor_csv<R: Read>(reader: R, source: &str) -> Result<FactorSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(source, e.to_string()))?
        .clone();
    let (c_date, c_val) = (
        column(&headers, "date", source)?,
        column(&headers, "factor", source)?,
    );
    let mut rows: Vec<(String, f64, u64)> = Vec::new();
    let mut problems = Vec::new();
    for rec in rdr.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!(
                    "line {}: {e}",
                    e.position().map_or(0, |p| p.line())
                ));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        let date = rec.get(c_date).unwrap_or("").to_string();
        if date.is_empty() {
            problems.push(format!("line {line}: empty date"));
            continue;
        }
        match number(rec.get(c_val).unwrap_or(""), "factor") {
            Ok(v) => rows.push((date, v, line)),
            Err(m) => problems.push(format!("line {line}: {m}")),
        }
    }
    if !problems.is_empty() {
        return Err(parse_err(source, summarize(&problems)));
    }
    if rows.is_empty() {
        return Err(parse_err(source, "no data rows"));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.2.cmp(&b.2)));
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(parse_err(
            source,
            format!(
                "line {}: duplicate date {}, first seen on line {}",
                w[1].2, w[1].0, w[0].2
            ),
        ));
    }
    let (periods, values) = rows.into_iter().map(|(d, v, _)| (d, v)).unzip();
    FactorSeries::new(periods, values)
}

pub fn load_factor_csv(path: impl AsRef<Path>) -> Result<FactorSeries> {
    let path = path.as_ref();
    read_factor_csv(open(path)?, &path.display().to_string())
}

pub fn write_factor_csv<W: Write>(factor: &FactorSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["date", "factor"]).map_err(io)?;
    for (d, v) in factor.periods.iter().zip(&factor.values) {
        w.write_record([d.as_str(), &v.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Restricts `factor` to the panel's periods, in panel order.
///
/// Every panel date must be present; the error lists the missing ones.
pub fn align_factor(panel: &PanelData, factor: &FactorSeries) -> Result<FactorSeries> {
    let index: HashMap<&str, usize> = factor
        .periods
        .iter()
        .enumerate()
        .map(|(k, d)| (d.as_str(), k))
        .collect();
    let mut missing = Vec::new();
    let mut values = Vec::with_capacity(panel.n_periods());
    for d in panel.periods() {
        match index.get(d.as_str()) {
            Some(&k) => values.push(factor.values[k]),
            None => missing.push(d.clone()),
        }
    }
    if !missing.is_empty() {
        let shown = summarize(&missing);
        return Err(Error::Alignment(format!(
            "{} panel date(s) have no factor value: {shown}",
            missing.len()
        )));
    }
    FactorSeries::new(panel.periods().to_vec(), values)
}

/// Credit-conditions factor `(0.5 SLOOS + 50) + ISM` on the ISM dates.
///
/// SLOOS is carried forward to each ISM date from its latest release on or
/// before that date. ISM dates before the first SLOOS release are dropped.
pub fn build_ccw_factor(sloos: &FactorSeries, ism: &FactorSeries) -> Result<FactorSeries> {
    let mut s: Vec<(&str, f64)> = sloos
        .periods
        .iter()
        .map(String::as_str)
        .zip(sloos.values.iter().copied())
        .collect();
    s.sort_by(|a, b| a.0.cmp(b.0));
    let (Some(first), Some(last_ism)) = (s.first(), ism.periods.iter().max()) else {
        return Err(Error::validation("ccw", "empty input series"));
    };
    if last_ism.as_str() < first.0 {
        return Err(Error::Alignment(format!(
            "SLOOS starts at {} after the last ISM date {last_ism}",
            first.0
        )));
    }
    let mut pairs: Vec<(&str, f64)> = ism
        .periods
        .iter()
        .map(String::as_str)
        .zip(ism.values.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    let (mut periods, mut values) = (Vec::new(), Vec::new());
    let mut k = 0;
    for (date, m) in pairs {
        while k + 1 < s.len() && s[k + 1].0 <= date {
            k += 1;
        }
        if s[k].0 > date {
            continue;
        }
        periods.push(date.to_string());
        values.push(0.5 * s[k].1 + 50.0 + m);
    }
    FactorSeries::new(periods, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn panel(text: &str) -> Result<PanelData> {
        read_panel_csv(text.as_bytes(), "test.csv", ReturnUnit::Fraction)
    }

    #[test]
    fn small_panel() {
        let p =
            panel("date,asset_id,ret\n2001-01,A,0.01\n2001-01,B,-0.02\n2001-02,A,0.03\n").unwrap();
        assert_eq!((p.n_periods(), p.n_assets()), (2, 2));
        assert_eq!((p.count(0), p.count(1)), (2, 1));
        assert_eq!(p.get(1, 1), None);
        assert_eq!(p.get(0, 1), Some(-0.02));
    }

    #[test]
    fn percent_unit_scales() {
        let p = read_panel_csv(
            "date,asset_id,ret\nd,A,2.5\n".as_bytes(),
            "x",
            ReturnUnit::Percent,
        )
        .unwrap();
        assert_eq!(p.get(0, 0), Some(0.025));
    }

    #[test]
    fn duplicate_key_names_the_line() {
        let e = panel("date,asset_id,ret\nd,A,1\nd,B,2\nd,A,3\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 4") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn missing_column_and_bad_rows() {
        let e = panel("date,asset,ret\nd,A,1\n").unwrap_err();
        assert!(e.to_string().contains("asset_id"));
        let e = panel("date,asset_id,ret\nd,A,x\nd,B,1\ne,C,inf\n").unwrap_err();
        let msg = e.to_string();
        assert!(
            msg.contains("line 2") && msg.contains("line 4") && !msg.contains("line 3"),
            "{msg}"
        );
    }

    #[test]
    fn weights_are_optional_per_row() {
        let p = panel("date,asset_id,ret,weight\nd,A,1,10\nd,B,2,\n").unwrap();
        assert_eq!(p.weight(0, 0), Some(10.0));
        assert_eq!(p.weight(0, 1), None);
    }

    #[test]
    fn factor_alignment() {
        let p = panel("date,asset_id,ret\n2001,A,1\n2002,A,1\n2003,A,1\n").unwrap();
        let f = read_factor_csv(
            "date,factor\n2003,3\n2001,1\n2002,2\n2004,4\n".as_bytes(),
            "f",
        )
        .unwrap();
        assert_eq!(align_factor(&p, &f).unwrap().values, vec![1.0, 2.0, 3.0]);
        let g = read_factor_csv("date,factor\n2001,1\n".as_bytes(), "f").unwrap();
        let msg = align_factor(&p, &g).unwrap_err().to_string();
        assert!(msg.contains("2002") && msg.contains("2003"), "{msg}");
        let c = read_factor_csv("date,factor\na,0.5\nb,0.5\n".as_bytes(), "f").unwrap();
        assert_eq!(c.values, vec![0.5, 0.5]);
    }

    #[test]
    fn ccw_formula() {
        let s = |d: &[&str], v: &[f64]| {
            FactorSeries::new(d.iter().map(|x| x.to_string()).collect(), v.to_vec()).unwrap()
        };
        let one = |sl: f64, ism: f64| {
            build_ccw_factor(&s(&["2000-01"], &[sl]), &s(&["2000-01"], &[ism]))
                .unwrap()
                .values[0]
        };
        assert_eq!(one(0.0, 50.0), 100.0);
        assert_eq!(one(-100.0, 0.0), 0.0);
        assert_eq!(one(20.0, 55.0), 115.0);
    }

    #[test]
    fn ccw_forward_fills_quarterly_sloos() {
        let s = |d: &[&str], v: &[f64]| {
            FactorSeries::new(d.iter().map(|x| x.to_string()).collect(), v.to_vec()).unwrap()
        };
        let sloos = s(&["2000-01", "2000-04"], &[10.0, 20.0]);
        let ism = s(
            &[
                "1999-12", "2000-01", "2000-02", "2000-03", "2000-04", "2000-05",
            ],
            &[50.0; 6],
        );
        let f = build_ccw_factor(&sloos, &ism).unwrap();
        assert_eq!(
            f.periods,
            vec!["2000-01", "2000-02", "2000-03", "2000-04", "2000-05"]
        );
        assert_eq!(f.values, vec![105.0, 105.0, 105.0, 110.0, 110.0]);
        let late = s(&["2001-01"], &[0.0]);
        assert!(matches!(
            build_ccw_factor(&late, &ism),
            Err(Error::Alignment(_))
        ));
    }

    proptest! {
        #[test]
        fn panel_round_trip(
            cells in proptest::collection::vec(proptest::option::of(-1e6f64..1e6), 1..60),
            n in 1usize..6,
        ) {
            let t = cells.len().div_ceil(n);
            let mut cells = cells;
            cells.resize(t * n, None);
            if cells.iter().all(Option::is_none) {
                cells[0] = Some(0.1);
            }
            // Drop periods and assets that end up fully empty so the panel is reproducible.
            let rows_used: Vec<usize> = (0..t).filter(|&r| (0..n).any(|i| cells[r * n + i].is_some())).collect();
            let cols_used: Vec<usize> = (0..n).filter(|&i| (0..t).any(|r| cells[r * n + i].is_some())).collect();
            let kept: Vec<Option<f64>> = rows_used.iter().flat_map(|&r| cols_used.iter().map(move |&i| (r, i))).map(|(r, i)| cells[r * n + i]).collect();
            let periods = rows_used.iter().map(|r| format!("2000-{:03}", r)).collect();
            let assets = cols_used.iter().map(|i| format!("x{i}")).collect();
            let original = PanelData::new(periods, assets, kept, None).unwrap();
            let mut buf = Vec::new();
            write_panel_csv(&original, &mut buf).unwrap();
            let back = read_panel_csv(buf.as_slice(), "rt", ReturnUnit::Fraction).unwrap();
            prop_assert_eq!(back.periods(), original.periods());
            prop_assert_eq!(back.assets(), original.assets());
            for r in 0..original.n_periods() {
                for i in 0..original.n_assets() {
                    prop_assert_eq!(back.get(r, i).map(f64::to_bits), original.get(r, i).map(f64::to_bits));
                }
            }
        }
    }
}
