//! CSV readers and writers. Floats are written with 17 significant digits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize, Serializer};

use crate::baselines::{EventStudyFit, OvbRow};
use crate::eb::{BackendKind, EbResult};
use crate::error::{Error, Result};
use crate::model::{EventDesign, PanelData};
use crate::qmle::QmleResult;
use crate::wald::WaldTest;

pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

pub fn ser17<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&fmt17(*x))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub parameter: String,
    #[serde(serialize_with = "ser17")]
    pub estimate: f64,
    #[serde(serialize_with = "ser17")]
    pub std_error: f64,
}

pub fn common_param_rows(result: &QmleResult) -> Vec<ParamRow> {
    let est = result.eta_vector();
    let se = result.std_errors();
    result
        .names()
        .into_iter()
        .enumerate()
        .map(|(k, parameter)| ParamRow { parameter, estimate: est[k], std_error: se[k] })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyRow {
    pub estimator: String,
    pub j: i64,
    #[serde(serialize_with = "ser17")]
    pub coefficient: f64,
    #[serde(serialize_with = "ser17")]
    pub std_error: f64,
}

pub fn event_study_rows(fits: &[EventStudyFit]) -> Vec<EventStudyRow> {
    fits.iter()
        .flat_map(|f| {
            f.event_times.iter().enumerate().map(move |(k, j)| EventStudyRow {
                estimator: f.estimator.clone(),
                j: *j,
                coefficient: f.coefficients[k],
                std_error: f.std_errors[k],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub name: String,
    #[serde(serialize_with = "ser17")]
    pub statistic: f64,
    pub df: usize,
    #[serde(serialize_with = "ser17")]
    pub critical_value: f64,
    #[serde(serialize_with = "ser17")]
    pub p_value: f64,
    pub reject: bool,
}

impl From<&WaldTest> for TestRow {
    fn from(t: &WaldTest) -> Self {
        Self {
            name: t.name.clone(),
            statistic: t.statistic,
            df: t.df,
            critical_value: t.critical_value,
            p_value: t.p_value,
            reject: t.reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvbCsvRow {
    pub j: usize,
    #[serde(serialize_with = "ser17")]
    pub true_delta: f64,
    #[serde(serialize_with = "ser17")]
    pub naive_delta: f64,
    #[serde(serialize_with = "ser17")]
    pub naive_se: f64,
    #[serde(serialize_with = "ser17")]
    pub analytic_bias: f64,
    #[serde(serialize_with = "ser17")]
    pub simulated_bias: f64,
}

impl From<&OvbRow> for OvbCsvRow {
    fn from(r: &OvbRow) -> Self {
        Self {
            j: r.j,
            true_delta: r.true_delta,
            naive_delta: r.naive_delta,
            naive_se: r.naive_se,
            analytic_bias: r.analytic_bias,
            simulated_bias: r.simulated_bias,
        }
    }
}

/// Per-unit effects of one or more EB runs, wide in the effect columns.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEffectsTable {
    pub units: Vec<String>,
    pub ar_order: usize,
    pub horizon: usize,
    /// `(backend, lambda_tilde, trajectories)`
    pub blocks: Vec<(String, DMatrix<f64>, DMatrix<f64>)>,
}

impl UnitEffectsTable {
    pub fn from_results(units: Vec<String>, results: &[EbResult]) -> Self {
        let ar_order = results.first().map_or(0, |r| r.lambda_tilde.ncols() - 1);
        let horizon = results.first().map_or(0, |r| r.trajectories.ncols().saturating_sub(1));
        Self {
            units,
            ar_order,
            horizon,
            blocks: results
                .iter()
                .map(|r| (r.backend.to_string(), r.lambda_tilde.clone(), r.trajectories.clone()))
                .collect(),
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["unit".to_string(), "backend".into(), "alpha".into()];
        h.extend((0..self.ar_order).map(|m| format!("delta_init{m}")));
        h.extend((0..=self.horizon).map(|j| format!("delta{j}")));
        h
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        w.write_record(self.header())?;
        for (backend, lam, traj) in &self.blocks {
            for (i, unit) in self.units.iter().enumerate() {
                let mut rec = vec![unit.clone(), backend.clone()];
                rec.extend(lam.row(i).iter().map(|v| fmt17(*v)));
                rec.extend(traj.row(i).iter().map(|v| fmt17(*v)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let ar_order = header.iter().filter(|h| h.starts_with("delta_init")).count();
        let horizon = header.iter().filter(|h| h.starts_with("delta") && !h.starts_with("delta_init")).count();
        if header.len() < 3 || header[..3] != ["unit", "backend", "alpha"] || horizon == 0 {
            return Err(Error::Config(format!("{}: not a unit-effects table", path.display())));
        }
        let horizon = horizon - 1;
        let d = 1 + ar_order;
        let mut rows: Vec<(String, String, Vec<f64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Config(format!("bad number '{v}': {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push((rec[0].to_string(), rec[1].to_string(), vals));
        }
        let mut order: Vec<String> = Vec::new();
        for (_, b, _) in &rows {
            if !order.contains(b) {
                order.push(b.clone());
            }
        }
        let units: Vec<String> =
            rows.iter().filter(|(_, b, _)| Some(b) == order.first()).map(|(u, _, _)| u.clone()).collect();
        let mut blocks = Vec::new();
        for b in order {
            let mine: Vec<&Vec<f64>> = rows.iter().filter(|(_, bb, _)| *bb == b).map(|(_, _, v)| v).collect();
            if mine.len() != units.len() {
                return Err(Error::Config(format!("backend {b} has {} rows, expected {}", mine.len(), units.len())));
            }
            let lam = DMatrix::from_fn(units.len(), d, |i, k| mine[i][k]);
            let traj = DMatrix::from_fn(units.len(), horizon + 1, |i, k| mine[i][d + k]);
            blocks.push((b, lam, traj));
        }
        Ok(Self { units, ar_order, horizon, blocks })
    }

    pub fn backends(&self) -> Vec<BackendKind> {
        self.blocks.iter().filter_map(|(b, _, _)| b.parse().ok()).collect()
    }
}

/// Column names of a long `(unit, time, outcome)` panel file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub unit: String,
    pub time: String,
    pub outcome: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { unit: "unit".into(), time: "time".into(), outcome: "outcome".into() }
    }
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Config(format!("{}: missing column '{name}'", path.display())))
}

/// Reads a long panel; times must be contiguous integers and are remapped
/// to `0..=T`. Units are ordered by label, numerically when every label is
/// an integer.
pub fn read_panel(path: &Path, schema: &CsvSchema) -> Result<PanelData> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let (cu, ct, cy) = (
        column(&header, &schema.unit, path)?,
        column(&header, &schema.time, path)?,
        column(&header, &schema.outcome, path)?,
    );
    let mut cells: BTreeMap<(String, i64), f64> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let unit = rec[cu].trim().to_string();
        let time: i64 = rec[ct]
            .trim()
            .parse()
            .map_err(|_| Error::InvalidPanel(format!("row {}: time '{}' is not an integer", line + 2, &rec[ct])))?;
        let y: f64 = rec[cy]
            .trim()
            .parse()
            .map_err(|_| Error::InvalidPanel(format!("row {}: outcome '{}' is not a number", line + 2, &rec[cy])))?;
        if cells.insert((unit.clone(), time), y).is_some() {
            return Err(Error::InvalidPanel(format!("duplicate cell (unit {unit}, time {time})")));
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidPanel(format!("{}: no rows", path.display())));
    }
    let units: BTreeSet<String> = cells.keys().map(|(u, _)| u.clone()).collect();
    let times: BTreeSet<i64> = cells.keys().map(|(_, t)| *t).collect();
    let (t_min, t_max) = (*times.first().unwrap(), *times.last().unwrap());
    let mut missing = Vec::new();
    for u in &units {
        for t in t_min..=t_max {
            if !cells.contains_key(&(u.clone(), t)) {
                missing.push(format!("({u}, {t})"));
            }
        }
    }
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(20).cloned().collect();
        let more = if missing.len() > 20 { format!(" and {} more", missing.len() - 20) } else { String::new() };
        return Err(Error::Unbalanced(format!("{}{more}", shown.join(", "))));
    }
    let mut labels: Vec<String> = units.into_iter().collect();
    if labels.iter().all(|u| u.parse::<i64>().is_ok()) {
        labels.sort_by_key(|u| u.parse::<i64>().expect("checked above"));
    }
    let width = (t_max - t_min + 1) as usize;
    let y = DMatrix::from_fn(labels.len(), width, |i, t| cells[&(labels[i].clone(), t_min + t as i64)]);
    PanelData::new(y, Some(labels))
}

pub fn ingest_csv(
    path: &Path,
    schema: &CsvSchema,
    t0: usize,
    horizon: usize,
    ar_order: usize,
) -> Result<(PanelData, EventDesign)> {
    let panel = read_panel(path, schema)?;
    let design = EventDesign::new(t0, horizon, ar_order);
    design.validate(panel.periods())?;
    Ok((panel, design))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub unit: String,
    pub time: usize,
    #[serde(serialize_with = "ser17")]
    pub outcome: f64,
}

pub fn write_panel(path: &Path, panel: &PanelData) -> Result<()> {
    let y = panel.outcomes();
    let mut rows = Vec::with_capacity(y.len());
    for i in 0..panel.n_units() {
        for t in 0..y.ncols() {
            rows.push(PanelRow { unit: panel.label(i), time: t, outcome: y[(i, t)] });
        }
    }
    write_rows(path, &rows)
}

#[derive(Debug, Clone, Deserialize)]
struct MonthlyRow {
    unit: String,
    year: i64,
    month: u32,
    value: f64,
}

/// Averages `(unit, year, month, value)` rows to `(unit, time, outcome)` with
/// `time = year`. Years with fewer than `min_months` observations are an error.
pub fn aggregate_monthly(input: &Path, output: &Path, min_months: usize) -> Result<usize> {
    let rows: Vec<MonthlyRow> = read_rows(input)?;
    let mut acc: BTreeMap<(String, i64), (f64, BTreeSet<u32>)> = BTreeMap::new();
    for r in rows {
        if !(1..=12).contains(&r.month) {
            return Err(Error::InvalidPanel(format!("unit {}: month {} outside 1..12", r.unit, r.month)));
        }
        let e = acc.entry((r.unit.clone(), r.year)).or_insert((0.0, BTreeSet::new()));
        if !e.1.insert(r.month) {
            return Err(Error::InvalidPanel(format!("duplicate month {} for unit {} in {}", r.month, r.unit, r.year)));
        }
        e.0 += r.value;
    }
    let mut out = Vec::with_capacity(acc.len());
    for ((unit, year), (sum, months)) in acc {
        if months.len() < min_months {
            return Err(Error::InvalidPanel(format!("unit {unit}, year {year}: only {} months", months.len())));
        }
        out.push(AnnualRow { unit, time: year, outcome: sum / months.len() as f64 });
    }
    write_rows(output, &out)?;
    Ok(out.len())
}

#[derive(Debug, Clone, Serialize)]
struct AnnualRow {
    unit: String,
    time: i64,
    #[serde(serialize_with = "ser17")]
    outcome: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
