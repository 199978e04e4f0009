//! File formats: problem JSON, long-format panel CSV, weight CSV and the
//! result files written by the commands.
//!
//! Numbers are written as decimal strings holding the shortest representation
//! that round-trips, so output files do not depend on locale or formatter
//! settings. Readers accept either strings or JSON numbers.

use crate::CliError;
use nalgebra::{DMatrix, DVector};
use panelshrink::model::{NormalMeansProblem, Unit};
use panelshrink::panel::{PanelDataset, PanelRecord};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// A float stored as a string in JSON.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&fmt_num(self.0))
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Str(String),
            Float(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Float(v) => Ok(Num(v)),
            Raw::Str(s) => s.trim().parse::<f64>().map(Num).map_err(|_| serde::de::Error::custom(format!("not a number: `{s}`"))),
        }
    }
}

pub fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitJson {
    pub id: String,
    pub mask: Vec<bool>,
    pub y: Vec<Num>,
    pub sigma: Vec<Vec<Num>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<Vec<Num>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_true: Option<Vec<Num>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemJson {
    #[serde(rename = "T")]
    pub periods: usize,
    pub k: usize,
    pub units: Vec<UnitJson>,
}

fn vec_of(v: &DVector<f64>) -> Vec<Num> {
    v.iter().map(|&x| Num(x)).collect()
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<Num>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| Num(m[(i, j)])).collect()).collect()
}

fn matrix_from(rows: &[Vec<Num>], what: &str, unit: &str) -> Result<DMatrix<f64>, CliError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(CliError::Input(format!("unit `{unit}`: {what} rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j].0))
}

impl ProblemJson {
    pub fn from_problem(p: &NormalMeansProblem<f64>) -> Self {
        Self {
            periods: p.periods,
            k: p.covariates,
            units: p
                .units
                .iter()
                .map(|u| UnitJson {
                    id: u.id.clone(),
                    mask: u.mask.clone(),
                    y: vec_of(&u.y),
                    sigma: rows_of(&u.sigma),
                    z: u.z.as_ref().map(rows_of),
                    theta_true: u.theta_true.as_ref().map(vec_of),
                })
                .collect(),
        }
    }

    pub fn to_problem(&self) -> Result<NormalMeansProblem<f64>, CliError> {
        let mut units = Vec::with_capacity(self.units.len());
        for u in &self.units {
            if u.mask.len() != self.periods {
                return Err(CliError::Input(format!("unit `{}`: mask has length {}, expected T = {}", u.id, u.mask.len(), self.periods)));
            }
            let y = DVector::from_iterator(u.y.len(), u.y.iter().map(|n| n.0));
            let sigma = matrix_from(&u.sigma, "sigma", &u.id)?;
            if sigma.nrows() != y.len() || sigma.ncols() != y.len() {
                return Err(CliError::Input(format!("unit `{}`: sigma must be {}x{}", u.id, y.len(), y.len())));
            }
            let mut unit = Unit::with_mask(u.id.clone(), y, sigma, u.mask.clone());
            if let Some(z) = &u.z {
                unit = unit.covariates(matrix_from(z, "z", &u.id)?);
            }
            if let Some(t) = &u.theta_true {
                unit = unit.truth(DVector::from_iterator(t.len(), t.iter().map(|n| n.0)));
            }
            units.push(unit);
        }
        let problem = NormalMeansProblem::new(self.periods, self.k, units);
        let violations = problem.validate();
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(CliError::Input(format!("invalid problem:\n  {}", msg.join("\n  "))));
        }
        Ok(problem)
    }
}

pub fn read_problem(path: &Path) -> Result<NormalMeansProblem<f64>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let json: ProblemJson = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    json.to_problem()
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Output(e.to_string()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::Output(e.to_string()))
}

pub fn write_problem(path: &Path, p: &NormalMeansProblem<f64>) -> Result<(), CliError> {
    write_json(path, &ProblemJson::from_problem(p))
}

/// Reads `unit,period,individual,outcome,x1..xp`. `T` is the largest period.
pub fn read_panel(path: &Path) -> Result<PanelDataset<f64>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    read_panel_from(BufReader::new(file), &path.display().to_string())
}

pub fn read_panel_from<R: std::io::Read>(reader: R, name: &str) -> Result<PanelDataset<f64>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::Input(format!("{name}: {e}")))?.clone();
    let expected = ["unit", "period", "individual", "outcome"];
    if headers.len() < 4 || headers.iter().take(4).zip(expected).any(|(h, e)| h != e) {
        return Err(CliError::Input(format!(
            "{name}: header must start with `unit,period,individual,outcome`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let p = headers.len() - 4;
    for (i, h) in headers.iter().skip(4).enumerate() {
        if h != format!("x{}", i + 1) {
            return Err(CliError::Input(format!("{name}: covariate column {} must be named `x{}`, found `{h}`", i + 1, i + 1)));
        }
    }
    let mut records = Vec::new();
    let mut periods = 0;
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Input(format!("{name}: line {line}: {e}"))
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |what: &str, v: &str| CliError::Input(format!("{name}: line {line}: invalid {what} `{v}`"));
        let period: usize = row[1].parse().map_err(|_| bad("period", &row[1]))?;
        if period == 0 {
            return Err(bad("period (periods are 1-based)", &row[1]));
        }
        let outcome: f64 = row[3].parse().map_err(|_| bad("outcome", &row[3]))?;
        let mut x = Vec::with_capacity(p);
        for c in 0..p {
            x.push(row[4 + c].parse::<f64>().map_err(|_| bad(&format!("x{}", c + 1), &row[4 + c]))?);
        }
        if row[0].is_empty() {
            return Err(bad("unit", ""));
        }
        periods = periods.max(period);
        records.push(PanelRecord { unit: row[0].to_string(), period, individual: row[2].to_string(), outcome, x });
    }
    PanelDataset::new(periods, p, records).map_err(|e| CliError::Input(format!("{name}: {e}")))
}

/// A weight file: a `T x T` matrix gives the loss weight `W`; any other
/// `R x T` matrix is read as `Q` with `W = Q'Q`.
pub fn read_weights(path: &Path, periods: usize) -> Result<panelshrink::shrinkage::WeightSpec<f64>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(BufReader::new(file));
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let line = row.position().map_or(0, |p| p.line());
        let vals: Result<Vec<f64>, _> = row.iter().map(|v| v.parse::<f64>()).collect();
        let vals = vals.map_err(|_| CliError::Input(format!("{}: line {line}: non-numeric weight", path.display())))?;
        if vals.len() != periods {
            return Err(CliError::Input(format!("{}: line {line}: expected {periods} weights", path.display())));
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: no weights", path.display())));
    }
    let m = DMatrix::from_fn(rows.len(), periods, |i, j| rows[i][j]);
    Ok(if rows.len() == periods {
        panelshrink::shrinkage::WeightSpec::Matrix(m)
    } else {
        panelshrink::shrinkage::WeightSpec::LinearCombination(m)
    })
}

/// `unit,period,estimate` with 1-based periods.
pub fn write_estimates(path: &Path, problem: &NormalMeansProblem<f64>, estimates: &[DVector<f64>]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["unit", "period", "estimate"]).map_err(out_err)?;
    for (u, est) in problem.units.iter().zip(estimates) {
        for (a, t) in u.observed().into_iter().enumerate() {
            w.write_record([u.id.as_str(), &(t + 1).to_string(), &fmt_num(est[a])]).map_err(out_err)?;
        }
    }
    w.flush().map_err(|e| CliError::Output(e.to_string()))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

pub fn out_err(e: csv::Error) -> CliError {
    CliError::Output(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_accept_strings_and_floats() {
        let v: Vec<Num> = serde_json::from_str(r#"["1.5", 2, -0.25]"#).unwrap();
        assert_eq!(v, vec![Num(1.5), Num(2.0), Num(-0.25)]);
        assert_eq!(serde_json::to_string(&Num(0.1)).unwrap(), "\"0.1\"");
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "unit,period,individual,outcome,x1\na,1,1,0.5,1\na,1,2,oops,2\n";
        let err = read_panel_from(csv.as_bytes(), "mem").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn panel_without_covariates() {
        let csv = "unit,period,individual,outcome\na,1,1,0.5\na,1,2,1.5\n";
        let p = read_panel_from(csv.as_bytes(), "mem").unwrap();
        assert_eq!(p.covariates, 0);
        assert_eq!(p.periods, 1);
    }
}
