//! From individual-level panel records `Y_ijt = X_ijt'β + α_jt + ε_ijt` to a
//! normal means problem: the within estimator of `β`, the residual variance,
//! cell-level least squares effects and their sampling covariances.

use crate::linalg::solve_psd;
use crate::model::{NormalMeansProblem, Unit};
use crate::scalar::Real;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord<T: Real> {
    pub unit: String,
    /// 1-based period.
    pub period: usize,
    pub individual: String,
    pub outcome: T,
    pub x: Vec<T>,
}

/// Long-format panel with `T` periods and `p` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset<T: Real> {
    pub records: Vec<PanelRecord<T>>,
    pub periods: usize,
    pub covariates: usize,
}

/// The records of one `(unit, period)` cell, in summary form.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell<T: Real> {
    /// Index into [`PanelDataset::unit_ids`].
    pub unit: usize,
    /// 0-based period.
    pub period: usize,
    pub records: Vec<usize>,
    pub y_mean: T,
    pub x_mean: DVector<T>,
}

impl<T: Real> PanelDataset<T> {
    /// Checks period range, covariate width and uniqueness of
    /// `(unit, period, individual)`.
    pub fn new(periods: usize, covariates: usize, records: Vec<PanelRecord<T>>) -> Result<Self> {
        if periods == 0 {
            return Err(Error::InvalidArgument("panel needs at least one period".into()));
        }
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.period == 0 || r.period > periods {
                return Err(Error::InvalidArgument(format!(
                    "record {}: period {} outside 1..={periods}",
                    i + 1,
                    r.period
                )));
            }
            if r.x.len() != covariates {
                return Err(Error::InvalidArgument(format!(
                    "record {}: {} covariates, expected {covariates}",
                    i + 1,
                    r.x.len()
                )));
            }
            if !r.outcome.finite() || r.x.iter().any(|v| !v.finite()) {
                return Err(Error::InvalidArgument(format!("record {}: non-finite value", i + 1)));
            }
            if !seen.insert((r.unit.as_str(), r.period, r.individual.as_str())) {
                return Err(Error::InvalidArgument(format!(
                    "record {}: duplicate (unit, period, individual) = ({}, {}, {})",
                    i + 1,
                    r.unit,
                    r.period,
                    r.individual
                )));
            }
        }
        Ok(Self { records, periods, covariates })
    }

    /// Unit identifiers in order of first appearance.
    pub fn unit_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records.iter().filter(|r| seen.insert(r.unit.as_str())).map(|r| r.unit.clone()).collect()
    }

    /// Non-empty cells, ordered by unit (first appearance) then period.
    pub fn cells(&self) -> Vec<Cell<T>> {
        let ids = self.unit_ids();
        let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut groups: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry((index[r.unit.as_str()], r.period - 1)).or_default().push(i);
        }
        let mut keys: Vec<(usize, usize)> = groups.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter()
            .map(|key| {
                let recs = groups.remove(&key).expect("key from map");
                let n = T::of_usize(recs.len());
                let mut y = T::zero();
                let mut x = DVector::zeros(self.covariates);
                for &i in &recs {
                    y += self.records[i].outcome;
                    for (k, &v) in self.records[i].x.iter().enumerate() {
                        x[k] += v;
                    }
                }
                Cell { unit: key.0, period: key.1, records: recs, y_mean: y / n, x_mean: x / n }
            })
            .collect()
    }
}

/// Within (cell-demeaned) OLS estimate of `β`.
pub fn within_beta<T: Real>(panel: &PanelDataset<T>) -> Result<DVector<T>> {
    within_beta_cells(panel, &panel.cells())
}

fn within_beta_cells<T: Real>(panel: &PanelDataset<T>, cells: &[Cell<T>]) -> Result<DVector<T>> {
    let p = panel.covariates;
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for c in cells {
        for &i in &c.records {
            let r = &panel.records[i];
            let xd = DVector::from_fn(p, |k, _| r.x[k] - c.x_mean[k]);
            gram += &xd * xd.transpose();
            rhs += &xd * (r.outcome - c.y_mean);
        }
    }
    let (beta, singular) = solve_psd(&gram, &rhs);
    if singular {
        let eig = nalgebra::SymmetricEigen::new(gram.clone());
        let top = eig.eigenvalues.iter().fold(T::zero(), |m, e| m.max(e.abs()));
        let dirs: Vec<String> = (0..p)
            .filter(|&i| eig.eigenvalues[i].abs() <= top * T::of(1e-10))
            .map(|i| format!("{:.3}", eig.eigenvectors.column(i).transpose()))
            .collect();
        return Err(Error::SingularGram(format!(
            "demeaned covariates have no within-cell variation along {}",
            if dirs.is_empty() { "an ill-conditioned direction".to_string() } else { dirs.join(", ") }
        )));
    }
    Ok(beta)
}

/// Degrees of freedom `Σ_{jt} (n_jt − 1) − p`.
pub fn degrees_of_freedom<T: Real>(panel: &PanelDataset<T>) -> i64 {
    let cells = panel.cells().len() as i64;
    panel.records.len() as i64 - cells - panel.covariates as i64
}

/// Sum of squared within residuals over the degrees of freedom.
pub fn residual_variance<T: Real>(panel: &PanelDataset<T>, beta: &DVector<T>) -> Result<T> {
    residual_variance_cells(panel, &panel.cells(), beta)
}

fn residual_variance_cells<T: Real>(panel: &PanelDataset<T>, cells: &[Cell<T>], beta: &DVector<T>) -> Result<T> {
    check_beta(panel, beta)?;
    let dof = panel.records.len() as i64 - cells.len() as i64 - panel.covariates as i64;
    if dof <= 0 {
        return Err(Error::Precondition(format!("residual degrees of freedom are {dof}; need more than one record per cell")));
    }
    let mut ssr = T::zero();
    for c in cells {
        for &i in &c.records {
            let r = &panel.records[i];
            let mut e = r.outcome - c.y_mean;
            for k in 0..panel.covariates {
                e -= (r.x[k] - c.x_mean[k]) * beta[k];
            }
            ssr += e * e;
        }
    }
    Ok(ssr / T::of(dof as f64))
}

fn check_beta<T: Real>(panel: &PanelDataset<T>, beta: &DVector<T>) -> Result<()> {
    if beta.len() != panel.covariates {
        return Err(Error::Dimension(format!("beta has length {}, expected p = {}", beta.len(), panel.covariates)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellEffect<T: Real> {
    pub unit: String,
    /// 0-based period.
    pub period: usize,
    pub alpha: T,
    pub n: usize,
}

/// `α̂_jt = Ȳ_jt − X̄_jt'β̂` for every non-empty cell.
pub fn cell_effects<T: Real>(panel: &PanelDataset<T>, beta: &DVector<T>) -> Result<Vec<CellEffect<T>>> {
    check_beta(panel, beta)?;
    let ids = panel.unit_ids();
    Ok(effects_from_cells(&panel.cells(), &ids, beta))
}

fn effects_from_cells<T: Real>(cells: &[Cell<T>], ids: &[String], beta: &DVector<T>) -> Vec<CellEffect<T>> {
    cells
        .iter()
        .map(|c| CellEffect {
            unit: ids[c.unit].clone(),
            period: c.period,
            alpha: c.y_mean - c.x_mean.dot(beta),
            n: c.records.len(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelFit<T: Real> {
    pub beta_hat: DVector<T>,
    pub sigma2_hat: T,
    /// Cells ordered by unit (first appearance) then period.
    pub alpha_hat: Vec<CellEffect<T>>,
    pub unit_ids: Vec<String>,
    pub periods: usize,
    pub dof: i64,
}

pub fn fit_panel<T: Real>(panel: &PanelDataset<T>) -> Result<PanelFit<T>> {
    let cells = panel.cells();
    if cells.is_empty() {
        return Err(Error::InvalidArgument("panel has no records".into()));
    }
    let beta = within_beta_cells(panel, &cells)?;
    let sigma2 = residual_variance_cells(panel, &cells, &beta)?;
    let ids = panel.unit_ids();
    let dof = panel.records.len() as i64 - cells.len() as i64 - panel.covariates as i64;
    Ok(PanelFit {
        alpha_hat: effects_from_cells(&cells, &ids, &beta),
        beta_hat: beta,
        sigma2_hat: sigma2,
        unit_ids: ids,
        periods: panel.periods,
        dof,
    })
}

/// Units with `y_j` the observed `α̂_jt` and `Σ_j = σ̂² diag(1/n_jt)`.
///
/// With `demean_periods` each period's effects are centered on their mean
/// over the units observing that period.
pub fn to_normal_means<T: Real>(fit: &PanelFit<T>, demean_periods: bool) -> Result<NormalMeansProblem<T>> {
    if !(fit.sigma2_hat > T::zero()) {
        return Err(Error::Precondition("residual variance is zero; sampling covariances would be singular".into()));
    }
    let t = fit.periods;
    let mut means = DVector::<T>::zeros(t);
    if demean_periods {
        let mut counts = vec![0usize; t];
        for c in &fit.alpha_hat {
            means[c.period] += c.alpha;
            counts[c.period] += 1;
        }
        for (p, &n) in counts.iter().enumerate() {
            if n > 0 {
                means[p] /= T::of_usize(n);
            }
        }
    }
    let mut per_unit: Vec<Vec<&CellEffect<T>>> = vec![Vec::new(); fit.unit_ids.len()];
    let index: HashMap<&str, usize> = fit.unit_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    for c in &fit.alpha_hat {
        per_unit[index[c.unit.as_str()]].push(c);
    }
    let units = fit
        .unit_ids
        .iter()
        .zip(per_unit)
        .map(|(id, cells)| {
            let mut mask = vec![false; t];
            for c in &cells {
                mask[c.period] = true;
            }
            let y = DVector::from_iterator(cells.len(), cells.iter().map(|c| c.alpha - means[c.period]));
            let d = DVector::from_iterator(cells.len(), cells.iter().map(|c| fit.sigma2_hat / T::of_usize(c.n)));
            Unit::with_mask(id.clone(), y, DMatrix::from_diagonal(&d), mask)
        })
        .collect();
    Ok(NormalMeansProblem::new(t, 0, units))
}

/// Time-invariant effect `α̂_{j0} = (1/n_j) Σ_t n_jt α̂_jt` per unit.
pub fn aggregate_effects<T: Real>(fit: &PanelFit<T>) -> Vec<(String, T)> {
    let index: HashMap<&str, usize> = fit.unit_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut sums = vec![(T::zero(), 0usize); fit.unit_ids.len()];
    for c in &fit.alpha_hat {
        let s = &mut sums[index[c.unit.as_str()]];
        s.0 += T::of_usize(c.n) * c.alpha;
        s.1 += c.n;
    }
    fit.unit_ids.iter().zip(sums).map(|(id, (s, n))| (id.clone(), s / T::of_usize(n))).collect()
}

/// Split of the variation of `α̂_jt` into a within-unit (over time) and a
/// between-unit part. Cells are weighted equally, so on balanced panels the
/// parts are `(1/J) Σ_j (1/T) Σ_t (α̂_jt − ᾱ_j)²` and `(1/J) Σ_j (ᾱ_j − ᾱ)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition<T: Real> {
    pub total: T,
    pub within: T,
    pub between: T,
}

impl<T: Real> VarianceDecomposition<T> {
    pub fn within_share(&self) -> T {
        self.within / self.total
    }
}

pub fn variance_decomposition<T: Real>(fit: &PanelFit<T>) -> VarianceDecomposition<T> {
    let index: HashMap<&str, usize> = fit.unit_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = T::of_usize(fit.alpha_hat.len().max(1));
    let grand = fit.alpha_hat.iter().fold(T::zero(), |s, c| s + c.alpha) / n;
    let mut sums = vec![(T::zero(), 0usize); fit.unit_ids.len()];
    for c in &fit.alpha_hat {
        let s = &mut sums[index[c.unit.as_str()]];
        s.0 += c.alpha;
        s.1 += 1;
    }
    let unit_mean: Vec<T> = sums.iter().map(|&(s, k)| s / T::of_usize(k.max(1))).collect();
    let mut total = T::zero();
    let mut within = T::zero();
    for c in &fit.alpha_hat {
        let m = unit_mean[index[c.unit.as_str()]];
        total += (c.alpha - grand) * (c.alpha - grand);
        within += (c.alpha - m) * (c.alpha - m);
    }
    let between = sums
        .iter()
        .zip(&unit_mean)
        .fold(T::zero(), |s, (&(_, k), &m)| s + T::of_usize(k) * (m - grand) * (m - grand));
    VarianceDecomposition { total: total / n, within: within / n, between: between / n }
}
