//! Hyperparameter search: quasi-Newton over unconstrained `Λ` parameters,
//! a box-constrained QP for profiling the center and a ball-constrained QP for
//! profiling the covariate coefficient.

use crate::constraints::{params_from_lambda, GammaBall, MuBox};
use crate::linalg::{solve_psd, symmetrize};
use crate::model::{LambdaStructure, NormalMeansProblem};
use crate::scalar::Real;
use crate::shrinkage::{eval_all, Prepared, RiskScaling, WeightSpec};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Convergence threshold on the max-abs gradient.
    pub gradient_tol: f64,
    pub max_iters: usize,
    /// Number of quasi-Newton runs from distinct starting points.
    pub restarts: usize,
    /// Relative central-difference step, `h_i = fd_step (1 + |x_i|)`.
    pub fd_step: f64,
    pub seed: u64,
    /// Run restarts sequentially.
    pub deterministic: bool,
    /// Use closed-form gradients when the objective provides them.
    pub analytic_gradient: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-7,
            max_iters: 500,
            restarts: 4,
            fd_step: 1e-6,
            seed: 0,
            deterministic: false,
            analytic_gradient: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tol > 0.0 && self.fd_step > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidArgument("optimizer tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// A smooth function of the `Λ` parameters.
pub trait LambdaObjective<T: Real>: Sync {
    fn value(&self, params: &DVector<T>) -> T;

    /// Value and exact gradient, when available.
    fn value_and_gradient(&self, _params: &DVector<T>) -> Option<(T, DVector<T>)> {
        None
    }
}

impl<T: Real, F> LambdaObjective<T> for F
where
    F: Fn(&DVector<T>) -> T + Sync,
{
    fn value(&self, params: &DVector<T>) -> T {
        self(params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum<T: Real> {
    pub params: DVector<T>,
    pub value: T,
    /// Iterations of the winning run.
    pub iterations: usize,
    /// Runs that started from a finite point.
    pub restarts: usize,
    pub converged: bool,
    pub gradient_norm: T,
    pub evaluations: usize,
}

/// Central finite-difference gradient with step `fd_step (1 + |x_i|)`.
pub fn fd_gradient<T: Real, O: LambdaObjective<T> + ?Sized>(objective: &O, x: &DVector<T>, fd_step: f64) -> DVector<T> {
    let floor = 10.0 * T::epsilon().as_f64().sqrt();
    let step = T::of(fd_step.max(floor));
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let h = step * (T::one() + x[i].abs());
        probe[i] = x[i] + h;
        let up = objective.value(&probe);
        probe[i] = x[i] - h;
        let down = objective.value(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (h + h);
    }
    g
}

struct Evaluator<'a, T: Real, O: ?Sized> {
    objective: &'a O,
    config: &'a OptimizerConfig,
    count: usize,
    _t: std::marker::PhantomData<T>,
}

impl<'a, T: Real, O: LambdaObjective<T> + ?Sized> Evaluator<'a, T, O> {
    fn eval(&mut self, x: &DVector<T>) -> (T, Option<DVector<T>>) {
        if self.config.analytic_gradient {
            if let Some((f, g)) = self.objective.value_and_gradient(x) {
                self.count += 1;
                return (f, Some(g).filter(|g| g.iter().all(|v| v.finite())));
            }
        }
        let f = self.objective.value(x);
        self.count += 1;
        if !f.finite() {
            return (f, None);
        }
        self.count += 2 * x.len();
        (f, Some(fd_gradient(self.objective, x, self.config.fd_step)))
    }
}

struct Run<T: Real> {
    x: DVector<T>,
    f: T,
    gnorm: T,
    iterations: usize,
    converged: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

struct LinePoint<T: Real> {
    alpha: T,
    x: DVector<T>,
    f: T,
    g: DVector<T>,
}

/// Strong-Wolfe line search (bracketing then zoom by safeguarded
/// interpolation). Returns `None` when no decrease was found.
fn line_search<T: Real, O: LambdaObjective<T> + ?Sized>(
    ev: &mut Evaluator<'_, T, O>,
    x: &DVector<T>,
    f0: T,
    g0: &DVector<T>,
    d: &DVector<T>,
    alpha0: T,
) -> Option<LinePoint<T>> {
    let dphi0 = g0.dot(d);
    let c1 = T::of(C1);
    let c2 = T::of(C2);
    let mut probe = |ev: &mut Evaluator<'_, T, O>, a: T| -> Option<LinePoint<T>> {
        let xa = x + d * a;
        let (f, g) = ev.eval(&xa);
        if !f.finite() {
            return None;
        }
        g.map(|g| LinePoint { alpha: a, x: xa, f, g })
    };
    let mut prev = LinePoint { alpha: T::zero(), x: x.clone(), f: f0, g: g0.clone() };
    let mut alpha = alpha0;
    let mut best: Option<LinePoint<T>> = None;
    let keep_best = |p: &LinePoint<T>, best: &mut Option<LinePoint<T>>| {
        if p.f < f0 && best.as_ref().map_or(true, |b| p.f < b.f) {
            *best = Some(LinePoint { alpha: p.alpha, x: p.x.clone(), f: p.f, g: p.g.clone() });
        }
    };
    for i in 0..40 {
        let cur = match probe(ev, alpha) {
            Some(p) => p,
            None => {
                // Non-finite objective: treat as too long a step.
                alpha = (prev.alpha + alpha) * T::of(0.5);
                if alpha <= T::epsilon() * T::of(1e-4) {
                    break;
                }
                continue;
            }
        };
        keep_best(&cur, &mut best);
        if cur.f > f0 + c1 * cur.alpha * dphi0 || (i > 0 && cur.f >= prev.f) {
            return zoom(ev, &mut probe, prev, cur, f0, dphi0, d).or(best);
        }
        let dphi = cur.g.dot(d);
        if dphi.abs() <= -c2 * dphi0 {
            return Some(cur);
        }
        if dphi >= T::zero() {
            return zoom(ev, &mut probe, cur, prev, f0, dphi0, d).or(best);
        }
        prev = cur;
        alpha = alpha * T::of(2.0);
    }
    best
}

fn zoom<T: Real, O: LambdaObjective<T> + ?Sized>(
    ev: &mut Evaluator<'_, T, O>,
    probe: &mut impl FnMut(&mut Evaluator<'_, T, O>, T) -> Option<LinePoint<T>>,
    mut lo: LinePoint<T>,
    mut hi: LinePoint<T>,
    f0: T,
    dphi0: T,
    d: &DVector<T>,
) -> Option<LinePoint<T>> {
    let c1 = T::of(C1);
    let c2 = T::of(C2);
    for _ in 0..40 {
        let (a, b) = (lo.alpha, hi.alpha);
        let width = (b - a).abs();
        if width <= T::epsilon() * (T::one() + a.abs()) {
            break;
        }
        // Quadratic interpolation from (a, f_lo, f'_lo) and (b, f_hi).
        let dlo = lo.g.dot(d);
        let denom = T::of(2.0) * (hi.f - lo.f - dlo * (b - a));
        let mut trial = if denom > T::zero() { a - dlo * (b - a) * (b - a) / denom } else { (a + b) * T::of(0.5) };
        let (left, right) = if a < b { (a, b) } else { (b, a) };
        let margin = T::of(0.1) * width;
        if !trial.finite() || trial < left + margin || trial > right - margin {
            trial = (a + b) * T::of(0.5);
        }
        let cur = match probe(ev, trial) {
            Some(p) => p,
            None => {
                hi = LinePoint { alpha: trial, x: hi.x, f: T::infinity(), g: hi.g };
                continue;
            }
        };
        if cur.f > f0 + c1 * trial * dphi0 || cur.f >= lo.f {
            hi = cur;
        } else {
            let dphi = cur.g.dot(d);
            if dphi.abs() <= -c2 * dphi0 {
                return Some(cur);
            }
            if dphi * (hi.alpha - lo.alpha) >= T::zero() {
                hi = lo;
            }
            lo = cur;
        }
    }
    if lo.alpha > T::zero() && lo.f < f0 {
        Some(lo)
    } else {
        None
    }
}

fn bfgs<T: Real, O: LambdaObjective<T> + ?Sized>(objective: &O, x0: &DVector<T>, config: &OptimizerConfig) -> (Option<Run<T>>, usize) {
    let mut ev = Evaluator { objective, config, count: 0, _t: std::marker::PhantomData };
    let n = x0.len();
    let (f0, g0) = ev.eval(x0);
    let g0 = match g0 {
        Some(g) if f0.finite() => g,
        _ => return (None, ev.count),
    };
    let tol = T::of(config.gradient_tol);
    let mut x = x0.clone();
    let mut f = f0;
    let mut g = g0;
    let mut h = DMatrix::<T>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;
    if n == 0 {
        return (Some(Run { x, f, gnorm: T::zero(), iterations: 0, converged: true }), ev.count);
    }
    while iterations < config.max_iters {
        if g.amax() <= tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut d = -(&h * &g);
        if g.dot(&d) >= T::zero() {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = -g.clone();
        }
        let alpha0 = if fresh { (T::one() / g.amax()).min(T::one()) } else { T::one() };
        let step = match line_search(&mut ev, &x, f, &g, &d, alpha0) {
            Some(p) => p,
            None if !fresh => {
                h = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            None => break,
        };
        let s = &step.x - &x;
        let yv = &step.g - &g;
        let sy = s.dot(&yv);
        let small_change = (f - step.f).abs() <= T::epsilon() * T::of(4.0) * (T::one() + f.abs())
            && s.amax() <= T::epsilon().sqrt() * (T::one() + x.amax());
        if sy > T::epsilon() * s.norm() * yv.norm() {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / yv.dot(&yv));
            }
            let rho = T::one() / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H − ρ(H y s' + s y'H) + (ρ² y'Hy + ρ) s s'
            let shy = &s * hy.transpose();
            h = &h - (&shy + shy.transpose()) * rho + &s * s.transpose() * (rho * rho * yhy + rho);
            h = symmetrize(&h);
            fresh = false;
        }
        x = step.x;
        f = step.f;
        g = step.g;
        if small_change {
            converged = g.amax() <= tol;
            break;
        }
    }
    if !converged && g.amax() <= tol {
        converged = true;
    }
    (Some(Run { gnorm: g.amax(), x, f, iterations, converged }), ev.count)
}

/// Best of the quasi-Newton runs started at `starts`.
///
/// Runs whose start is non-finite are skipped; if all are skipped this is an
/// error. Ties in the objective go to the smaller parameter norm.
pub fn minimize_from<T: Real, O: LambdaObjective<T> + ?Sized>(
    objective: &O,
    starts: &[DVector<T>],
    config: &OptimizerConfig,
) -> Result<Minimum<T>> {
    config.validate()?;
    let runs: Vec<(Option<Run<T>>, usize)> = if config.deterministic || starts.len() < 2 {
        starts.iter().map(|s| bfgs(objective, s, config)).collect()
    } else {
        starts.par_iter().map(|s| bfgs(objective, s, config)).collect()
    };
    let evaluations = runs.iter().map(|(_, c)| *c).sum();
    let finished: Vec<Run<T>> = runs.into_iter().filter_map(|(r, _)| r).collect();
    let restarts = finished.len();
    let best = finished
        .into_iter()
        .reduce(|a, b| {
            if b.f < a.f || (b.f == a.f && b.x.norm() < a.x.norm()) {
                b
            } else {
                a
            }
        })
        .ok_or_else(|| Error::Optimizer("objective is not finite at any starting point".into()))?;
    Ok(Minimum {
        params: best.x,
        value: best.f,
        iterations: best.iterations,
        restarts,
        converged: best.converged,
        gradient_norm: best.gnorm,
        evaluations,
    })
}

/// Minimizes over the parameters of `structure`, starting from `init` (a PSD
/// matrix mapped into the structure), its 0.1x and 10x scalings and seeded
/// random PSD draws, `config.restarts` starts in total.
pub fn minimize_lambda<T: Real, O: LambdaObjective<T> + ?Sized>(
    objective: &O,
    structure: &LambdaStructure,
    init: &DMatrix<T>,
    config: &OptimizerConfig,
) -> Result<Minimum<T>> {
    let starts = start_points(structure, init, config);
    minimize_from(objective, &starts, config)
}

pub fn start_points<T: Real>(structure: &LambdaStructure, init: &DMatrix<T>, config: &OptimizerConfig) -> Vec<DVector<T>> {
    let count = config.restarts.max(1);
    let t = structure.periods;
    let mut out = Vec::with_capacity(count);
    for c in [1.0, 0.1, 10.0] {
        if out.len() < count {
            out.push(params_from_lambda(structure, &(init * T::of(c))));
        }
    }
    let scale = (init.trace() / T::of_usize(t.max(1))).max(T::epsilon());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    while out.len() < count {
        let g = DMatrix::<T>::from_fn(t, t, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z)
        });
        let draw = &g * g.transpose() * (scale / T::of_usize(t.max(1)));
        out.push(params_from_lambda(structure, &draw));
    }
    out
}

/// Solution of a constrained quadratic in the center.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSolution<T: Real> {
    pub value: DVector<T>,
    /// Indices pinned at a bound (box) or all indices when on the ball surface.
    pub active: Vec<usize>,
    /// Hessian was singular and a minimum-norm solution was used.
    pub singular: bool,
}

/// `argmin ½x'Hx − b'x` subject to `lower ≤ x ≤ upper` by a primal active-set
/// method. Returns the unconstrained minimizer whenever it is feasible.
pub fn solve_box_qp<T: Real>(h: &DMatrix<T>, b: &DVector<T>, lower: &DVector<T>, upper: &DVector<T>) -> CenterSolution<T> {
    let n = b.len();
    let (x0, singular0) = solve_psd(h, b);
    let inside = |x: &DVector<T>| (0..n).all(|i| x[i] >= lower[i] && x[i] <= upper[i]);
    if inside(&x0) {
        return CenterSolution { value: x0, active: Vec::new(), singular: singular0 };
    }
    let mut singular = singular0;
    let mut x = DVector::from_fn(n, |i, _| x0[i].max(lower[i]).min(upper[i]));
    let mut working: Vec<usize> = (0..n).filter(|&i| x[i] == lower[i] || x[i] == upper[i]).collect();
    let scale = h.diagonal().iter().fold(T::zero(), |m, &v| m.max(v.abs())) * (T::one() + x.amax())
        + b.amax();
    let tol = scale * T::epsilon() * T::of(1e3);
    for _ in 0..(50 * n + 100) {
        let free: Vec<usize> = (0..n).filter(|i| !working.contains(i)).collect();
        let mut p = DVector::zeros(n);
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, c| h[(free[a], free[c])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                let i = free[a];
                let mut r = b[i];
                for &k in &working {
                    r -= h[(i, k)] * x[k];
                }
                r
            });
            let (xf, sing) = solve_psd(&hff, &rhs);
            singular |= sing;
            for (a, &i) in free.iter().enumerate() {
                p[i] = xf[a] - x[i];
            }
        }
        if p.amax() <= T::epsilon() * T::of(16.0) * (T::one() + x.amax()) {
            let g = h * &x - b;
            let mut worst: Option<(usize, T)> = None;
            for (w, &i) in working.iter().enumerate() {
                let mult = if x[i] == lower[i] { g[i] } else { -g[i] };
                if mult < -tol && worst.map_or(true, |(_, m)| mult < m) {
                    worst = Some((w, mult));
                }
            }
            match worst {
                None => break,
                Some((w, _)) => {
                    working.remove(w);
                }
            }
        } else {
            let mut alpha = T::one();
            let mut block = None;
            for i in 0..n {
                if working.contains(&i) {
                    continue;
                }
                let a = if p[i] < T::zero() {
                    (lower[i] - x[i]) / p[i]
                } else if p[i] > T::zero() {
                    (upper[i] - x[i]) / p[i]
                } else {
                    continue;
                };
                if a < alpha {
                    alpha = a.max(T::zero());
                    block = Some(i);
                }
            }
            x += &p * alpha;
            if let Some(i) = block {
                x[i] = if p[i] < T::zero() { lower[i] } else { upper[i] };
                working.push(i);
            }
            for i in 0..n {
                x[i] = x[i].max(lower[i]).min(upper[i]);
            }
        }
    }
    working.sort_unstable();
    CenterSolution { value: x, active: working, singular }
}

/// `argmin ½x'Hx − b'x` subject to `‖x‖ ≤ radius`. When the unconstrained
/// minimizer lies outside the ball the multiplier `ν` solving
/// `‖(H + νI)⁻¹b‖ = radius` is found by bisection.
pub fn solve_ball_qp<T: Real>(h: &DMatrix<T>, b: &DVector<T>, radius: T) -> CenterSolution<T> {
    let n = b.len();
    if !(radius > T::zero()) {
        return CenterSolution { value: DVector::zeros(n), active: (0..n).collect(), singular: false };
    }
    let (x0, singular) = solve_psd(h, b);
    if x0.norm() <= radius {
        return CenterSolution { value: x0, active: Vec::new(), singular };
    }
    let eig = SymmetricEigen::new(symmetrize(h));
    let d = eig.eigenvalues.map(|e| e.max(T::zero()));
    let c = eig.eigenvectors.transpose() * b;
    let norm_at = |nu: T| -> T {
        let mut s = T::zero();
        for i in 0..n {
            let den = d[i] + nu;
            if den > T::zero() {
                s += (c[i] / den) * (c[i] / den);
            } else if c[i] != T::zero() {
                return T::infinity();
            }
        }
        s.sqrt()
    };
    let mut lo = T::zero();
    let mut hi = c.norm() / radius;
    for _ in 0..300 {
        let mid = (lo + hi) * T::of(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_at(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = hi;
    let coef = DVector::from_fn(n, |i, _| if d[i] + nu > T::zero() { c[i] / (d[i] + nu) } else { T::zero() });
    let mut x = &eig.eigenvectors * coef;
    let nx = x.norm();
    if nx > T::zero() {
        x *= radius / nx;
    }
    CenterSolution { value: x, active: (0..n).collect(), singular }
}

/// Accumulates `H = Σ s_j O_j'M_jO_j` and `b = Σ s_j O_j'M_j t_j`.
pub(crate) fn assemble_mu<T: Real>(prep: &Prepared<T>, mats: &[&DMatrix<T>], targets: &[DVector<T>]) -> (DMatrix<T>, DVector<T>) {
    let t = prep.periods;
    let mut h = DMatrix::zeros(t, t);
    let mut b = DVector::zeros(t);
    for ((pu, m), tgt) in prep.units.iter().zip(mats).zip(targets) {
        let mt = *m * tgt;
        if pu.complete {
            h += *m * pu.scale;
            b += mt * pu.scale;
        } else {
            crate::linalg::scatter_add(&mut h, &pu.idx, m, pu.scale);
            for (a, &i) in pu.idx.iter().enumerate() {
                b[i] += pu.scale * mt[a];
            }
        }
    }
    (h, b)
}

/// Accumulates `H = Σ s_j Z_j'M_jZ_j` and `b = Σ s_j Z_j'M_j t_j`.
pub(crate) fn assemble_gamma<T: Real>(
    prep: &Prepared<T>,
    mats: &[&DMatrix<T>],
    targets: &[DVector<T>],
    designs: &[&DMatrix<T>],
    k: usize,
) -> (DMatrix<T>, DVector<T>) {
    let mut h = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for (((pu, m), tgt), z) in prep.units.iter().zip(mats).zip(targets).zip(designs) {
        let mz = *m * *z;
        h += z.transpose() * &mz * pu.scale;
        b += mz.transpose() * tgt * pu.scale;
    }
    (symmetrize(&h), b)
}

/// The center in the box minimizing the risk estimate at fixed `Λ`.
pub fn profile_mu<T: Real>(
    problem: &NormalMeansProblem<T>,
    lambda: &DMatrix<T>,
    mu_box: &MuBox<T>,
    weight: &WeightSpec<T>,
) -> Result<CenterSolution<T>> {
    problem.ensure_valid()?;
    let prep = Prepared::new(problem, weight, RiskScaling::Auto)?;
    let evals = eval_all(&prep, lambda)?;
    let targets: Vec<DVector<T>> = prep.units.iter().map(|u| u.y.clone()).collect();
    let mats: Vec<&DMatrix<T>> = evals.iter().map(|e| &e.m).collect();
    let (h, b) = assemble_mu(&prep, &mats, &targets);
    Ok(solve_box_qp(&h, &b, &mu_box.lower, &mu_box.upper))
}

/// The covariate coefficient in the ball minimizing the risk estimate at fixed `Λ`.
pub fn profile_gamma<T: Real>(
    problem: &NormalMeansProblem<T>,
    lambda: &DMatrix<T>,
    ball: &GammaBall<T>,
    weight: &WeightSpec<T>,
) -> Result<CenterSolution<T>> {
    problem.ensure_valid()?;
    if problem.covariates == 0 {
        return Err(Error::Precondition("profile_gamma requires k > 0".into()));
    }
    let prep = Prepared::new(problem, weight, RiskScaling::Auto)?;
    let evals = eval_all(&prep, lambda)?;
    let targets: Vec<DVector<T>> = prep.units.iter().map(|u| u.y.clone()).collect();
    let designs: Vec<&DMatrix<T>> = problem.units.iter().map(|u| u.z.as_ref().expect("validated")).collect();
    let mats: Vec<&DMatrix<T>> = evals.iter().map(|e| &e.m).collect();
    let (h, b) = assemble_gamma(&prep, &mats, &targets, &designs, problem.covariates);
    Ok(solve_ball_qp(&h, &b, ball.radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn quadratic_bowl_converges() {
        let f = |x: &DVector<f64>| x.dot(x);
        let cfg = OptimizerConfig { restarts: 1, ..Default::default() };
        let m = minimize_from(&f, &[dvector![1.0, -2.0, 0.5]], &cfg).unwrap();
        assert!(m.converged);
        assert!(m.value < 1e-12);
    }

    #[test]
    fn rosenbrock_with_fd_gradient() {
        let f = |x: &DVector<f64>| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let cfg = OptimizerConfig { max_iters: 2000, ..Default::default() };
        let m = minimize_from(&f, &[dvector![-1.2, 1.0]], &cfg).unwrap();
        assert!((m.params[0] - 1.0).abs() < 1e-5, "{:?}", m);
    }

    #[test]
    fn all_nonfinite_starts_is_an_error() {
        let f = |_: &DVector<f64>| f64::NAN;
        assert!(minimize_from(&f, &[dvector![1.0]], &OptimizerConfig::default()).is_err());
    }

    #[test]
    fn nonfinite_start_is_skipped() {
        let f = |x: &DVector<f64>| if x[0] > 5.0 { f64::INFINITY } else { (x[0] - 1.0).powi(2) };
        let m = minimize_from(&f, &[dvector![10.0], dvector![0.0]], &OptimizerConfig::default()).unwrap();
        assert_eq!(m.restarts, 1);
        assert!((m.params[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn box_qp_interior_solution_is_unconstrained() {
        let h = dmatrix![2.0, 0.5; 0.5, 1.0];
        let b = dvector![0.3, -0.2];
        let s = solve_box_qp(&h, &b, &dvector![-10.0, -10.0], &dvector![10.0, 10.0]);
        let x = h.clone().cholesky().unwrap().solve(&b);
        assert_eq!(s.value, x);
        assert!(s.active.is_empty());
    }

    #[test]
    fn box_qp_releases_wrongly_clamped_bound() {
        // Unconstrained optimum (2, -3); clamping to the box first pins both
        // coordinates, but the second one must come off its bound.
        let h = dmatrix![1.0f64, 0.9; 0.9, 1.0];
        let x_star = dvector![2.0, -3.0];
        let b = &h * &x_star;
        let s = solve_box_qp(&h, &b, &dvector![-1.0, -1.0], &dvector![1.0, 1.0]);
        let g = &h * &s.value - &b;
        for i in 0..2 {
            let at_lo = s.value[i] == -1.0;
            let at_hi = s.value[i] == 1.0;
            assert!((at_lo && g[i] >= -1e-12) || (at_hi && g[i] <= 1e-12) || g[i].abs() < 1e-12);
        }
    }

    #[test]
    fn ball_qp_hits_radius() {
        let h = dmatrix![1.0f64, 0.0; 0.0, 4.0];
        let b = dvector![3.0, 4.0];
        let s = solve_ball_qp(&h, &b, 1.0);
        assert!((s.value.norm() - 1.0).abs() < 1e-12);
        // KKT: (H + νI)x = b with ν ≥ 0 common to both coordinates.
        let nu0 = b[0] / s.value[0] - h[(0, 0)];
        let nu1 = b[1] / s.value[1] - h[(1, 1)];
        assert!(nu0 > 0.0 && (nu0 - nu1).abs() < 1e-8);
    }

    #[test]
    fn zero_radius_ball() {
        let s = solve_ball_qp(&DMatrix::<f64>::identity(2, 2), &dvector![1.0, 1.0], 0.0);
        assert_eq!(s.value, DVector::zeros(2));
    }
}
