//! Stochastic convex decision layer.
//!
//! Given outcome samples `y_1..y_M`, [`solve_saa`] minimizes the sample
//! average `(1/M) sum_i f(y_i, z)` over the polyhedron `{Gz <= h, Az = b}`
//! with a primal-dual path-following interior-point method. The returned
//! primal-dual triple feeds [`assemble_kkt`], which factorizes the implicit
//! differentiation system
//!
//! ```text
//!     [ H        G^T        A^T ]
//! K = [ D(l) G   D(Gz - h)  0   ]      H = (1/M) sum_i  d2f/dz2 (y_i, z*)
//!     [ A        0          0   ]
//! ```
//!
//! so estimators can obtain the adjoint `u` with `u^T K = -[dF/dz; 0; 0]^T`
//! through a single transpose solve ([`adjoint_solve`]).
//!
//! Costs may be piecewise smooth. Derivative callbacks follow the convention
//! `[v]_+' = 1{v > 0}`; two extra hooks keep hinge-shaped costs solvable to
//! tight tolerances even though their optima often sit exactly on a gradient
//! kink: [`CostModel::grad_z_interval`] reports the componentwise subgradient
//! interval (stationarity is measured as the distance from zero to it), and
//! [`CostModel::grad_kinks`] reports where the gradient jumps so the line
//! search can land on those points exactly instead of creeping toward them.

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

type Lu = nalgebra::LU<f64, Dyn, Dyn>;

/// Task cost `f(y, z)` with the derivatives the KKT machinery needs.
pub trait CostModel {
    fn value(&self, y: &[f64], z: &[f64]) -> f64;

    /// Gradient in `z`, using `[v]_+' = 1{v > 0}` at kinks.
    fn grad_z(&self, y: &[f64], z: &[f64]) -> Vec<f64>;

    /// Hessian in `z` (`d x d`). Kinks of piecewise-linear terms contribute
    /// nothing.
    fn hess_zz(&self, y: &[f64], z: &[f64]) -> DMatrix<f64>;

    /// Mixed second derivative (`d x d_y`): column `j` holds
    /// `d(grad_z)/d y_j`.
    fn hess_zy(&self, y: &[f64], z: &[f64]) -> DMatrix<f64>;

    /// Componentwise lower/upper subgradient bounds in `z`. Smooth costs keep
    /// the default (both equal to the gradient); hinge costs widen the
    /// interval at kinks so stationarity can be measured exactly.
    fn grad_z_interval(&self, y: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g = self.grad_z(y, z);
        (g.clone(), g)
    }

    /// Decision-space points where the gradient for sample `y` jumps, as
    /// `(coordinate, value)` pairs. Smooth costs keep the empty default.
    fn grad_kinks(&self, y: &[f64]) -> Vec<(usize, f64)> {
        let _ = y;
        Vec::new()
    }
}

/// Polyhedral feasible set `{z : Gz <= h, Az = b}`.
#[derive(Debug, Clone)]
pub struct AffineConstraints {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineConstraints {
    pub fn new(g: DMatrix<f64>, h: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if g.nrows() != h.len() {
            return Err(Error::dim("inequality right-hand side", g.nrows(), h.len()));
        }
        if a.nrows() != b.len() {
            return Err(Error::dim("equality right-hand side", a.nrows(), b.len()));
        }
        if g.nrows() > 0 && a.nrows() > 0 && g.ncols() != a.ncols() {
            return Err(Error::dim("equality columns", g.ncols(), a.ncols()));
        }
        Ok(Self { g, h, a, b })
    }

    /// Inequalities only.
    pub fn inequalities(g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let d = g.ncols();
        Self::new(g, h, DMatrix::zeros(0, d), DVector::zeros(0))
    }

    /// Box `lower <= z <= upper`, stacked as `[-I; I] z <= [-lower; upper]`.
    pub fn bounds(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("box bounds", lower.len(), upper.len()));
        }
        let d = lower.len();
        let mut g = DMatrix::zeros(2 * d, d);
        let mut h = DVector::zeros(2 * d);
        for i in 0..d {
            g[(i, i)] = -1.0;
            h[i] = -lower[i];
            g[(d + i, i)] = 1.0;
            h[d + i] = upper[i];
        }
        Self::inequalities(g, h)
    }

    /// Unconstrained problem in `d` variables.
    pub fn unconstrained(d: usize) -> Self {
        Self {
            g: DMatrix::zeros(0, d),
            h: DVector::zeros(0),
            a: DMatrix::zeros(0, d),
            b: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        if self.g.nrows() > 0 {
            self.g.ncols()
        } else {
            self.a.ncols()
        }
    }

    pub fn n_ineq(&self) -> usize {
        self.g.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.a.nrows()
    }

    /// Largest constraint violation at `z` (0 when feasible).
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if self.n_ineq() > 0 {
            let r = &self.g * z - &self.h;
            v = v.max(r.iter().cloned().fold(f64::MIN, f64::max));
        }
        if self.n_eq() > 0 {
            let r = &self.a * z - &self.b;
            v = v.max(r.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        }
        v.max(0.0)
    }
}

/// Primal-dual solution of an SAA decision problem.
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
}

/// Residuals of the KKT conditions at a candidate solution. Stationarity is
/// the distance from zero to the componentwise subdifferential of the
/// Lagrangian, so it vanishes at kink-supported optima of hinge costs.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Options for [`solve_saa`].
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Optional strictly feasible starting point; otherwise the solver finds
    /// one itself (running a phase-1 problem if necessary).
    pub z0: Option<Vec<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 200,
            z0: None,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Averaged objective handed to the interior-point core.
trait Objective {
    fn grad(&self, z: &DVector<f64>) -> DVector<f64>;
    fn hess(&self, z: &DVector<f64>) -> DMatrix<f64>;
    /// Componentwise subgradient interval, for the stationarity measure.
    fn grad_interval(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let g = self.grad(z);
        (g.clone(), g)
    }
    /// Gradient kinks over all samples, as `(coordinate, value)` pairs.
    fn kinks(&self) -> &[(usize, f64)] {
        &[]
    }
}

struct SaaObjective<'a> {
    samples: &'a [Vec<f64>],
    cost: &'a dyn CostModel,
    kinks: Vec<(usize, f64)>,
}

impl<'a> SaaObjective<'a> {
    fn new(samples: &'a [Vec<f64>], cost: &'a dyn CostModel) -> Self {
        let mut kinks = Vec::new();
        for y in samples {
            kinks.extend(cost.grad_kinks(y));
        }
        Self {
            samples,
            cost,
            kinks,
        }
    }
}

impl Objective for SaaObjective<'_> {
    fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let m = self.samples.len() as f64;
        let mut g = DVector::zeros(z.len());
        for y in self.samples {
            let gi = self.cost.grad_z(y, z.as_slice());
            for (acc, v) in g.iter_mut().zip(gi.iter()) {
                *acc += v;
            }
        }
        g / m
    }

    fn hess(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let m = self.samples.len() as f64;
        let d = z.len();
        let mut h = DMatrix::zeros(d, d);
        for y in self.samples {
            h += self.cost.hess_zz(y, z.as_slice());
        }
        h / m
    }

    fn grad_interval(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.samples.len() as f64;
        let d = z.len();
        let (mut lo, mut hi) = (DVector::zeros(d), DVector::zeros(d));
        for y in self.samples {
            let (l, u) = self.cost.grad_z_interval(y, z.as_slice());
            for i in 0..d {
                lo[i] += l[i];
                hi[i] += u[i];
            }
        }
        (lo / m, hi / m)
    }

    fn kinks(&self) -> &[(usize, f64)] {
        &self.kinks
    }
}

/// Outcome of the interior-point core.
struct IpmResult {
    sol: KktSolution,
    res: KktResiduals,
    iterations: usize,
    converged: bool,
}

/// Minimizes the SAA average of `cost` over the samples subject to `cons`.
///
/// Preconditions: at least one sample, consistent dimensions, a nonempty
/// feasible region on which the averaged cost attains its minimum, and a
/// convex cost. Returns the primal-dual triple with all KKT residuals at or
/// below `opts.tol`; an infeasible region yields [`Error::Infeasible`] and
/// hitting the iteration limit yields [`Error::NonConvergence`] carrying the
/// best iterate and its residuals.
pub fn solve_saa(
    samples: &[Vec<f64>],
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    opts: &SolveOptions,
) -> Result<KktSolution> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "solve_saa needs at least one outcome sample".into(),
        ));
    }
    let y_dim = samples[0].len();
    if samples.iter().any(|s| s.len() != y_dim) {
        return Err(Error::InvalidArgument(
            "solve_saa samples have inconsistent dimensions".into(),
        ));
    }
    let d = cons.dim();
    if d == 0 {
        return Err(Error::InvalidArgument("decision dimension is zero".into()));
    }
    if let Some(z0) = &opts.z0 {
        if z0.len() != d {
            return Err(Error::dim("solve_saa starting point", d, z0.len()));
        }
    }

    let objective = SaaObjective::new(samples, cost);

    // Equalities that pin the decision completely leave the interior-point
    // core no strict interior to work in; solve them directly.
    if cons.n_eq() == d {
        if let Some(sol) = pinned_by_equalities(&objective, cons)? {
            return Ok(sol);
        }
    }

    let z0 = starting_point(cons, opts.z0.as_deref())?;
    let result = ipm(&objective, cons, z0, opts.tol, opts.max_iters, None);
    if result.converged {
        Ok(result.sol)
    } else {
        Err(Error::NonConvergence {
            iterations: result.iterations,
            stationarity: result.res.stationarity,
            primal: result.res.primal,
            dual: result.res.dual,
            complementarity: result.res.complementarity,
            best: Box::new((result.sol, result.res)),
        })
    }
}

/// Handles `A` square and invertible: `z` is forced, inequalities only need a
/// feasibility check, and the equality multipliers absorb the gradient.
fn pinned_by_equalities(
    obj: &SaaObjective<'_>,
    cons: &AffineConstraints,
) -> Result<Option<KktSolution>> {
    let lu = cons.a.clone().lu();
    let z = match lu.solve(&cons.b) {
        Some(z) if z.iter().all(|v| v.is_finite()) => z,
        _ => return Ok(None),
    };
    let violation = if cons.n_ineq() > 0 {
        (&cons.g * &z - &cons.h)
            .iter()
            .cloned()
            .fold(f64::MIN, f64::max)
    } else {
        0.0
    };
    let allowance = 1e-9 * (1.0 + cons.h.amax_or(0.0));
    if violation > allowance {
        return Err(Error::Infeasible { violation });
    }
    let grad = obj.grad(&z);
    let nu = match cons.a.transpose().lu().solve(&(-&grad)) {
        Some(nu) if nu.iter().all(|v| v.is_finite()) => nu,
        _ => return Ok(None),
    };
    Ok(Some(KktSolution {
        z,
        lambda: DVector::zeros(cons.n_ineq()),
        nu,
    }))
}

/// KKT residuals of a candidate primal-dual triple for the given SAA problem.
pub fn kkt_residuals(
    samples: &[Vec<f64>],
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    sol: &KktSolution,
) -> KktResiduals {
    let objective = SaaObjective::new(samples, cost);
    residuals(&objective, cons, &sol.z, &sol.lambda, &sol.nu)
}

/// Componentwise distance from zero to the shifted subgradient interval.
fn stationarity_gaps(
    obj: &dyn Objective,
    cons: &AffineConstraints,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> DVector<f64> {
    let (lo, hi) = obj.grad_interval(z);
    let mut shift = DVector::zeros(z.len());
    if cons.n_ineq() > 0 {
        shift += cons.g.transpose() * lambda;
    }
    if cons.n_eq() > 0 {
        shift += cons.a.transpose() * nu;
    }
    DVector::from_iterator(
        z.len(),
        (0..z.len()).map(|i| {
            let (l, u) = (lo[i] + shift[i], hi[i] + shift[i]);
            if l <= 0.0 && 0.0 <= u {
                0.0
            } else {
                l.abs().min(u.abs())
            }
        }),
    )
}

fn residuals(
    obj: &dyn Objective,
    cons: &AffineConstraints,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> KktResiduals {
    let stationarity = stationarity_gaps(obj, cons, z, lambda, nu).amax_or(0.0);

    let mut primal: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    if cons.n_ineq() > 0 {
        let r = &cons.g * z - &cons.h;
        for i in 0..r.len() {
            primal = primal.max(r[i]);
            complementarity = complementarity.max((lambda[i] * r[i]).abs());
        }
        primal = primal.max(0.0);
    }
    if cons.n_eq() > 0 {
        let r = &cons.a * z - &cons.b;
        primal = primal.max(r.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }
    let dual = lambda.iter().fold(0.0f64, |m, l| m.max(-l));
    KktResiduals {
        stationarity,
        primal,
        dual,
        complementarity,
    }
}

/// Line-search merit: 2-norm of the perturbed KKT residual, with the dual
/// block measured against the subgradient interval so that exact kink
/// landings register as progress.
fn merit(
    obj: &dyn Objective,
    cons: &AffineConstraints,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
    mu: f64,
) -> f64 {
    let mut total = stationarity_gaps(obj, cons, z, lambda, nu).norm_squared();
    if cons.n_ineq() > 0 {
        let s = &cons.h - &cons.g * z;
        for i in 0..s.len() {
            let rc = lambda[i] * s[i] - mu;
            total += rc * rc;
        }
    }
    if cons.n_eq() > 0 {
        total += (&cons.a * z - &cons.b).norm_squared();
    }
    total.sqrt()
}

/// Finds a strictly feasible starting point: uses the hint when it qualifies,
/// then tries cheap candidates, then solves a phase-1 problem.
fn starting_point(cons: &AffineConstraints, hint: Option<&[f64]>) -> Result<DVector<f64>> {
    let d = cons.dim();
    let margin = 1e-8 * (1.0 + cons.h.amax_or(0.0));
    let strictly_feasible = |z: &DVector<f64>| -> bool {
        if cons.n_ineq() > 0 {
            let s = &cons.h - &cons.g * z;
            if s.iter().any(|v| *v <= margin) {
                return false;
            }
        }
        if cons.n_eq() > 0 {
            let r = &cons.a * z - &cons.b;
            if r.iter().any(|v| v.abs() > margin) {
                return false;
            }
        }
        true
    };

    if let Some(h) = hint {
        let z = DVector::from_column_slice(h);
        if strictly_feasible(&z) {
            return Ok(z);
        }
    }

    // Least-norm solution of Az = b (or the origin without equalities).
    let candidate = if cons.n_eq() > 0 {
        let aat = &cons.a * cons.a.transpose();
        let w = aat.lu().solve(&cons.b).ok_or_else(|| {
            Error::InvalidArgument("equality constraints are rank deficient".into())
        })?;
        cons.a.transpose() * w
    } else {
        DVector::zeros(d)
    };
    if cons.n_ineq() == 0 || strictly_feasible(&candidate) {
        return Ok(candidate);
    }

    // Inequality-centering candidate: ridge least squares pushing every slack
    // toward 1 (for a box this is the midpoint). Only tried without
    // equalities, which the shift away from `candidate` would violate.
    if cons.n_eq() == 0 {
        let gtg = cons.g.transpose() * &cons.g + DMatrix::identity(d, d) * 1e-8;
        let target = &cons.h - DVector::from_element(cons.n_ineq(), 1.0);
        if let Some(center) = gtg.lu().solve(&(cons.g.transpose() * target)) {
            if strictly_feasible(&center) {
                return Ok(center);
            }
        }
    }

    phase_one(cons, candidate)
}

/// Phase-1: minimize `w + (eps/2)|z|^2` over `{Gz - w 1 <= h, Az = b}`. Any
/// iterate that becomes strictly feasible for the original inequalities is
/// returned immediately; otherwise a nonnegative optimum proves infeasibility.
fn phase_one(cons: &AffineConstraints, candidate: DVector<f64>) -> Result<DVector<f64>> {
    struct PhaseOne {
        d: usize,
    }
    impl Objective for PhaseOne {
        fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
            let mut g = z * 1e-6;
            g[self.d] = 1.0;
            g
        }
        fn hess(&self, z: &DVector<f64>) -> DMatrix<f64> {
            let mut h = DMatrix::identity(z.len(), z.len()) * 1e-6;
            h[(self.d, self.d)] = 0.0;
            h
        }
    }

    let (d, n, p) = (cons.dim(), cons.n_ineq(), cons.n_eq());
    let mut g = DMatrix::zeros(n, d + 1);
    g.view_mut((0, 0), (n, d)).copy_from(&cons.g);
    for i in 0..n {
        g[(i, d)] = -1.0;
    }
    let mut a = DMatrix::zeros(p, d + 1);
    a.view_mut((0, 0), (p, d)).copy_from(&cons.a);
    let lifted = AffineConstraints::new(g, cons.h.clone(), a, cons.b.clone())?;

    let violation = (&cons.g * &candidate - &cons.h)
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max);
    let mut z0 = DVector::zeros(d + 1);
    z0.rows_mut(0, d).copy_from(&candidate);
    z0[d] = violation + 1.0;

    let margin = 1e-8 * (1.0 + cons.h.amax_or(0.0));
    let feasible_slice = |z: &DVector<f64>| -> bool {
        let point = z.rows(0, d).into_owned();
        let s = &cons.h - &cons.g * &point;
        s.iter().all(|v| *v > margin)
    };
    let result = ipm(
        &PhaseOne { d },
        &lifted,
        z0,
        1e-9,
        300,
        Some(&feasible_slice),
    );
    if feasible_slice(&result.sol.z) {
        return Ok(result.sol.z.rows(0, d).into_owned());
    }
    Err(Error::Infeasible {
        violation: result.sol.z[d].max(0.0),
    })
}

/// One trial point of the interior-point line search.
struct Trial {
    alpha: f64,
    /// Coordinates snapped exactly onto a cost kink at this step length.
    snaps: Vec<(usize, f64)>,
}

/// Primal-dual path-following Newton core with a breakpoint-aware line
/// search: besides the usual halving schedule, step lengths that put a
/// coordinate exactly on a cost kink are tried (and snapped to exactly),
/// which is how kink-supported optima of hinge costs are reached.
fn ipm(
    obj: &dyn Objective,
    cons: &AffineConstraints,
    z0: DVector<f64>,
    tol: f64,
    max_iters: usize,
    early_exit: Option<&dyn Fn(&DVector<f64>) -> bool>,
) -> IpmResult {
    const SIGMA: f64 = 0.1;
    const BETA: f64 = 0.5;
    const ALPHA_FRACTION: f64 = 0.99;
    const MAX_BACKTRACK: usize = 40;

    let (d, n, p) = (cons.dim(), cons.n_ineq(), cons.n_eq());
    let mut z = z0;
    let mut slack = if n > 0 {
        &cons.h - &cons.g * &z
    } else {
        DVector::zeros(0)
    };
    let mut lambda = DVector::from_iterator(n, slack.iter().map(|s| (1.0 / s).clamp(1e-3, 1e3)));
    let mut nu = DVector::zeros(p);

    let mut best: Option<(KktSolution, KktResiduals)> = None;
    let mut stalls = 0usize;
    let mut iterations = 0usize;

    for iter in 0..max_iters {
        iterations = iter + 1;
        if let Some(exit) = early_exit {
            if exit(&z) {
                break;
            }
        }
        let res = residuals(obj, cons, &z, &lambda, &nu);
        let better = best
            .as_ref()
            .map(|(_, r)| res.max() < r.max())
            .unwrap_or(true);
        if better {
            best = Some((
                KktSolution {
                    z: z.clone(),
                    lambda: lambda.clone(),
                    nu: nu.clone(),
                },
                res,
            ));
        }
        if res.max() <= tol {
            let (sol, res) = best.clone().unwrap();
            return IpmResult {
                sol,
                res,
                iterations,
                converged: true,
            };
        }

        let grad = obj.grad(&z);
        let hess = obj.hess(&z);
        let mu = if n > 0 {
            SIGMA * lambda.dot(&slack) / n as f64
        } else {
            0.0
        };
        let merit0 = merit(obj, cons, &z, &lambda, &nu, mu);

        // Residuals of the perturbed KKT system driving the Newton step.
        let r_dual = {
            let mut r = grad.clone();
            if n > 0 {
                r += cons.g.transpose() * &lambda;
            }
            if p > 0 {
                r += cons.a.transpose() * &nu;
            }
            r
        };
        let r_cent = DVector::from_iterator(n, (0..n).map(|i| lambda[i] * slack[i] - mu));
        let r_pri = if p > 0 {
            &cons.a * &z - &cons.b
        } else {
            DVector::zeros(0)
        };

        // Reduced Newton system in (dz, dnu) after eliminating dlambda.
        let mut h_bar = hess;
        if n > 0 {
            for i in 0..n {
                let w = lambda[i] / slack[i];
                let row = cons.g.row(i);
                for a in 0..d {
                    let ra = row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in 0..d {
                        h_bar[(a, b)] += w * ra * row[b];
                    }
                }
            }
        }
        let mut rhs_z = -&r_dual;
        if n > 0 {
            let corr = DVector::from_iterator(n, (0..n).map(|i| r_cent[i] / slack[i]));
            rhs_z += cons.g.transpose() * corr;
        }

        let step = solve_newton(&h_bar, cons, &rhs_z, &r_pri, d, p);
        let (dz, dnu) = match step {
            Some(s) => s,
            None => {
                stalls += 1;
                if stalls >= 3 {
                    break;
                }
                continue;
            }
        };
        let dlambda = if n > 0 {
            let gdz = &cons.g * &dz;
            DVector::from_iterator(n, (0..n).map(|i| (lambda[i] * gdz[i] - r_cent[i]) / slack[i]))
        } else {
            DVector::zeros(0)
        };

        // Cap: keep the duals positive, then backtrack until the slacks stay
        // strictly positive (the feasible step lengths form an interval, so
        // everything below the cap is feasible too).
        let mut alpha_cap: f64 = 1.0;
        for i in 0..n {
            if dlambda[i] < 0.0 {
                alpha_cap = alpha_cap.min(-ALPHA_FRACTION * lambda[i] / dlambda[i]);
            }
        }
        if n > 0 {
            let mut k = 0;
            loop {
                let s_try = &cons.h - &cons.g * (&z + &dz * alpha_cap);
                if s_try.iter().all(|v| *v > 0.0) {
                    break;
                }
                alpha_cap *= BETA;
                k += 1;
                if k > MAX_BACKTRACK {
                    break;
                }
            }
        }

        // Trial schedule: halvings of the cap plus every kink crossing.
        let mut trials: Vec<Trial> = Vec::new();
        let mut a = alpha_cap;
        for _ in 0..=MAX_BACKTRACK {
            trials.push(Trial {
                alpha: a,
                snaps: Vec::new(),
            });
            a *= BETA;
        }
        for &(j, k) in obj.kinks() {
            if dz[j] != 0.0 {
                let a = (k - z[j]) / dz[j];
                if a > 1e-14 && a <= alpha_cap {
                    trials.push(Trial {
                        alpha: a,
                        snaps: vec![(j, k)],
                    });
                }
            }
        }
        trials.sort_by(|x, y| y.alpha.total_cmp(&x.alpha));

        let mut accepted = false;
        for trial in &trials {
            let alpha = trial.alpha;
            let mut z_try = &z + &dz * alpha;
            for &(j, k) in &trial.snaps {
                z_try[j] = k;
            }
            if n > 0 {
                let s_try = &cons.h - &cons.g * &z_try;
                if s_try.iter().any(|v| *v <= 0.0) {
                    continue;
                }
            }
            let lambda_try = &lambda + &dlambda * alpha;
            let nu_try = &nu + &dnu * alpha;
            let m_try = merit(obj, cons, &z_try, &lambda_try, &nu_try, mu);
            if m_try <= (1.0 - 0.01 * alpha) * merit0 {
                z = z_try;
                lambda = lambda_try;
                nu = nu_try;
                if n > 0 {
                    slack = &cons.h - &cons.g * &z;
                }
                accepted = true;
                break;
            }
        }

        if accepted {
            stalls = 0;
            continue;
        }

        // Centering fallback: with z pinned (typically on a kink), the choice
        // lambda = mu / s zeroes the centrality residual exactly and shrinks
        // the complementarity gap geometrically across iterations.
        if n > 0 {
            let lambda_c = DVector::from_iterator(n, (0..n).map(|i| mu / slack[i]));
            if merit(obj, cons, &z, &lambda_c, &nu, mu) <= 0.9 * merit0 {
                lambda = lambda_c;
                stalls = 0;
                continue;
            }
        }
        stalls += 1;
        if stalls >= 3 {
            break;
        }
    }

    // Give the final iterate a chance to enter the record.
    let res = residuals(obj, cons, &z, &lambda, &nu);
    let better = best
        .as_ref()
        .map(|(_, r)| res.max() < r.max())
        .unwrap_or(true);
    if better {
        best = Some((KktSolution { z, lambda, nu }, res));
    }
    let (sol, res) = best.unwrap();
    let converged = res.max() <= tol;
    IpmResult {
        sol,
        res,
        iterations,
        converged,
    }
}

/// Solves `[[H, A^T], [A, 0]] [dz; dnu] = [rhs_z; -r_pri]`, adding an
/// escalating diagonal shift to the `H` block if the factorization fails.
fn solve_newton(
    h_bar: &DMatrix<f64>,
    cons: &AffineConstraints,
    rhs_z: &DVector<f64>,
    r_pri: &DVector<f64>,
    d: usize,
    p: usize,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let mut shift = 0.0;
    for attempt in 0..6 {
        let mut m = DMatrix::zeros(d + p, d + p);
        m.view_mut((0, 0), (d, d)).copy_from(h_bar);
        for i in 0..d {
            m[(i, i)] += shift;
        }
        if p > 0 {
            m.view_mut((0, d), (d, p)).copy_from(&cons.a.transpose());
            m.view_mut((d, 0), (p, d)).copy_from(&cons.a);
        }
        let mut rhs = DVector::zeros(d + p);
        rhs.rows_mut(0, d).copy_from(rhs_z);
        if p > 0 {
            rhs.rows_mut(d, p).copy_from(&(-r_pri));
        }
        if let Some(sol) = m.lu().solve(&rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                return Some((sol.rows(0, d).into_owned(), sol.rows(d, p).into_owned()));
            }
        }
        shift = if attempt == 0 { 1e-12 } else { shift * 100.0 };
    }
    None
}

/// Factorized implicit-differentiation system at an SAA solution.
pub struct KktFactorization {
    matrix: DMatrix<f64>,
    lu: Lu,
    lu_t: Lu,
    regularization: f64,
    d: usize,
    n: usize,
    p: usize,
}

impl KktFactorization {
    /// The factored matrix, including any Tikhonov shift.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Top-left `d x d` block (the averaged cost Hessian plus any shift).
    pub fn h_block(&self) -> DMatrix<f64> {
        self.matrix.view((0, 0), (self.d, self.d)).into_owned()
    }

    /// Diagonal shift that was required (0 when the matrix factored cleanly).
    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.n, self.p)
    }

    pub fn size(&self) -> usize {
        self.d + self.n + self.p
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu
            .solve(rhs)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or(Error::DegenerateKkt {
                regularization: self.regularization,
            })
    }

    pub fn solve_transpose(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu_t
            .solve(rhs)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or(Error::DegenerateKkt {
                regularization: self.regularization,
            })
    }
}

/// Builds and factorizes the KKT matrix at `sol`. Singular or nearly singular
/// systems receive a Tikhonov shift on the diagonal, starting at 1e-10 and
/// escalating tenfold up to 1e-6 before giving up.
pub fn assemble_kkt(
    samples: &[Vec<f64>],
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    sol: &KktSolution,
) -> Result<KktFactorization> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "assemble_kkt needs at least one outcome sample".into(),
        ));
    }
    let (d, n, p) = (sol.z.len(), cons.n_ineq(), cons.n_eq());
    let size = d + n + p;

    let mut h = DMatrix::zeros(d, d);
    for y in samples {
        h += cost.hess_zz(y, sol.z.as_slice());
    }
    h /= samples.len() as f64;

    let mut k = DMatrix::zeros(size, size);
    k.view_mut((0, 0), (d, d)).copy_from(&h);
    if n > 0 {
        k.view_mut((0, d), (d, n)).copy_from(&cons.g.transpose());
        let mut dg = cons.g.clone();
        for i in 0..n {
            let l = sol.lambda[i];
            for j in 0..d {
                dg[(i, j)] *= l;
            }
        }
        k.view_mut((d, 0), (n, d)).copy_from(&dg);
        let slack_signed = &cons.g * &sol.z - &cons.h;
        for i in 0..n {
            k[(d + i, d + i)] = slack_signed[i];
        }
    }
    if p > 0 {
        k.view_mut((0, d + n), (d, p)).copy_from(&cons.a.transpose());
        k.view_mut((d + n, 0), (p, d)).copy_from(&cons.a);
    }

    // Deterministic probe used to verify the factorization quality.
    let probe = DVector::from_iterator(size, (0..size).map(|i| (1.3 * i as f64 + 0.7).sin()));
    let probe_norm = probe.norm();

    let mut delta = 0.0f64;
    loop {
        let mut shifted = k.clone();
        for i in 0..size {
            shifted[(i, i)] += delta;
        }
        let lu = shifted.clone().lu();
        let lu_t = shifted.transpose().lu();
        let ok = match (lu.solve(&probe), lu_t.solve(&probe)) {
            (Some(x), Some(xt)) => {
                let r = (&shifted * &x - &probe).norm() / probe_norm;
                let rt = (shifted.transpose() * &xt - &probe).norm() / probe_norm;
                r.is_finite() && rt.is_finite() && r <= 1e-8 && rt <= 1e-8
            }
            _ => false,
        };
        if ok {
            return Ok(KktFactorization {
                matrix: shifted,
                lu,
                lu_t,
                regularization: delta,
                d,
                n,
                p,
            });
        }
        delta = if delta == 0.0 { 1e-10 } else { delta * 10.0 };
        if delta > 1e-6 {
            return Err(Error::DegenerateKkt {
                regularization: 1e-6,
            });
        }
    }
}

/// Solves `u^T K = -[dF/dz; 0; 0]^T` (one transpose solve). The first `d`
/// entries of `u` weight the implicit sensitivity of the decision; the rest
/// correspond to the multiplier blocks.
pub fn adjoint_solve(fac: &KktFactorization, df_dz: &[f64]) -> Result<DVector<f64>> {
    let (d, _, _) = fac.dims();
    if df_dz.len() != d {
        return Err(Error::dim("adjoint right-hand side", d, df_dz.len()));
    }
    let mut rhs = DVector::zeros(fac.size());
    for (i, v) in df_dz.iter().enumerate() {
        rhs[i] = -v;
    }
    fac.solve_transpose(&rhs)
}

/// Convenience extension: `amax` that tolerates empty vectors.
trait AmaxOr {
    fn amax_or(&self, default: f64) -> f64;
}

impl AmaxOr for DVector<f64> {
    fn amax_or(&self, default: f64) -> f64 {
        if self.is_empty() {
            default
        } else {
            self.amax()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `f(y, z) = 0.5 |z - y|^2`, the workhorse for solver sanity checks.
    struct Tracking;

    impl CostModel for Tracking {
        fn value(&self, y: &[f64], z: &[f64]) -> f64 {
            y.iter()
                .zip(z.iter())
                .map(|(a, b)| 0.5 * (b - a) * (b - a))
                .sum()
        }
        fn grad_z(&self, y: &[f64], z: &[f64]) -> Vec<f64> {
            y.iter().zip(z.iter()).map(|(a, b)| b - a).collect()
        }
        fn hess_zz(&self, y: &[f64], _z: &[f64]) -> DMatrix<f64> {
            DMatrix::identity(y.len(), y.len())
        }
        fn hess_zy(&self, y: &[f64], _z: &[f64]) -> DMatrix<f64> {
            -DMatrix::identity(y.len(), y.len())
        }
    }

    /// Per-coordinate asymmetric hinge plus quadratic tracking; optima often
    /// sit exactly on a kink.
    struct HingeTracking {
        under: f64,
        over: f64,
    }

    impl CostModel for HingeTracking {
        fn value(&self, y: &[f64], z: &[f64]) -> f64 {
            y.iter()
                .zip(z.iter())
                .map(|(a, b)| {
                    self.under * (a - b).max(0.0)
                        + self.over * (b - a).max(0.0)
                        + 0.5 * (b - a) * (b - a)
                })
                .sum()
        }
        fn grad_z(&self, y: &[f64], z: &[f64]) -> Vec<f64> {
            y.iter()
                .zip(z.iter())
                .map(|(a, b)| {
                    let mut g = b - a;
                    if a > b {
                        g -= self.under;
                    }
                    if b > a {
                        g += self.over;
                    }
                    g
                })
                .collect()
        }
        fn hess_zz(&self, y: &[f64], _z: &[f64]) -> DMatrix<f64> {
            DMatrix::identity(y.len(), y.len())
        }
        fn hess_zy(&self, y: &[f64], _z: &[f64]) -> DMatrix<f64> {
            -DMatrix::identity(y.len(), y.len())
        }
        fn grad_z_interval(&self, y: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
            let lo = y
                .iter()
                .zip(z.iter())
                .map(|(a, b)| {
                    let mut g = b - a;
                    if a >= b {
                        g -= self.under;
                    }
                    if b > a {
                        g += self.over;
                    }
                    g
                })
                .collect();
            let hi = y
                .iter()
                .zip(z.iter())
                .map(|(a, b)| {
                    let mut g = b - a;
                    if a > b {
                        g -= self.under;
                    }
                    if b >= a {
                        g += self.over;
                    }
                    g
                })
                .collect();
            (lo, hi)
        }
        fn grad_kinks(&self, y: &[f64]) -> Vec<(usize, f64)> {
            y.iter().enumerate().map(|(j, v)| (j, *v)).collect()
        }
    }

    fn residual_ok(
        samples: &[Vec<f64>],
        cost: &dyn CostModel,
        cons: &AffineConstraints,
        sol: &KktSolution,
    ) {
        let r = kkt_residuals(samples, cost, cons, sol);
        assert!(r.stationarity <= 1e-8, "stationarity {}", r.stationarity);
        assert!(r.primal <= 1e-8, "primal {}", r.primal);
        assert!(
            r.complementarity <= 1e-7,
            "complementarity {}",
            r.complementarity
        );
        assert!(sol.lambda.iter().all(|l| *l >= -1e-10));
        if cons.n_ineq() > 0 {
            let s = &cons.h - &cons.g * &sol.z;
            assert!(s.iter().all(|v| *v >= -1e-8));
        }
    }

    #[test]
    fn unconstrained_tracking_recovers_the_sample_mean() {
        let samples = vec![vec![1.0, -2.0], vec![3.0, 4.0], vec![-1.0, 1.0]];
        let cons = AffineConstraints::unconstrained(2);
        let sol = solve_saa(&samples, &Tracking, &cons, &SolveOptions::default()).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-8);
        assert!((sol.z[1] - 1.0).abs() < 1e-8);
        residual_ok(&samples, &Tracking, &cons, &sol);
    }

    #[test]
    fn box_constrained_tracking_clamps() {
        let samples = vec![vec![2.5, -0.7, 0.3]];
        let cons = AffineConstraints::bounds(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        let sol = solve_saa(&samples, &Tracking, &cons, &SolveOptions::default()).unwrap();
        assert!((sol.z[0] - 1.0).abs() < 1e-7);
        assert!(sol.z[1].abs() < 1e-7);
        assert!((sol.z[2] - 0.3).abs() < 1e-7);
        residual_ok(&samples, &Tracking, &cons, &sol);
        // Active upper bound on the first coordinate carries a multiplier
        // equal to the negative gradient there.
        assert!(sol.lambda[3] > 1.0 - 1e-6);
    }

    #[test]
    fn equality_constrained_projection() {
        // Minimize 0.5|z - y|^2 with 1^T z = 1: projection of y onto the
        // affine hyperplane, z = y - ((1^T y - 1)/2) 1.
        let samples = vec![vec![0.9, 0.4]];
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0]);
        let cons = AffineConstraints::new(DMatrix::zeros(0, 2), DVector::zeros(0), a, b).unwrap();
        let sol = solve_saa(&samples, &Tracking, &cons, &SolveOptions::default()).unwrap();
        assert!((sol.z[0] - 0.75).abs() < 1e-8);
        assert!((sol.z[1] - 0.25).abs() < 1e-8);
        residual_ok(&samples, &Tracking, &cons, &sol);
    }

    #[test]
    fn hinge_optimum_lands_exactly_on_the_kink() {
        // One sample, no constraints: the subdifferential at z = y is
        // [-under, over], which contains zero, so z* = y exactly.
        let cost = HingeTracking {
            under: 50.0,
            over: 0.5,
        };
        let samples = vec![vec![1.3, -0.4]];
        let cons = AffineConstraints::unconstrained(2);
        let sol = solve_saa(&samples, &cost, &cons, &SolveOptions::default()).unwrap();
        assert_eq!(sol.z[0], 1.3);
        assert_eq!(sol.z[1], -0.4);
        residual_ok(&samples, &cost, &cons, &sol);
    }

    #[test]
    fn hinge_batch_optimum_sits_on_a_sample_point() {
        // A heavy under-supply penalty pushes the optimum to the largest
        // sample, landing on a kink of the sample-average objective.
        let cost = HingeTracking {
            under: 50.0,
            over: 0.5,
        };
        let samples: Vec<Vec<f64>> = [0.2, 1.1, 0.7, 0.9, 0.4].iter().map(|v| vec![*v]).collect();
        let cons = AffineConstraints::bounds(&[-5.0], &[5.0]).unwrap();
        let sol = solve_saa(&samples, &cost, &cons, &SolveOptions::default()).unwrap();
        residual_ok(&samples, &cost, &cons, &sol);
        // The averaged gradient just below z = 1.1 is negative and the jump
        // across that kink exceeds it, so the optimum is the top sample.
        assert_eq!(sol.z[0], 1.1);
    }

    #[test]
    fn fully_pinned_equalities_bypass_the_interior_point_core() {
        // Single-asset budget shape: the equality row forces z = 1 with both
        // box rows active; the equality multiplier absorbs the gradient.
        let g = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let h = DVector::from_column_slice(&[0.0, 1.0]);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let b = DVector::from_column_slice(&[1.0]);
        let cons = AffineConstraints::new(g, h, a, b).unwrap();
        let samples = vec![vec![0.3]];
        let sol = solve_saa(&samples, &Tracking, &cons, &SolveOptions::default()).unwrap();
        assert_eq!(sol.z[0], 1.0);
        residual_ok(&samples, &Tracking, &cons, &sol);
    }

    #[test]
    fn infeasible_box_is_detected() {
        // z <= 0 and z >= 1 simultaneously.
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_column_slice(&[0.0, -1.0]);
        let cons = AffineConstraints::inequalities(g, h).unwrap();
        let err = solve_saa(&[vec![0.5]], &Tracking, &cons, &SolveOptions::default()).unwrap_err();
        match err {
            Error::Infeasible { violation } => assert!(violation > 0.1),
            other => panic!("expected infeasibility, got {other}"),
        }
    }

    #[test]
    fn empty_samples_are_rejected() {
        let cons = AffineConstraints::unconstrained(1);
        assert!(matches!(
            solve_saa(&[], &Tracking, &cons, &SolveOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn iteration_limit_reports_best_iterate() {
        let samples = vec![vec![2.5, -0.7]];
        let cons = AffineConstraints::bounds(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let opts = SolveOptions {
            max_iters: 2,
            ..SolveOptions::default()
        };
        match solve_saa(&samples, &Tracking, &cons, &opts) {
            Err(Error::NonConvergence { best, .. }) => {
                let (sol, res) = *best;
                assert_eq!(sol.z.len(), 2);
                assert!(res.max().is_finite());
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn assemble_kkt_without_constraints_is_the_hessian() {
        let samples = vec![vec![0.3, 1.4], vec![-0.2, 0.8]];
        let cons = AffineConstraints::unconstrained(2);
        let sol = solve_saa(&samples, &Tracking, &cons, &SolveOptions::default()).unwrap();
        let fac = assemble_kkt(&samples, &Tracking, &cons, &sol).unwrap();
        assert_eq!(fac.regularization(), 0.0);
        assert_eq!(fac.size(), 2);
        let m = fac.matrix();
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((m[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adjoint_solves_the_transposed_system() {
        let samples = vec![vec![2.5, -0.7], vec![0.1, 0.9]];
        let cons = AffineConstraints::bounds(&[-3.0, -3.0], &[3.0, 3.0]).unwrap();
        let sol = solve_saa(&samples, &Tracking, &cons, &SolveOptions::default()).unwrap();
        let fac = assemble_kkt(&samples, &Tracking, &cons, &sol).unwrap();
        let df = [0.7, -1.2];
        let u = adjoint_solve(&fac, &df).unwrap();
        let back = fac.matrix().transpose() * &u;
        assert!((back[0] + df[0]).abs() < 1e-9);
        assert!((back[1] + df[1]).abs() < 1e-9);
        for i in 2..fac.size() {
            assert!(back[i].abs() < 1e-9);
        }
    }

    #[test]
    fn adjoint_on_unconstrained_mean_is_minus_df() {
        // With H = I and no constraints, u = -dF/dz exactly.
        let samples = vec![vec![1.0], vec![2.0], vec![6.0]];
        let cons = AffineConstraints::unconstrained(1);
        let sol = solve_saa(&samples, &Tracking, &cons, &SolveOptions::default()).unwrap();
        assert!((sol.z[0] - 3.0).abs() < 1e-8);
        let fac = assemble_kkt(&samples, &Tracking, &cons, &sol).unwrap();
        let u = adjoint_solve(&fac, &[1.0]).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn factorization_roundtrips_vectors() {
        let samples = vec![vec![0.4, 0.6, -0.3]];
        let cons = AffineConstraints::bounds(&[-1.0; 3], &[1.0; 3]).unwrap();
        let sol = solve_saa(&samples, &Tracking, &cons, &SolveOptions::default()).unwrap();
        let fac = assemble_kkt(&samples, &Tracking, &cons, &sol).unwrap();
        let v = DVector::from_iterator(fac.size(), (0..fac.size()).map(|i| (i as f64) - 2.0));
        let x = fac.solve(&v).unwrap();
        let back = fac.matrix() * &x;
        assert!((back - &v).norm() <= 1e-8 * v.norm());
        let xt = fac.solve_transpose(&v).unwrap();
        let back_t = fac.matrix().transpose() * &xt;
        assert!((back_t - &v).norm() <= 1e-8 * v.norm());
    }

    #[test]
    fn hint_outside_the_region_still_solves() {
        let samples = vec![vec![0.4]];
        let cons = AffineConstraints::bounds(&[0.0], &[1.0]).unwrap();
        let opts = SolveOptions {
            z0: Some(vec![25.0]),
            ..SolveOptions::default()
        };
        let sol = solve_saa(&samples, &Tracking, &cons, &opts).unwrap();
        assert!((sol.z[0] - 0.4).abs() < 1e-7);
    }
}
