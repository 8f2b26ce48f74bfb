//! Convex sets, tangent cones, metrics and a dense active-set QP solver.
//!
//! Every set is reduced to linear rows `A x <= b` (plus equality rows for
//! pinned box coordinates) so that projections of all kinds go through one
//! QP routine:
//!
//! ```text
//! min  ½ wᵀ H w + fᵀ w
//! s.t. A_ineq w <= b_ineq
//!      A_eq   w  = b_eq
//! ```
//!
//! The solver is the dual active-set scheme of Goldfarb and Idnani: it starts
//! from the unconstrained minimizer and adds violated rows one at a time, so no
//! feasible starting point is required and infeasibility is detected exactly.
//! Violated rows and blocking rows are picked by smallest index.

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

/// Activity threshold for a row with right-hand side `b`.
pub fn activity_tol(b: f64) -> f64 {
    1e-9 * (1.0 + b.abs())
}

/// Closed convex set in `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    /// Componentwise bounds; entries may be infinite.
    Box { lower: Vector, upper: Vector },
    /// `{x : a x <= b}`.
    Polyhedron { a: Matrix, b: Vector },
    /// `{x : x >= 0}` in the given dimension.
    NonnegOrthant(usize),
    /// Intersection of sets of equal dimension; rows are concatenated.
    Intersection(Vec<ConvexSet>),
}

/// Linear description of a set.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRows {
    pub a_ineq: Matrix,
    pub b_ineq: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
}

impl LinearRows {
    fn empty(n: usize) -> Self {
        Self {
            a_ineq: Matrix::zeros(0, n),
            b_ineq: Vector::zeros(0),
            a_eq: Matrix::zeros(0, n),
            b_eq: Vector::zeros(0),
        }
    }

    fn from_lists(n: usize, ineq: Vec<(Vec<f64>, f64)>, eq: Vec<(Vec<f64>, f64)>) -> Self {
        let stack = |rows: &[(Vec<f64>, f64)]| {
            let a = Matrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
            let b = Vector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
            (a, b)
        };
        let (a_ineq, b_ineq) = stack(&ineq);
        let (a_eq, b_eq) = stack(&eq);
        Self {
            a_ineq,
            b_ineq,
            a_eq,
            b_eq,
        }
    }

    fn append(&mut self, other: LinearRows) {
        self.a_ineq = vstack(&self.a_ineq, &other.a_ineq);
        self.b_ineq = vcat(&self.b_ineq, &other.b_ineq);
        self.a_eq = vstack(&self.a_eq, &other.a_eq);
        self.b_eq = vcat(&self.b_eq, &other.b_eq);
    }

    /// Number of rows, inequality plus equality.
    pub fn len(&self) -> usize {
        self.a_ineq.nrows() + self.a_eq.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn vstack(top: &Matrix, bottom: &Matrix) -> Matrix {
    let n = top.ncols().max(bottom.ncols());
    let mut out = Matrix::zeros(top.nrows() + bottom.nrows(), n);
    if top.nrows() > 0 {
        out.rows_mut(0, top.nrows()).copy_from(top);
    }
    if bottom.nrows() > 0 {
        out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    }
    out
}

pub(crate) fn vcat(top: &Vector, bottom: &Vector) -> Vector {
    Vector::from_iterator(
        top.len() + bottom.len(),
        top.iter().chain(bottom.iter()).copied(),
    )
}

impl ConvexSet {
    /// `R^n`, represented as a polyhedron without rows.
    pub fn whole_space(n: usize) -> Self {
        ConvexSet::Polyhedron {
            a: Matrix::zeros(0, n),
            b: Vector::zeros(0),
        }
    }

    pub fn boxed(lower: &[f64], upper: &[f64]) -> Self {
        ConvexSet::Box {
            lower: Vector::from_column_slice(lower),
            upper: Vector::from_column_slice(upper),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Polyhedron { a, .. } => a.ncols(),
            ConvexSet::NonnegOrthant(n) => *n,
            ConvexSet::Intersection(parts) => parts.first().map_or(0, |p| p.dim()),
        }
    }

    /// Checks internal dimensions and bound ordering.
    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::Box { lower, upper } => {
                check_dim("box bounds", lower.len(), upper.len())?;
                if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
                    return Err(Error::Infeasible);
                }
                Ok(())
            }
            ConvexSet::Polyhedron { a, b } => check_dim("polyhedron rows", a.nrows(), b.len()),
            ConvexSet::NonnegOrthant(_) => Ok(()),
            ConvexSet::Intersection(parts) => {
                let n = self.dim();
                for p in parts {
                    check_dim("intersection member", n, p.dim())?;
                    p.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Linear rows describing the set. Box coordinates with equal finite
    /// bounds become equality rows.
    pub fn rows(&self) -> LinearRows {
        let n = self.dim();
        match self {
            ConvexSet::Box { lower, upper } => {
                let mut ineq = Vec::new();
                let mut eq = Vec::new();
                for i in 0..n {
                    let mut e = vec![0.0; n];
                    if lower[i] == upper[i] && lower[i].is_finite() {
                        e[i] = 1.0;
                        eq.push((e, lower[i]));
                        continue;
                    }
                    if lower[i].is_finite() {
                        let mut r = e.clone();
                        r[i] = -1.0;
                        ineq.push((r, -lower[i]));
                    }
                    if upper[i].is_finite() {
                        e[i] = 1.0;
                        ineq.push((e, upper[i]));
                    }
                }
                LinearRows::from_lists(n, ineq, eq)
            }
            ConvexSet::Polyhedron { a, b } => LinearRows {
                a_ineq: a.clone(),
                b_ineq: b.clone(),
                a_eq: Matrix::zeros(0, n),
                b_eq: Vector::zeros(0),
            },
            ConvexSet::NonnegOrthant(n) => LinearRows {
                a_ineq: -Matrix::identity(*n, *n),
                b_ineq: Vector::zeros(*n),
                a_eq: Matrix::zeros(0, *n),
                b_eq: Vector::zeros(0),
            },
            ConvexSet::Intersection(parts) => {
                let mut out = LinearRows::empty(n);
                for p in parts {
                    out.append(p.rows());
                }
                out
            }
        }
    }

    /// Largest distance from `x` to any single defining half-space.
    pub fn violation(&self, x: &Vector) -> f64 {
        let rows = self.rows();
        let mut worst: f64 = 0.0;
        for i in 0..rows.a_ineq.nrows() {
            let a = rows.a_ineq.row(i);
            let norm = a.norm().max(f64::MIN_POSITIVE);
            worst = worst.max(((a * x)[0] - rows.b_ineq[i]) / norm);
        }
        for i in 0..rows.a_eq.nrows() {
            let a = rows.a_eq.row(i);
            let norm = a.norm().max(f64::MIN_POSITIVE);
            worst = worst.max(((a * x)[0] - rows.b_eq[i]).abs() / norm);
        }
        worst
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        self.violation(x) <= tol
    }

    /// Euclidean projection; see [`project_point`].
    pub fn project(&self, x: &Vector) -> Result<Vector> {
        project_point(self, x)
    }

    /// Cartesian product of sets, in order.
    pub fn product(parts: &[ConvexSet]) -> ConvexSet {
        let total: usize = parts.iter().map(|p| p.dim()).sum();
        let mut offset = 0;
        let mut lifted = Vec::with_capacity(parts.len());
        for p in parts {
            lifted.push(p.lift(offset, total));
            offset += p.dim();
        }
        if lifted.len() == 1 {
            return lifted.pop().expect("one element");
        }
        ConvexSet::Intersection(lifted)
    }

    /// Embeds the set into coordinates `offset..offset + dim` of `R^total`.
    fn lift(&self, offset: usize, total: usize) -> ConvexSet {
        let n = self.dim();
        match self {
            ConvexSet::Box { lower, upper } => {
                let mut lo = Vector::from_element(total, f64::NEG_INFINITY);
                let mut hi = Vector::from_element(total, f64::INFINITY);
                lo.rows_mut(offset, n).copy_from(lower);
                hi.rows_mut(offset, n).copy_from(upper);
                ConvexSet::Box { lower: lo, upper: hi }
            }
            ConvexSet::NonnegOrthant(_) => ConvexSet::Box {
                lower: Vector::zeros(n),
                upper: Vector::from_element(n, f64::INFINITY),
            }
            .lift(offset, total),
            ConvexSet::Polyhedron { a, b } => {
                let mut big = Matrix::zeros(a.nrows(), total);
                big.view_mut((0, offset), (a.nrows(), n)).copy_from(a);
                ConvexSet::Polyhedron { a: big, b: b.clone() }
            }
            ConvexSet::Intersection(parts) => {
                ConvexSet::Intersection(parts.iter().map(|p| p.lift(offset, total)).collect())
            }
        }
    }

    /// True when the set is a box (possibly after flattening intersections of boxes).
    fn as_box(&self) -> Option<(Vector, Vector)> {
        match self {
            ConvexSet::Box { lower, upper } => Some((lower.clone(), upper.clone())),
            ConvexSet::NonnegOrthant(n) => {
                Some((Vector::zeros(*n), Vector::from_element(*n, f64::INFINITY)))
            }
            ConvexSet::Polyhedron { a, .. } if a.nrows() == 0 => {
                let n = a.ncols();
                Some((
                    Vector::from_element(n, f64::NEG_INFINITY),
                    Vector::from_element(n, f64::INFINITY),
                ))
            }
            ConvexSet::Intersection(parts) => {
                let n = self.dim();
                let mut lo = Vector::from_element(n, f64::NEG_INFINITY);
                let mut hi = Vector::from_element(n, f64::INFINITY);
                for p in parts {
                    let (l, u) = p.as_box()?;
                    lo = lo.zip_map(&l, f64::max);
                    hi = hi.zip_map(&u, f64::min);
                }
                Some((lo, hi))
            }
            _ => None,
        }
    }
}

/// Riemannian metric: a symmetric positive definite matrix, possibly state dependent.
#[derive(Clone)]
pub enum Metric {
    Identity,
    Constant(Matrix),
    Field(Arc<dyn Fn(&Vector) -> Result<Matrix> + Send + Sync>),
}

impl std::fmt::Debug for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Identity => write!(f, "Metric::Identity"),
            Metric::Constant(m) => write!(f, "Metric::Constant({m:?})"),
            Metric::Field(_) => write!(f, "Metric::Field(..)"),
        }
    }
}

impl Metric {
    pub fn field(f: impl Fn(&Vector) -> Result<Matrix> + Send + Sync + 'static) -> Self {
        Metric::Field(Arc::new(f))
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Metric::Identity)
    }

    /// Metric matrix at `x`, checked for symmetry and positive definiteness.
    pub fn at(&self, x: &Vector) -> Result<Matrix> {
        let n = x.len();
        let m = match self {
            Metric::Identity => return Ok(Matrix::identity(n, n)),
            Metric::Constant(m) => m.clone(),
            Metric::Field(f) => f(x)?,
        };
        check_dim("metric", n, m.nrows())?;
        check_dim("metric", n, m.ncols())?;
        if !is_spd(&m) {
            return Err(Error::NotSpd);
        }
        Ok(m)
    }

    /// Pointwise inverse metric.
    pub fn inverse(&self) -> Metric {
        match self {
            Metric::Identity => Metric::Identity,
            Metric::Constant(m) => {
                let m = m.clone();
                Metric::field(move |_| spd_inverse(&m))
            }
            Metric::Field(f) => {
                let f = f.clone();
                Metric::field(move |x| spd_inverse(&f(x)?))
            }
        }
    }
}

/// Symmetric (to 1e-10 relative) and Cholesky-factorizable.
pub fn is_spd(m: &Matrix) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return false;
    }
    m.clone().cholesky().is_some()
}

pub(crate) fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotSpd)
}

/// Strictly convex quadratic program.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: Matrix,
    pub f: Vector,
    pub a_ineq: Matrix,
    pub b_ineq: Vector,
    pub a_eq: Matrix,
    pub b_eq: Vector,
}

impl QpProblem {
    /// Problem without constraints.
    pub fn unconstrained(h: Matrix, f: Vector) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_ineq: Matrix::zeros(0, n),
            b_ineq: Vector::zeros(0),
            a_eq: Matrix::zeros(0, n),
            b_eq: Vector::zeros(0),
        }
    }

    pub fn with_rows(h: Matrix, f: Vector, rows: LinearRows) -> Self {
        Self {
            h,
            f,
            a_ineq: rows.a_ineq,
            b_ineq: rows.b_ineq,
            a_eq: rows.a_eq,
            b_eq: rows.b_eq,
        }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        check_dim("qp hessian rows", n, self.h.nrows())?;
        check_dim("qp hessian cols", n, self.h.ncols())?;
        check_dim("qp inequality cols", n, self.a_ineq.ncols())?;
        check_dim("qp inequality rhs", self.a_ineq.nrows(), self.b_ineq.len())?;
        check_dim("qp equality cols", n, self.a_eq.ncols())?;
        check_dim("qp equality rhs", self.a_eq.nrows(), self.b_eq.len())
    }

    pub fn objective(&self, w: &Vector) -> f64 {
        0.5 * w.dot(&(&self.h * w)) + self.f.dot(w)
    }

    /// Scaled KKT residual of a candidate primal-dual pair.
    ///
    /// Combines stationarity, primal feasibility, dual sign and complementarity,
    /// divided by `1 + max(|H|, |f|, |b|)`.
    pub fn kkt_residual(&self, sol: &QpSolution) -> f64 {
        let w = &sol.w;
        let mut grad = &self.h * w + &self.f;
        grad += self.a_ineq.transpose() * &sol.ineq_multipliers;
        grad += self.a_eq.transpose() * &sol.eq_multipliers;
        let mut r = grad.amax();
        let slack = &self.a_ineq * w - &self.b_ineq;
        for i in 0..slack.len() {
            let lam = sol.ineq_multipliers[i];
            r = r.max(slack[i].max(0.0)).max((-lam).max(0.0));
            r = r.max((lam * slack[i]).abs());
        }
        if self.a_eq.nrows() > 0 {
            r = r.max((&self.a_eq * w - &self.b_eq).amax());
        }
        let scale = 1.0
            + self
                .h
                .amax()
                .max(self.f.amax())
                .max(if self.b_ineq.is_empty() { 0.0 } else { self.b_ineq.amax() })
                .max(if self.b_eq.is_empty() { 0.0 } else { self.b_eq.amax() });
        r / scale
    }
}

/// Primal-dual solution of a [`QpProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub w: Vector,
    /// Indices of inequality rows in the final working set, ascending.
    pub active: Vec<usize>,
    pub ineq_multipliers: Vector,
    pub eq_multipliers: Vector,
    pub iterations: usize,
}

/// Working-set entry: constraint index (equalities first) and orientation.
#[derive(Debug, Clone, Copy)]
struct Working {
    index: usize,
    sign: f64,
    equality: bool,
}

struct Constraints<'a> {
    p: &'a QpProblem,
    m_eq: usize,
}

impl Constraints<'_> {
    fn normal(&self, k: usize) -> Vector {
        if k < self.m_eq {
            self.p.a_eq.row(k).transpose()
        } else {
            self.p.a_ineq.row(k - self.m_eq).transpose()
        }
    }

    fn rhs(&self, k: usize) -> f64 {
        if k < self.m_eq {
            self.p.b_eq[k]
        } else {
            self.p.b_ineq[k - self.m_eq]
        }
    }
}

/// Solves a strictly convex QP.
///
/// Returns the minimizer, the indices of active inequality rows and the
/// multipliers (sign convention `H w + f + A_ineqᵀ λ + A_eqᵀ ν = 0`, `λ >= 0`).
pub fn qp_solve(problem: &QpProblem) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.dim();
    let chol = problem.h.clone().cholesky().ok_or(Error::NotSpd)?;
    let h_inv = chol.inverse();
    let cons = Constraints {
        p: problem,
        m_eq: problem.a_eq.nrows(),
    };
    let m_in = problem.a_ineq.nrows();
    let max_iter = 20 * (n + cons.m_eq + m_in) + 100;

    let mut w = -(&h_inv * &problem.f);
    let mut working: Vec<Working> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    let add = |p: usize,
                   equality: bool,
                   w: &mut Vector,
                   working: &mut Vec<Working>,
                   lambda: &mut Vec<f64>,
                   iterations: &mut usize|
     -> Result<()> {
        let raw = cons.normal(p);
        let s_raw = raw.dot(w) - cons.rhs(p);
        let sign = if s_raw < 0.0 && equality { -1.0 } else { 1.0 };
        let np = &raw * sign;
        let mut lam_p = 0.0;
        let unprojected = np.dot(&(&h_inv * &np)).max(f64::MIN_POSITIVE);
        loop {
            *iterations += 1;
            if *iterations > max_iter {
                return Err(Error::MaxIterations(max_iter));
            }
            let s = sign * (raw.dot(w) - cons.rhs(p));
            let (z, r) = step_direction(&problem.h, &h_inv, &cons, working, &np)?;
            let ztn = np.dot(&z);
            let mut t1 = f64::INFINITY;
            let mut block: Option<usize> = None;
            for (j, wk) in working.iter().enumerate() {
                if wk.equality || r[j] <= 1e-14 {
                    continue;
                }
                let ratio = lambda[j] / r[j];
                let better = match block {
                    None => true,
                    Some(b) => {
                        ratio < t1 - 1e-15 * t1.abs()
                            || (ratio <= t1 + 1e-15 * t1.abs() && wk.index < working[b].index)
                    }
                };
                if better {
                    t1 = ratio;
                    block = Some(j);
                }
            }
            let z_zero = ztn <= 1e-13 * unprojected;
            if z_zero {
                if s.abs() <= 1e-12 * (1.0 + cons.rhs(p).abs()) && equality {
                    // Redundant equality already satisfied.
                    return Ok(());
                }
                let Some(j) = block else {
                    return Err(Error::Infeasible);
                };
                for (k, l) in lambda.iter_mut().enumerate() {
                    *l -= t1 * r[k];
                }
                lam_p += t1;
                working.remove(j);
                lambda.remove(j);
                continue;
            }
            let t2 = s / ztn;
            let t = t1.min(t2);
            *w -= &z * t;
            for (k, l) in lambda.iter_mut().enumerate() {
                *l -= t * r[k];
            }
            lam_p += t;
            if t2 <= t1 {
                working.push(Working {
                    index: p,
                    sign,
                    equality,
                });
                lambda.push(lam_p);
                return Ok(());
            }
            let j = block.expect("finite partial step has a blocking row");
            working.remove(j);
            lambda.remove(j);
        }
    };

    for k in 0..cons.m_eq {
        add(k, true, &mut w, &mut working, &mut lambda, &mut iterations)?;
    }
    loop {
        let mut chosen = None;
        for i in 0..m_in {
            let k = cons.m_eq + i;
            if working.iter().any(|wk| wk.index == k) {
                continue;
            }
            let a = problem.a_ineq.row(i);
            let s = (a * &w)[0] - problem.b_ineq[i];
            let tol = 1e-11 * (1.0 + problem.b_ineq[i].abs() + a.norm() * w.norm());
            if s > tol {
                chosen = Some(k);
                break;
            }
        }
        match chosen {
            None => break,
            Some(k) => add(k, false, &mut w, &mut working, &mut lambda, &mut iterations)?,
        }
    }

    let mut sol = assemble_solution(problem, &cons, w, &working, &lambda, iterations);
    if let Some(polished) = polish(problem, &cons, &working, iterations) {
        if problem.kkt_residual(&polished) < problem.kkt_residual(&sol) {
            sol = polished;
        }
    }
    Ok(sol)
}

/// Solves `[H N; Nᵀ 0][z; r] = [n_p; 0]` for the working normals `N`.
fn step_direction(
    h: &Matrix,
    h_inv: &Matrix,
    cons: &Constraints<'_>,
    working: &[Working],
    np: &Vector,
) -> Result<(Vector, Vector)> {
    let n = np.len();
    let k = working.len();
    if k == 0 {
        return Ok((h_inv * np, Vector::zeros(0)));
    }
    let nmat = Matrix::from_fn(n, k, |i, j| working[j].sign * cons.normal(working[j].index)[i]);
    if k >= n {
        // Full working set: the primal step is zero and `N r = n_p`.
        let r = nmat.lu().solve(np).ok_or(Error::Infeasible)?;
        return Ok((Vector::zeros(n), r));
    }
    let mut kkt = Matrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    kkt.view_mut((0, n), (n, k)).copy_from(&nmat);
    kkt.view_mut((n, 0), (k, n)).copy_from(&nmat.transpose());
    let mut rhs = Vector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(np);
    let sol = kkt.lu().solve(&rhs).ok_or(Error::Infeasible)?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

fn assemble_solution(
    problem: &QpProblem,
    cons: &Constraints<'_>,
    w: Vector,
    working: &[Working],
    lambda: &[f64],
    iterations: usize,
) -> QpSolution {
    let mut ineq = Vector::zeros(problem.a_ineq.nrows());
    let mut eq = Vector::zeros(cons.m_eq);
    let mut active = Vec::new();
    for (wk, l) in working.iter().zip(lambda) {
        if wk.equality {
            eq[wk.index] = wk.sign * l;
        } else {
            let i = wk.index - cons.m_eq;
            ineq[i] = *l;
            active.push(i);
        }
    }
    active.sort_unstable();
    QpSolution {
        w,
        active,
        ineq_multipliers: ineq,
        eq_multipliers: eq,
        iterations,
    }
}

/// Re-solves the equality-constrained problem on the final working set.
fn polish(
    problem: &QpProblem,
    cons: &Constraints<'_>,
    working: &[Working],
    iterations: usize,
) -> Option<QpSolution> {
    let n = problem.dim();
    let k = working.len();
    let mut kkt = Matrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.h);
    let mut rhs = Vector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&problem.f));
    for (j, wk) in working.iter().enumerate() {
        let a = cons.normal(wk.index);
        kkt.view_mut((0, n + j), (n, 1)).copy_from(&a);
        kkt.view_mut((n + j, 0), (1, n)).copy_from(&a.transpose());
        rhs[n + j] = cons.rhs(wk.index);
    }
    let sol = kkt.lu().solve(&rhs)?;
    let w = sol.rows(0, n).into_owned();
    let lambda: Vec<f64> = working
        .iter()
        .enumerate()
        .map(|(j, wk)| wk.sign * sol[n + j])
        .collect();
    Some(assemble_solution(problem, cons, w, working, &lambda, iterations))
}

/// Euclidean projection of `y` onto the set.
pub fn project_point(set: &ConvexSet, y: &Vector) -> Result<Vector> {
    set.validate()?;
    check_dim("project_point", set.dim(), y.len())?;
    if let Some((lo, hi)) = set.as_box() {
        if lo.iter().zip(hi.iter()).any(|(l, u)| l > u) {
            return Err(Error::Infeasible);
        }
        return Ok(Vector::from_fn(y.len(), |i, _| y[i].max(lo[i]).min(hi[i])));
    }
    let n = y.len();
    let qp = QpProblem::with_rows(Matrix::identity(n, n), -y, set.rows());
    Ok(qp_solve(&qp)?.w)
}

/// Tangent cone of the set at `x`, as a set of the same kind.
///
/// Row `i` is active when `aᵢᵀx - bᵢ >= -1e-9 (1 + |bᵢ|)`. Fails with
/// [`Error::NotInSet`] when `x` is further than `tol` from the set.
pub fn tangent_cone(set: &ConvexSet, x: &Vector, tol: f64) -> Result<ConvexSet> {
    set.validate()?;
    check_dim("tangent_cone", set.dim(), x.len())?;
    let dist = set.violation(x);
    if dist > tol {
        return Err(Error::NotInSet(dist));
    }
    Ok(cone_unchecked(set, x))
}

fn cone_unchecked(set: &ConvexSet, x: &Vector) -> ConvexSet {
    match set {
        ConvexSet::Box { lower, upper } => {
            let n = x.len();
            let lo = Vector::from_fn(n, |i, _| {
                if lower[i].is_finite() && x[i] - lower[i] <= activity_tol(lower[i]) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            });
            let hi = Vector::from_fn(n, |i, _| {
                if upper[i].is_finite() && upper[i] - x[i] <= activity_tol(upper[i]) {
                    0.0
                } else {
                    f64::INFINITY
                }
            });
            ConvexSet::Box {
                lower: lo,
                upper: hi,
            }
        }
        ConvexSet::NonnegOrthant(n) => {
            let lo = Vector::from_fn(*n, |i, _| {
                if x[i] <= activity_tol(0.0) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            });
            ConvexSet::Box {
                lower: lo,
                upper: Vector::from_element(*n, f64::INFINITY),
            }
        }
        ConvexSet::Polyhedron { a, b } => {
            let active: Vec<usize> = (0..a.nrows())
                .filter(|&i| (a.row(i) * x)[0] - b[i] >= -activity_tol(b[i]))
                .collect();
            let rows = Matrix::from_fn(active.len(), a.ncols(), |i, j| a[(active[i], j)]);
            ConvexSet::Polyhedron {
                a: rows,
                b: Vector::zeros(active.len()),
            }
        }
        ConvexSet::Intersection(parts) => {
            ConvexSet::Intersection(parts.iter().map(|p| cone_unchecked(p, x)).collect())
        }
    }
}

/// Default distance tolerance used when forming tangent cones in flows.
pub const CONE_TOL: f64 = 1e-6;

/// Projection of `v` onto the tangent cone at `x` in the `metric` norm:
/// `argmin_{w in T(x)} (w - v)ᵀ Q(x) (w - v)`.
pub fn project_tangent(set: &ConvexSet, x: &Vector, v: &Vector, metric: &Metric) -> Result<Vector> {
    check_dim("project_tangent", x.len(), v.len())?;
    let cone = tangent_cone(set, x, CONE_TOL)?;
    project_onto_cone(&cone, x, v, metric)
}

pub(crate) fn project_onto_cone(
    cone: &ConvexSet,
    x: &Vector,
    v: &Vector,
    metric: &Metric,
) -> Result<Vector> {
    if metric.is_identity() {
        if let Some((lo, hi)) = cone.as_box() {
            return Ok(Vector::from_fn(v.len(), |i, _| v[i].max(lo[i]).min(hi[i])));
        }
    }
    let rows = cone.rows();
    if rows.is_empty() {
        return Ok(v.clone());
    }
    let q = metric.at(x)?;
    let f = -(&q * v);
    let qp = QpProblem::with_rows(q, f, rows);
    Ok(qp_solve(&qp)?.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn simplex_corner_projection() {
        let set = ConvexSet::Intersection(vec![
            ConvexSet::Polyhedron {
                a: Matrix::from_row_slice(1, 2, &[1.0, 1.0]),
                b: v(&[1.0]),
            },
            ConvexSet::NonnegOrthant(2),
        ]);
        let p = project_point(&set, &v(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(p, v(&[0.5, 0.5]), epsilon = 1e-12);
    }

    #[test]
    fn box_projection_clamps() {
        let set = ConvexSet::boxed(&[-1.0, 0.0], &[1.0, 2.0]);
        let p = project_point(&set, &v(&[3.0, -4.0])).unwrap();
        assert_eq!(p, v(&[1.0, 0.0]));
    }

    #[test]
    fn tangent_projection_on_face() {
        let set = ConvexSet::NonnegOrthant(2);
        let x = v(&[0.0, 1.0]);
        let w = project_tangent(&set, &x, &v(&[-1.0, 2.0]), &Metric::Identity).unwrap();
        assert_eq!(w, v(&[0.0, 2.0]));
        let q = Matrix::from_diagonal(&v(&[1.0, 4.0]));
        let wq = project_tangent(&set, &x, &v(&[-1.0, 2.0]), &Metric::Constant(q.clone())).unwrap();
        let qp = QpProblem::with_rows(
            q.clone(),
            -(&q * v(&[-1.0, 2.0])),
            LinearRows {
                a_ineq: Matrix::from_row_slice(1, 2, &[-1.0, 0.0]),
                b_ineq: v(&[0.0]),
                a_eq: Matrix::zeros(0, 2),
                b_eq: Vector::zeros(0),
            },
        );
        assert_relative_eq!(wq, qp_solve(&qp).unwrap().w, epsilon = 1e-12);
    }

    #[test]
    fn interior_cone_is_identity() {
        let set = ConvexSet::boxed(&[-1.0, -1.0], &[1.0, 1.0]);
        let cone = tangent_cone(&set, &v(&[0.2, -0.3]), 1e-9).unwrap();
        assert!(cone.rows().is_empty());
        let w = project_tangent(&set, &v(&[0.2, -0.3]), &v(&[5.0, -7.0]), &Metric::Identity).unwrap();
        assert_eq!(w, v(&[5.0, -7.0]));
    }

    #[test]
    fn outside_point_rejected() {
        let set = ConvexSet::NonnegOrthant(1);
        assert!(matches!(
            tangent_cone(&set, &v(&[-0.1]), 1e-6),
            Err(Error::NotInSet(_))
        ));
    }

    #[test]
    fn pinned_coordinate_becomes_equality() {
        let set = ConvexSet::boxed(&[0.0, 1.0], &[2.0, 1.0]);
        let rows = set.rows();
        assert_eq!(rows.a_eq.nrows(), 1);
        let w = project_tangent(&set, &v(&[1.0, 1.0]), &v(&[1.0, 3.0]), &Metric::Identity).unwrap();
        assert_eq!(w, v(&[1.0, 0.0]));
    }

    #[test]
    fn infeasible_qp_detected() {
        let qp = QpProblem::with_rows(
            Matrix::identity(1, 1),
            v(&[0.0]),
            LinearRows {
                a_ineq: Matrix::from_row_slice(2, 1, &[1.0, -1.0]),
                b_ineq: v(&[-1.0, -1.0]),
                a_eq: Matrix::zeros(0, 1),
                b_eq: Vector::zeros(0),
            },
        );
        assert_eq!(qp_solve(&qp), Err(Error::Infeasible));
    }

    #[test]
    fn equality_constrained_qp() {
        let qp = QpProblem::with_rows(
            Matrix::identity(2, 2),
            Vector::zeros(2),
            LinearRows {
                a_ineq: Matrix::zeros(0, 2),
                b_ineq: Vector::zeros(0),
                a_eq: Matrix::from_row_slice(1, 2, &[1.0, 1.0]),
                b_eq: v(&[1.0]),
            },
        );
        let sol = qp_solve(&qp).unwrap();
        assert_relative_eq!(sol.w, v(&[0.5, 0.5]), epsilon = 1e-12);
        assert_relative_eq!(sol.eq_multipliers[0], -0.5, epsilon = 1e-12);
        assert!(qp.kkt_residual(&sol) < 1e-12);
    }

    #[test]
    fn non_spd_hessian_rejected() {
        let qp = QpProblem::unconstrained(Matrix::from_diagonal(&v(&[1.0, -1.0])), Vector::zeros(2));
        assert_eq!(qp_solve(&qp), Err(Error::NotSpd));
    }
}
