//! Fixed-step integration of vector fields with optional re-projection.
//!
//! Smooth fields are integrated with RK4; discontinuous fields (projected
//! flows, saddle flows with sign switches) with explicit Euler followed by a
//! projection onto the admissible set, which reproduces projected gradient
//! descent step for step.
//!
//! A step whose trial points leave the field's domain (for instance a barrier
//! evaluated at an infeasible point) is rejected and retried as two half
//! steps, so trajectories of interior-point flows stay interior.

use crate::convex::{project_point, ConvexSet};
use crate::error::{check_dim, Error, Result};
use crate::flows::{ConstraintMap, ScalarField, VectorField};
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    pub method: Method,
    pub dt: f64,
    pub t_end: f64,
    /// Integration stops with [`Status::Diverged`] once `‖x‖` exceeds this.
    pub divergence_radius: f64,
    /// Projection applied after every step.
    pub projection_set: Option<ConvexSet>,
    /// Stop with [`Status::Converged`] once `‖F(t, x)‖ <= tol`.
    pub converge_tol: Option<f64>,
    /// Record every n-th step (the final state is always recorded).
    pub record_every: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            dt: 1e-3,
            t_end: 1.0,
            divergence_radius: 1e6,
            projection_set: None,
            converge_tol: None,
            record_every: 1,
        }
    }
}

impl IntegratorConfig {
    pub fn new(method: Method, dt: f64, t_end: f64) -> Self {
        Self {
            method,
            dt,
            t_end,
            ..Self::default()
        }
    }

    pub fn projected(mut self, set: ConvexSet) -> Self {
        self.projection_set = Some(set);
        self
    }

    pub fn until_converged(mut self, tol: f64) -> Self {
        self.converge_tol = Some(tol);
        self
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.divergence_radius = radius;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    Diverged,
    TimeLimit,
}

/// Sampled trajectory with optional per-coordinate labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub labels: Vec<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, x: Vector) {
        debug_assert!(self.labels.is_empty() || self.labels.len() == x.len(), "row width differs from labels");
        self.times.push(t);
        self.states.push(x);
    }

    pub fn last(&self) -> Option<&Vector> {
        self.states.last()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[i]).collect()
    }

    /// Largest `‖a(t) - b(t)‖∞` over matching samples (by index).
    pub fn sup_gap(&self, other: &Trajectory) -> f64 {
        self.states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Integration {
    pub trajectory: Trajectory,
    pub status: Status,
}

const MAX_HALVINGS: u32 = 30;

fn is_domain(e: &Error) -> bool {
    matches!(e, Error::OutOfDomain(_))
}

struct Stepper<'a, F: VectorField + ?Sized> {
    field: &'a F,
    cfg: &'a IntegratorConfig,
}

impl<F: VectorField + ?Sized> Stepper<'_, F> {
    fn project(&self, x: Vector) -> Result<Vector> {
        match &self.cfg.projection_set {
            Some(set) => project_point(set, &x),
            None => Ok(x),
        }
    }

    /// One step of size `h` from `(t, x)` with `fx = F(t, x)`. Returns the new
    /// state and the field there.
    fn step(&self, t: f64, x: &Vector, fx: &Vector, h: f64) -> Result<(Vector, Vector)> {
        let raw = match self.cfg.method {
            Method::Euler => x + fx * h,
            Method::Rk4 => {
                let k1 = fx;
                let k2 = self.field.eval(t + 0.5 * h, &(x + k1 * (0.5 * h)))?;
                let k3 = self.field.eval(t + 0.5 * h, &(x + &k2 * (0.5 * h)))?;
                let k4 = self.field.eval(t + h, &(x + &k3 * h))?;
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        };
        let next = self.project(raw)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Ok((next.clone(), next));
        }
        let fnext = self.field.eval(t + h, &next)?;
        Ok((next, fnext))
    }

    /// Step of size `h`, split recursively when a trial point is out of domain.
    fn advance(&self, t: f64, x: &Vector, fx: &Vector, h: f64, depth: u32) -> Result<(Vector, Vector)> {
        match self.step(t, x, fx, h) {
            Err(e) if is_domain(&e) && depth < MAX_HALVINGS => {
                let (xm, fm) = self.advance(t, x, fx, 0.5 * h, depth + 1)?;
                self.advance(t + 0.5 * h, &xm, &fm, 0.5 * h, depth + 1)
            }
            other => other,
        }
    }
}

/// Integrates `ẋ = F(t, x)` from `x0` on `[0, t_end]` with fixed step `dt`.
pub fn integrate<F: VectorField + ?Sized>(field: &F, x0: &Vector, cfg: &IntegratorConfig) -> Result<Integration> {
    if !(cfg.dt > 0.0) || !(cfg.t_end >= 0.0) {
        return Err(Error::Config("dt must be positive and t_end nonnegative".into()));
    }
    if let Some(set) = &cfg.projection_set {
        check_dim("projection set", x0.len(), set.dim())?;
    }
    let stepper = Stepper { field, cfg };
    let wrap = |t: f64, e: Error| match e {
        Error::FieldDomain { .. } => e,
        e => Error::FieldDomain {
            t,
            message: e.to_string(),
        },
    };
    let mut x = stepper.project(x0.clone())?;
    let mut fx = field.eval(0.0, &x).map_err(|e| wrap(0.0, e))?;
    check_dim("vector field output", x.len(), fx.len())?;
    let mut traj = Trajectory::default();
    traj.push(0.0, x.clone());
    let steps = (cfg.t_end / cfg.dt - 1e-9).ceil().max(0.0) as usize;
    let every = cfg.record_every.max(1);
    let mut status = Status::TimeLimit;
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let h = (cfg.t_end - t).min(cfg.dt);
        let t_next = if k + 1 == steps { cfg.t_end } else { (k + 1) as f64 * cfg.dt };
        let (xn, fxn) = stepper
            .advance(t, &x, &fx, h, 0)
            .map_err(|e| wrap(t, e))?;
        x = xn;
        fx = fxn;
        let diverged = x.iter().any(|v| !v.is_finite()) || x.norm() > cfg.divergence_radius;
        let converged = !diverged && cfg.converge_tol.is_some_and(|tol| fx.norm() <= tol);
        if diverged || converged || (k + 1) % every == 0 || k + 1 == steps {
            traj.push(t_next, x.clone());
        }
        if diverged {
            status = Status::Diverged;
            break;
        }
        if converged {
            status = Status::Converged;
            break;
        }
    }
    Ok(Integration {
        trajectory: traj,
        status,
    })
}

fn fd_step(x: &Vector) -> f64 {
    1e-5 * (1.0 + x.norm())
}

/// Largest relative discrepancy between `∇Φ(x)` and central differences,
/// `max_i |∇ᵢ - FDᵢ| / (1 + |∇ᵢ|)`.
pub fn check_gradient(phi: &ScalarField, x: &Vector) -> Result<f64> {
    let g = phi.gradient(x)?;
    let d = fd_step(x);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += d;
        xm[i] -= d;
        let fd = (phi.value(&xp)? - phi.value(&xm)?) / (2.0 * d);
        worst = worst.max((g[i] - fd).abs() / (1.0 + g[i].abs()));
    }
    Ok(worst)
}

/// Same check for the Jacobian of a vector map, entrywise.
pub fn check_jacobian(g: &ConstraintMap, x: &Vector) -> Result<f64> {
    let j = g.jacobian(x)?;
    let d = fd_step(x);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += d;
        xm[i] -= d;
        let fd = (g.eval(&xp)? - g.eval(&xm)?) / (2.0 * d);
        for r in 0..fd.len() {
            worst = worst.max((j[(r, i)] - fd[r]).abs() / (1.0 + j[(r, i)].abs()));
        }
    }
    Ok(worst)
}

/// First recorded time after which `‖x(t) - target‖ <= tol` for the rest of
/// the trajectory.
pub fn settle_time(traj: &Trajectory, target: &Vector, tol: f64) -> Option<f64> {
    let mut candidate = None;
    for (t, x) in traj.times.iter().zip(&traj.states) {
        if (x - target).norm() <= tol {
            candidate.get_or_insert(*t);
        } else {
            candidate = None;
        }
    }
    candidate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{barrier_term, gradient_field, GradientMetric, ScalarField};
    use crate::convex::Metric;
    use crate::Matrix;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn rk4_decay() {
        let f = |_: f64, x: &Vector| Ok(-x);
        let out = integrate(&f, &v(&[1.0]), &IntegratorConfig::new(Method::Rk4, 0.01, 1.0)).unwrap();
        let x1 = out.trajectory.last().unwrap()[0];
        assert!((x1 - (-1.0f64).exp()).abs() < 1e-6);
        assert_eq!(out.status, Status::TimeLimit);
        assert_eq!(*out.trajectory.times.last().unwrap(), 1.0);
    }

    #[test]
    fn divergence_detected() {
        let f = |_: f64, x: &Vector| Ok(x * 10.0);
        let out = integrate(&f, &v(&[1.0]), &IntegratorConfig::new(Method::Euler, 0.1, 100.0)).unwrap();
        assert_eq!(out.status, Status::Diverged);
    }

    #[test]
    fn convergence_detected() {
        let f = |_: f64, x: &Vector| Ok(-x);
        let cfg = IntegratorConfig::new(Method::Rk4, 0.1, 100.0).until_converged(1e-8);
        let out = integrate(&f, &v(&[1.0]), &cfg).unwrap();
        assert_eq!(out.status, Status::Converged);
        assert!(*out.trajectory.times.last().unwrap() < 100.0);
    }

    #[test]
    fn settle_time_of_decay() {
        let f = |_: f64, x: &Vector| Ok(-x);
        let out = integrate(&f, &v(&[1.0]), &IntegratorConfig::new(Method::Rk4, 0.001, 3.0)).unwrap();
        let ts = settle_time(&out.trajectory, &v(&[0.0]), (-1.0f64).exp()).unwrap();
        assert!((ts - 1.0).abs() < 2e-3);
        assert_eq!(settle_time(&out.trajectory, &v(&[5.0]), 0.1), None);
    }

    #[test]
    fn domain_error_reports_time() {
        let f = |t: f64, x: &Vector| {
            if t > 0.5 {
                Err(Error::Config("boom".into()))
            } else {
                Ok(-x)
            }
        };
        match integrate(&f, &v(&[1.0]), &IntegratorConfig::new(Method::Euler, 0.1, 1.0)) {
            Err(Error::FieldDomain { t, .. }) => assert!((t - 0.5).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn barrier_flow_stays_interior() {
        // Φ = ½(x - 2)², barrier on x - 1 <= 0 with a coarse step that would overshoot.
        let phi = ScalarField::quadratic(Matrix::identity(1, 1), v(&[2.0]));
        let g = crate::flows::ConstraintMap::affine(Matrix::identity(1, 1), v(&[1.0]));
        let total = phi.add(&barrier_term(&g, 10.0));
        let field = gradient_field(&total, GradientMetric::Fixed(Metric::Identity)).unwrap();
        let out = integrate(&field, &v(&[0.0]), &IntegratorConfig::new(Method::Euler, 0.5, 20.0)).unwrap();
        assert!(out.trajectory.states.iter().all(|x| x[0] < 1.0));
    }

    #[test]
    fn gradient_check_detects_error() {
        let good = ScalarField::new(1, |x| Ok(x[0].sin()), |x| Ok(v(&[x[0].cos()])));
        let bad = ScalarField::new(1, |x| Ok(x[0].sin()), |x| Ok(v(&[1.1 * x[0].cos()])));
        assert!(check_gradient(&good, &v(&[0.3])).unwrap() < 1e-9);
        assert!(check_gradient(&bad, &v(&[0.3])).unwrap() > 1e-2);
    }
}
