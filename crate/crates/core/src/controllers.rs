//! Feedback optimization controllers.
//!
//! A [`FeedbackProblem`] describes `min Φ(u, y)` subject to `u ∈ U`,
//! `g(u, y) <= 0` and the steady-state plant `y = h(u) + d`. Controllers only
//! use measurements `y` and the sensitivity `∇h(u)`; they never evaluate `h`.
//!
//! Continuous-time controllers implement [`ContinuousController`] and are
//! closed with a plant through [`ClosedLoop`]; sampled controllers implement
//! [`DiscreteController`] and are run by [`run_sampled`].
//!
//! Metrics in controllers are inner products: the unconstrained step is
//! `-Q⁻¹ H_dᵀ ∇Φ` with `H_d = [I; ∇h]`, and projections use the `Q` norm.

use serde::{Deserialize, Serialize};

use crate::convex::{
    project_point, project_tangent, qp_solve, spd_inverse, vcat, vstack, ConvexSet, LinearRows,
    Metric, QpProblem,
};
use crate::error::{check_dim, Error, Result};
use crate::flows::{ConstraintMap, ScalarField, VectorField};
use crate::plants::{estimate_sensitivity, DynamicPlant, Plant, Signal, SteadyStateMap};
use crate::sim::{integrate, Integration, IntegratorConfig, Status, Trajectory};
use crate::{Matrix, Vector};

/// Origin of the sensitivity used by a controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivitySource {
    UserSupplied,
    Exact,
    FiniteDifference,
}

/// Available sensitivity information. Precedence: user-supplied matrix, then
/// exact map, then settled finite differences of a dynamic plant.
#[derive(Debug, Clone, Default)]
pub struct SensitivitySpec {
    pub matrix: Option<Matrix>,
    pub exact: Option<SteadyStateMap>,
    pub plant: Option<DynamicPlant>,
}

impl SensitivitySpec {
    pub fn constant(m: Matrix) -> Self {
        Self {
            matrix: Some(m),
            ..Self::default()
        }
    }

    pub fn exact(map: SteadyStateMap) -> Self {
        Self {
            exact: Some(map),
            ..Self::default()
        }
    }

    pub fn estimated(plant: DynamicPlant) -> Self {
        Self {
            plant: Some(plant),
            ..Self::default()
        }
    }

    pub fn source(&self) -> Result<SensitivitySource> {
        if self.matrix.is_some() {
            Ok(SensitivitySource::UserSupplied)
        } else if self.exact.is_some() {
            Ok(SensitivitySource::Exact)
        } else if self.plant.is_some() {
            Ok(SensitivitySource::FiniteDifference)
        } else {
            Err(Error::Config("no sensitivity source available".into()))
        }
    }

    pub fn at(&self, u: &Vector) -> Result<Matrix> {
        match self.source()? {
            SensitivitySource::UserSupplied => Ok(self.matrix.clone().expect("checked")),
            SensitivitySource::Exact => self.exact.as_ref().expect("checked").sensitivity(u),
            SensitivitySource::FiniteDifference => {
                estimate_sensitivity(self.plant.as_ref().expect("checked"), u)
            }
        }
    }
}

/// Steady-state optimization problem solved in closed loop.
#[derive(Debug, Clone)]
pub struct FeedbackProblem {
    pub input_dim: usize,
    pub output_dim: usize,
    /// `Φ(u, y)` on the stacked vector `[u; y]`.
    pub cost: ScalarField,
    /// `g(u, y) <= 0` on `[u; y]`.
    pub constraints: Option<ConstraintMap>,
    pub input_set: ConvexSet,
    pub sensitivity: SensitivitySpec,
}

pub(crate) fn stack(u: &Vector, y: &Vector) -> Vector {
    vcat(u, y)
}

/// `H_d = [I; ∇h]`.
pub fn output_augmented(grad_h: &Matrix) -> Matrix {
    let p = grad_h.ncols();
    vstack(&Matrix::identity(p, p), grad_h)
}

impl FeedbackProblem {
    pub fn new(cost: ScalarField, input_dim: usize, output_dim: usize, sensitivity: SensitivitySpec) -> Result<Self> {
        check_dim("cost on [u; y]", input_dim + output_dim, cost.dim)?;
        Ok(Self {
            input_dim,
            output_dim,
            cost,
            constraints: None,
            input_set: ConvexSet::whole_space(input_dim),
            sensitivity,
        })
    }

    /// Problem whose cost depends on the output only.
    pub fn output_cost(phi: &ScalarField, input_dim: usize, sensitivity: SensitivitySpec) -> Result<Self> {
        let q = phi.dim;
        let p = input_dim;
        let mut select = Matrix::zeros(q, p + q);
        select.view_mut((0, p), (q, q)).copy_from(&Matrix::identity(q, q));
        Self::new(phi.compose_affine(select, Vector::zeros(q)), p, q, sensitivity)
    }

    pub fn with_input_set(mut self, set: ConvexSet) -> Result<Self> {
        check_dim("input set", self.input_dim, set.dim())?;
        self.input_set = set;
        Ok(self)
    }

    pub fn with_constraints(mut self, g: ConstraintMap) -> Result<Self> {
        check_dim("constraints on [u; y]", self.input_dim + self.output_dim, g.dim_in)?;
        self.constraints = Some(g);
        Ok(self)
    }

    pub fn constraint_dim(&self) -> usize {
        self.constraints.as_ref().map_or(0, |g| g.dim_out)
    }

    /// `H_dᵀ ∇Φ(u, y) = ∇_uΦ + ∇hᵀ ∇_yΦ`.
    pub fn reduced_gradient(&self, u: &Vector, y: &Vector, grad_h: &Matrix) -> Result<Vector> {
        let g = self.cost.gradient(&stack(u, y))?;
        Ok(output_augmented(grad_h).transpose() * g)
    }

    /// Constraint values `g(u, y)` and the reduced Jacobian `∇_u g + ∇_y g ∇h`.
    pub fn reduced_constraints(&self, u: &Vector, y: &Vector, grad_h: &Matrix) -> Result<(Vector, Matrix)> {
        match &self.constraints {
            None => Ok((Vector::zeros(0), Matrix::zeros(0, self.input_dim))),
            Some(g) => {
                let z = stack(u, y);
                Ok((g.eval(&z)?, g.jacobian(&z)? * output_augmented(grad_h)))
            }
        }
    }

    /// Augmented gradient `H_dᵀ (∇Φ + ∇gᵀ (μ + ρ max(g, 0)))`.
    pub fn saddle_gradient(&self, u: &Vector, y: &Vector, mu: &Vector, rho: f64, grad_h: &Matrix) -> Result<Vector> {
        let z = stack(u, y);
        let mut g_full = self.cost.gradient(&z)?;
        if let Some(g) = &self.constraints {
            let gv = g.eval(&z)?;
            g_full += g.jacobian(&z)?.transpose() * (mu + gv.map(|e| e.max(0.0)) * rho);
        }
        Ok(output_augmented(grad_h).transpose() * g_full)
    }

    /// Largest positive constraint value `max(g(u, y), 0)`, componentwise.
    pub fn violations(&self, u: &Vector, y: &Vector) -> Result<Vector> {
        match &self.constraints {
            None => Ok(Vector::zeros(0)),
            Some(g) => Ok(g.eval(&stack(u, y))?.map(|e| e.max(0.0))),
        }
    }

    /// First-order optimality residual of the reduced problem at `u`.
    ///
    /// Multipliers are fitted by a nonnegative least-squares QP that also
    /// penalizes complementarity, so no activity threshold is needed.
    pub fn kkt_residual(&self, u: &Vector, y: &Vector, grad_h: &Matrix) -> Result<f64> {
        let grad = self.reduced_gradient(u, y, grad_h)?;
        let (gv, gj) = self.reduced_constraints(u, y, grad_h)?;
        let rows = self.input_set.rows();
        let ci = vcat(&(&rows.a_ineq * u - &rows.b_ineq), &gv);
        let ni = vstack(&rows.a_ineq, &gj);
        let ce = &rows.a_eq * u - &rows.b_eq;
        let ne = rows.a_eq.clone();
        let (mi, me) = (ni.nrows(), ne.nrows());
        let all = vstack(&ni, &ne);
        let k = mi + me;
        let mut residual = ci.iter().fold(0.0f64, |r, &c| r.max(c)).max(ce.amax_or_zero());
        if k == 0 {
            return Ok(residual.max(grad.amax()));
        }
        let mut h = &all * all.transpose();
        for i in 0..mi {
            h[(i, i)] += ci[i] * ci[i];
        }
        h += Matrix::identity(k, k) * 1e-12;
        let f = &all * &grad;
        let mut a_ineq = Matrix::zeros(mi, k);
        for i in 0..mi {
            a_ineq[(i, i)] = -1.0;
        }
        let qp = QpProblem::with_rows(
            h,
            f,
            LinearRows {
                a_ineq,
                b_ineq: Vector::zeros(mi),
                a_eq: Matrix::zeros(0, k),
                b_eq: Vector::zeros(0),
            },
        );
        let lam = qp_solve(&qp)?.w;
        let stat = &grad + all.transpose() * &lam;
        residual = residual.max(stat.amax());
        for i in 0..mi {
            residual = residual.max((lam[i] * ci[i]).abs());
        }
        Ok(residual)
    }
}

trait AmaxOrZero {
    fn amax_or_zero(&self) -> f64;
}

impl AmaxOrZero for Vector {
    fn amax_or_zero(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.amax()
        }
    }
}

/// Controller state: inputs, duals and any auxiliary variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub u: Vector,
    pub mu: Vector,
    pub aux: Vector,
}

/// Metric used by saddle and LOP controllers.
#[derive(Debug, Clone)]
pub enum ControllerMetric {
    Identity,
    Fixed(Metric),
    /// `H_dᵀ H_d + σ I = I + ∇hᵀ∇h + σ I`.
    OutputWeighted { sigma: f64 },
}

impl Default for ControllerMetric {
    fn default() -> Self {
        ControllerMetric::OutputWeighted { sigma: 1e-6 }
    }
}

impl ControllerMetric {
    pub fn at(&self, u: &Vector, grad_h: &Matrix) -> Result<Matrix> {
        let p = u.len();
        match self {
            ControllerMetric::Identity => Ok(Matrix::identity(p, p)),
            ControllerMetric::Fixed(m) => m.at(u),
            ControllerMetric::OutputWeighted { sigma } => {
                let hd = output_augmented(grad_h);
                Ok(hd.transpose() * hd + Matrix::identity(p, p) * *sigma)
            }
        }
    }
}

/// Continuous-time controller `ċ = κ(t, c, y)` driving the plant with `u(t, c)`.
pub trait ContinuousController {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn plant_input(&self, t: f64, state: &Vector) -> Result<Vector>;
    fn derivative(&self, t: f64, state: &Vector, y: &Vector) -> Result<Vector>;
    /// Set the controller state is re-projected onto after each Euler step.
    fn state_set(&self) -> Option<ConvexSet> {
        None
    }
}

/// Sampled controller `c⁺ = κ(t, c, y)`.
pub trait DiscreteController {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn plant_input(&self, state: &Vector) -> Result<Vector>;
    fn update(&self, t: f64, state: &Vector, y: &Vector) -> Result<Vector>;
}

/// Plant in feedback with a continuous controller; state `[ζ; c]`.
pub struct ClosedLoop<'a, C: ContinuousController + ?Sized> {
    pub plant: &'a Plant,
    pub controller: &'a C,
}

impl<C: ContinuousController + ?Sized> ClosedLoop<'_, C> {
    fn split(&self, z: &Vector) -> (Vector, Vector) {
        let n = self.plant.state_dim();
        (z.rows(0, n).into_owned(), z.rows(n, z.len() - n).into_owned())
    }

    /// Applied input and measured output at `(t, z)`.
    pub fn measure(&self, t: f64, z: &Vector) -> Result<(Vector, Vector)> {
        let (zeta, c) = self.split(z);
        let u = self.controller.plant_input(t, &c)?;
        let y = match self.plant {
            Plant::Dynamic(p) => p.output(&zeta, &u, t)?,
            Plant::Algebraic { map, disturbance } => map.eval(&u)? + disturbance.at(t),
        };
        Ok((u, y))
    }

    /// Set for re-projection of the full state.
    pub fn state_set(&self) -> Option<ConvexSet> {
        self.controller.state_set().map(|s| {
            ConvexSet::product(&[ConvexSet::whole_space(self.plant.state_dim()), s])
        })
    }
}

impl<C: ContinuousController + ?Sized> VectorField for ClosedLoop<'_, C> {
    fn eval(&self, t: f64, z: &Vector) -> Result<Vector> {
        let (zeta, c) = self.split(z);
        let (u, y) = self.measure(t, z)?;
        let dc = self.controller.derivative(t, &c, &y)?;
        let dzeta = match self.plant {
            Plant::Dynamic(p) => p.dynamics(&zeta, &u)?,
            Plant::Algebraic { .. } => Vector::zeros(0),
        };
        Ok(vcat(&dzeta, &dc))
    }
}

/// Closed-loop simulation of a continuous controller.
///
/// `plant_state0` defaults to the origin. The integrator's projection set is
/// replaced by the controller's state set when it has one.
pub fn simulate<C: ContinuousController + ?Sized>(
    plant: &Plant,
    controller: &C,
    controller_state0: &Vector,
    plant_state0: Option<&Vector>,
    cfg: &IntegratorConfig,
) -> Result<Integration> {
    check_dim("controller state", controller.state_dim(), controller_state0.len())?;
    check_dim("controller input", plant.input_dim(), controller.input_dim())?;
    let zeta0 = plant_state0.cloned().unwrap_or_else(|| Vector::zeros(plant.state_dim()));
    check_dim("plant state", plant.state_dim(), zeta0.len())?;
    let lp = ClosedLoop { plant, controller };
    let mut cfg = cfg.clone();
    if let Some(set) = lp.state_set() {
        cfg.projection_set = Some(set);
    }
    integrate(&lp, &vcat(&zeta0, controller_state0), &cfg)
}

/// Sampled run of a discrete controller on a plant.
///
/// Between samples the plant is integrated with RK4 at `substep` (ignored for
/// algebraic plants). Returns controller states at every sample.
pub fn run_sampled<C: DiscreteController + ?Sized>(
    plant: &Plant,
    controller: &C,
    state0: &Vector,
    period: f64,
    samples: usize,
    substep: f64,
) -> Result<(Trajectory, Status)> {
    check_dim("controller state", controller.state_dim(), state0.len())?;
    let mut traj = Trajectory::default();
    let mut c = state0.clone();
    let mut zeta = Vector::zeros(plant.state_dim());
    traj.push(0.0, c.clone());
    for k in 0..samples {
        let t = k as f64 * period;
        let u = controller.plant_input(&c)?;
        let y = match plant {
            Plant::Algebraic { map, disturbance } => map.eval(&u)? + disturbance.at(t),
            Plant::Dynamic(p) => p.output(&zeta, &u, t)?,
        };
        c = controller.update(t, &c, &y)?;
        if let Plant::Dynamic(p) = plant {
            let u_next = controller.plant_input(&c)?;
            let f = |_: f64, z: &Vector| p.dynamics(z, &u_next);
            let run = integrate(&f, &zeta, &IntegratorConfig::new(crate::sim::Method::Rk4, substep, period))?;
            zeta = run.trajectory.last().expect("nonempty").clone();
        }
        traj.push(t + period, c.clone());
        if !c.iter().all(|v| v.is_finite()) || c.norm() > 1e6 {
            return Ok((traj, Status::Diverged));
        }
    }
    Ok((traj, Status::TimeLimit))
}

/// `u̇ = Π_U[-ε H_dᵀ ∇Φ(u, y)]`.
#[derive(Debug, Clone)]
pub struct GradientFeedback {
    pub problem: FeedbackProblem,
    pub gain: f64,
}

pub fn gradient_feedback(problem: FeedbackProblem, gain: f64) -> GradientFeedback {
    GradientFeedback { problem, gain }
}

impl GradientFeedback {
    pub fn sensitivity_source(&self) -> Result<SensitivitySource> {
        self.problem.sensitivity.source()
    }

    fn constrained(&self) -> bool {
        !self.problem.input_set.rows().is_empty()
    }
}

impl ContinuousController for GradientFeedback {
    fn state_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn input_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn plant_input(&self, _t: f64, state: &Vector) -> Result<Vector> {
        Ok(state.clone())
    }
    fn derivative(&self, _t: f64, u: &Vector, y: &Vector) -> Result<Vector> {
        let gh = self.problem.sensitivity.at(u)?;
        let v = -self.problem.reduced_gradient(u, y, &gh)? * self.gain;
        if self.constrained() {
            project_tangent(&self.problem.input_set, u, &v, &Metric::Identity)
        } else {
            Ok(v)
        }
    }
    fn state_set(&self) -> Option<ConvexSet> {
        self.constrained().then(|| self.problem.input_set.clone())
    }
}

/// Gradient feedback for a time-varying disturbance; identical dynamics.
pub fn running_tv_controller(problem: FeedbackProblem, gain: f64) -> GradientFeedback {
    gradient_feedback(problem, gain)
}

/// Asymptotic tracking-error bound `ℓ / (ε β)` of the running controller for
/// an optimizer that moves at rate `ℓ` and a `β`-strongly convex cost.
pub fn tracking_error_bound(ell: f64, beta: f64, gain: f64) -> f64 {
    ell / (gain * beta)
}

/// `u̇ = -ε ∇hᵀ ∇_yΦ - ∇hᵀ ∇²_yyΦ ḋ(t)`.
#[derive(Debug, Clone)]
pub struct PredictiveTv {
    pub problem: FeedbackProblem,
    pub gain: f64,
    pub disturbance: Signal,
}

pub fn predictive_tv_controller(problem: FeedbackProblem, gain: f64, disturbance: Signal) -> Result<PredictiveTv> {
    if !problem.cost.has_hessian() {
        return Err(Error::Config("predictive controller needs the cost Hessian".into()));
    }
    check_dim("disturbance", problem.output_dim, disturbance.dim())?;
    Ok(PredictiveTv {
        problem,
        gain,
        disturbance,
    })
}

impl ContinuousController for PredictiveTv {
    fn state_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn input_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn plant_input(&self, _t: f64, state: &Vector) -> Result<Vector> {
        Ok(state.clone())
    }
    fn derivative(&self, t: f64, u: &Vector, y: &Vector) -> Result<Vector> {
        let p = self.problem.input_dim;
        let q = self.problem.output_dim;
        let gh = self.problem.sensitivity.at(u)?;
        let grad = self.problem.reduced_gradient(u, y, &gh)?;
        let hess = self.problem.cost.hessian(&stack(u, y)).expect("checked")?;
        let hyy = hess.view((p, p), (q, q)).into_owned();
        let ff = gh.transpose() * hyy * self.disturbance.rate(t);
        Ok(-grad * self.gain - ff)
    }
}

/// Dither-based extremum seeking for a scalar input:
/// `ũ = u + 2a sin(ωt)`, `u̇ = -(ε/a) Φ(y) sin(ωt)`.
#[derive(Debug, Clone)]
pub struct ExtremumSeeking {
    pub cost: ScalarField,
    pub amplitude: f64,
    pub frequency: f64,
    pub gain: f64,
}

pub fn extremum_seeking(
    cost: ScalarField,
    input_dim: usize,
    amplitude: f64,
    frequency: f64,
    gain: f64,
) -> Result<ExtremumSeeking> {
    if input_dim != 1 {
        return Err(Error::NonScalarInput);
    }
    Ok(ExtremumSeeking {
        cost,
        amplitude,
        frequency,
        gain,
    })
}

impl ContinuousController for ExtremumSeeking {
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn plant_input(&self, t: f64, state: &Vector) -> Result<Vector> {
        Ok(state.add_scalar(2.0 * self.amplitude * (self.frequency * t).sin()))
    }
    fn derivative(&self, t: f64, _state: &Vector, y: &Vector) -> Result<Vector> {
        let phi = self.cost.value(y)?;
        Ok(Vector::from_element(
            1,
            -(self.gain / self.amplitude) * phi * (self.frequency * t).sin(),
        ))
    }
}

/// `u̇ = -ε H_d(ū)ᵀ ∇Φ(ū, y) - (u - ū)/K` with `ū = P_U(u)` applied to the plant.
#[derive(Debug, Clone)]
pub struct AntiWindup {
    pub problem: FeedbackProblem,
    pub gain: f64,
    pub k_aw: f64,
}

pub fn anti_windup_gradient(problem: FeedbackProblem, gain: f64, k_aw: f64) -> Result<AntiWindup> {
    if !(k_aw > 0.0) {
        return Err(Error::Config("anti-windup gain K must be positive".into()));
    }
    Ok(AntiWindup { problem, gain, k_aw })
}

impl ContinuousController for AntiWindup {
    fn state_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn input_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn plant_input(&self, _t: f64, state: &Vector) -> Result<Vector> {
        project_point(&self.problem.input_set, state)
    }
    fn derivative(&self, _t: f64, u: &Vector, y: &Vector) -> Result<Vector> {
        let ub = project_point(&self.problem.input_set, u)?;
        let gh = self.problem.sensitivity.at(&ub)?;
        let grad = self.problem.reduced_gradient(&ub, y, &gh)?;
        Ok(-grad * self.gain - (u - ub) / self.k_aw)
    }
}

/// Projected primal-dual controller on `[u; μ]`:
///
/// ```text
/// u̇ = Π_U[-ε Q⁻¹ H_dᵀ (∇Φ + ∇gᵀ(μ + ρ max(g, 0)))]
/// μ̇ = κ Π_{≥0}[g(u, y)]
/// ```
#[derive(Debug, Clone)]
pub struct SaddleFeedback {
    pub problem: FeedbackProblem,
    pub gain: f64,
    pub rho: f64,
    pub dual_gain: f64,
    pub metric: ControllerMetric,
}

pub fn saddle_feedback(problem: FeedbackProblem, gain: f64, rho: f64) -> SaddleFeedback {
    SaddleFeedback {
        problem,
        gain,
        rho,
        dual_gain: 1.0,
        metric: ControllerMetric::default(),
    }
}

impl SaddleFeedback {
    pub fn with_metric(mut self, metric: ControllerMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_dual_gain(mut self, k: f64) -> Self {
        self.dual_gain = k;
        self
    }

    pub fn split(&self, state: &Vector) -> ControllerState {
        let p = self.problem.input_dim;
        ControllerState {
            u: state.rows(0, p).into_owned(),
            mu: state.rows(p, state.len() - p).into_owned(),
            aux: Vector::zeros(0),
        }
    }

    fn full_set(&self) -> ConvexSet {
        ConvexSet::product(&[
            self.problem.input_set.clone(),
            ConvexSet::NonnegOrthant(self.problem.constraint_dim()),
        ])
    }

    fn velocity(&self, state: &Vector, y: &Vector) -> Result<Vector> {
        let s = self.split(state);
        if s.mu.iter().any(|&m| m < 0.0) {
            return Err(Error::NegativeDual);
        }
        let gh = self.problem.sensitivity.at(&s.u)?;
        let grad = self.problem.saddle_gradient(&s.u, y, &s.mu, self.rho, &gh)?;
        let q = self.metric.at(&s.u, &gh)?;
        let v = -(spd_inverse(&q)? * grad) * self.gain;
        let du = project_tangent(&self.problem.input_set, &s.u, &v, &Metric::Constant(q))?;
        let (gv, _) = self.problem.reduced_constraints(&s.u, y, &gh)?;
        let dmu = project_tangent(
            &ConvexSet::NonnegOrthant(gv.len()),
            &s.mu,
            &(gv * self.dual_gain),
            &Metric::Identity,
        )?;
        Ok(vcat(&du, &dmu))
    }
}

impl ContinuousController for SaddleFeedback {
    fn state_dim(&self) -> usize {
        self.problem.input_dim + self.problem.constraint_dim()
    }
    fn input_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn plant_input(&self, _t: f64, state: &Vector) -> Result<Vector> {
        Ok(state.rows(0, self.problem.input_dim).into_owned())
    }
    fn derivative(&self, _t: f64, state: &Vector, y: &Vector) -> Result<Vector> {
        self.velocity(state, y)
    }
    fn state_set(&self) -> Option<ConvexSet> {
        Some(self.full_set())
    }
}

/// Explicit Euler discretization of [`SaddleFeedback`] with step `alpha`.
#[derive(Debug, Clone)]
pub struct SampledSaddle {
    pub inner: SaddleFeedback,
    pub alpha: f64,
}

impl DiscreteController for SampledSaddle {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.inner.problem.input_dim
    }
    fn plant_input(&self, state: &Vector) -> Result<Vector> {
        Ok(state.rows(0, self.inner.problem.input_dim).into_owned())
    }
    fn update(&self, _t: f64, state: &Vector, y: &Vector) -> Result<Vector> {
        let v = self.inner.velocity(state, y)?;
        project_point(&self.inner.full_set(), &(state + v * self.alpha))
    }
}

/// Slack penalty weight of the elastic LOP step.
pub const ELASTIC_WEIGHT: f64 = 1e4;

/// Linearized output-constrained projection (LOP) controller:
/// `u⁺ = u + α σ(u, y)` where `σ` solves
///
/// ```text
/// min  ‖w + Q⁻¹ H_dᵀ ∇Φ‖²_Q
/// s.t. u + α w ∈ U,   g(u, y) + α Ĵ w <= 0
/// ```
///
/// with `Ĵ = ∇_u g + ∇_y g ∇h`. When the linearized output rows are
/// infeasible, they are relaxed by nonnegative slacks penalized at
/// [`ELASTIC_WEIGHT`].
#[derive(Debug, Clone)]
pub struct Lop {
    pub problem: FeedbackProblem,
    pub alpha: f64,
    pub metric: ControllerMetric,
}

/// Result of one LOP step.
#[derive(Debug, Clone, PartialEq)]
pub struct LopStep {
    pub direction: Vector,
    pub elastic: bool,
}

pub fn lop_controller(problem: FeedbackProblem, alpha: f64) -> Lop {
    Lop {
        problem,
        alpha,
        metric: ControllerMetric::default(),
    }
}

impl Lop {
    pub fn with_metric(mut self, metric: ControllerMetric) -> Self {
        self.metric = metric;
        self
    }

    /// Step direction `σ(u, y)`.
    pub fn step(&self, u: &Vector, y: &Vector) -> Result<LopStep> {
        let p = self.problem.input_dim;
        let a = self.alpha;
        let gh = self.problem.sensitivity.at(u)?;
        let q = self.metric.at(u, &gh)?;
        let f = self.problem.reduced_gradient(u, y, &gh)?;
        let rows = self.problem.input_set.rows();
        let (gv, gj) = self.problem.reduced_constraints(u, y, &gh)?;
        let input_ineq = &rows.a_ineq * a;
        let input_rhs = &rows.b_ineq - &rows.a_ineq * u;
        let eq = LinearRows {
            a_ineq: vstack(&input_ineq, &(&gj * a)),
            b_ineq: vcat(&input_rhs, &(-&gv)),
            a_eq: &rows.a_eq * a,
            b_eq: &rows.b_eq - &rows.a_eq * u,
        };
        match qp_solve(&QpProblem::with_rows(q.clone(), f.clone(), eq)) {
            Ok(sol) => Ok(LopStep {
                direction: sol.w,
                elastic: false,
            }),
            Err(Error::Infeasible) => {
                let m = gv.len();
                let n = p + m;
                let mut h = Matrix::zeros(n, n);
                h.view_mut((0, 0), (p, p)).copy_from(&q);
                h.view_mut((p, p), (m, m)).copy_from(&(Matrix::identity(m, m) * (2.0 * ELASTIC_WEIGHT)));
                let mut ff = Vector::zeros(n);
                ff.rows_mut(0, p).copy_from(&f);
                let pad = |mat: &Matrix, slack: f64| {
                    let mut out = Matrix::zeros(mat.nrows(), n);
                    out.view_mut((0, 0), (mat.nrows(), p)).copy_from(mat);
                    if slack != 0.0 {
                        out.view_mut((0, p), (m, m)).copy_from(&(Matrix::identity(m, m) * slack));
                    }
                    out
                };
                let mut slack_sign = Matrix::zeros(m, n);
                slack_sign.view_mut((0, p), (m, m)).copy_from(&(-Matrix::identity(m, m)));
                let rows = LinearRows {
                    a_ineq: vstack(&vstack(&pad(&input_ineq, 0.0), &pad(&(&gj * a), -1.0)), &slack_sign),
                    b_ineq: vcat(&vcat(&input_rhs, &(-&gv)), &Vector::zeros(m)),
                    a_eq: pad(&(&rows.a_eq * a), 0.0),
                    b_eq: &rows.b_eq - &rows.a_eq * u,
                };
                let sol = qp_solve(&QpProblem::with_rows(h, ff, rows)).map_err(|e| match e {
                    Error::Infeasible => Error::QpInfeasible,
                    e => e,
                })?;
                Ok(LopStep {
                    direction: sol.w.rows(0, p).into_owned(),
                    elastic: true,
                })
            }
            Err(e) => Err(e),
        }
    }
}

impl DiscreteController for Lop {
    fn state_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn input_dim(&self) -> usize {
        self.problem.input_dim
    }
    fn plant_input(&self, state: &Vector) -> Result<Vector> {
        Ok(state.clone())
    }
    fn update(&self, _t: f64, u: &Vector, y: &Vector) -> Result<Vector> {
        Ok(u + self.step(u, y)?.direction * self.alpha)
    }
}

/// Iterative modifier adaptation:
///
/// ```text
/// u_k     = argmin_{u ∈ U} Φ(h̃(u) + d̃) + λ_kᵀ u
/// λ_{k+1} = (1 - κ) λ_k + κ (∇Φ̃(u_k) - ∇Φ̃'(u_k))
/// ```
///
/// where `∇Φ̃` uses the measured output and plant sensitivity and `∇Φ̃'` the model.
#[derive(Debug, Clone)]
pub struct ModifierAdaptation {
    pub cost: ScalarField,
    pub model: SteadyStateMap,
    pub model_disturbance: Vector,
    pub plant_sensitivity: SensitivitySpec,
    pub input_set: ConvexSet,
    pub filter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModifierRun {
    pub inputs: Vec<Vector>,
    pub modifiers: Vec<Vector>,
    pub status: Status,
}

pub fn modifier_adaptation(
    cost: ScalarField,
    model: SteadyStateMap,
    model_disturbance: Vector,
    plant_sensitivity: SensitivitySpec,
    filter: f64,
) -> Result<ModifierAdaptation> {
    check_dim("cost on outputs", model.output_dim, cost.dim)?;
    check_dim("model disturbance", model.output_dim, model_disturbance.len())?;
    if !(filter > 0.0 && filter <= 1.0) {
        return Err(Error::Config("filter gain must lie in (0, 1]".into()));
    }
    let p = model.input_dim;
    Ok(ModifierAdaptation {
        cost,
        model,
        model_disturbance,
        plant_sensitivity,
        input_set: ConvexSet::whole_space(p),
        filter,
    })
}

impl ModifierAdaptation {
    fn model_cost(&self, u: &Vector, lambda: &Vector) -> Result<f64> {
        Ok(self.cost.value(&(self.model.eval(u)? + &self.model_disturbance))? + lambda.dot(u))
    }

    /// `∇Φ̃'(u)` for the model.
    pub fn model_gradient(&self, u: &Vector) -> Result<Vector> {
        let y = self.model.eval(u)? + &self.model_disturbance;
        Ok(self.model.sensitivity(u)?.transpose() * self.cost.gradient(&y)?)
    }

    /// Inner model-based solve: projected Newton with a finite-difference
    /// Hessian of the model gradient and backtracking.
    pub fn solve_model(&self, lambda: &Vector, start: &Vector) -> Result<Vector> {
        let p = start.len();
        let mut u = project_point(&self.input_set, start)?;
        for _ in 0..200 {
            let g = self.model_gradient(&u)? + lambda;
            let step = 1e-6 * (1.0 + u.amax());
            let mut hess = Matrix::zeros(p, p);
            for j in 0..p {
                let mut up = u.clone();
                let mut um = u.clone();
                up[j] += step;
                um[j] -= step;
                hess.set_column(j, &((self.model_gradient(&up)? - self.model_gradient(&um)?) / (2.0 * step)));
            }
            hess = (&hess + hess.transpose()) * 0.5;
            let dir = hess.clone().cholesky().map_or_else(|| -&g, |c| -c.solve(&g));
            let f0 = self.model_cost(&u, lambda)?;
            let mut t = 1.0;
            let mut next = None;
            for _ in 0..40 {
                let cand = project_point(&self.input_set, &(&u + &dir * t))?;
                if self.model_cost(&cand, lambda)? <= f0 - 1e-12 * (cand.clone() - &u).norm_squared() {
                    next = Some(cand);
                    break;
                }
                t *= 0.5;
            }
            let Some(cand) = next else {
                return Ok(u);
            };
            let moved = (&cand - &u).amax();
            u = cand;
            if moved <= 1e-14 * (1.0 + u.amax()) {
                return Ok(u);
            }
        }
        let g = self.model_gradient(&u)? + lambda;
        let stat = project_point(&self.input_set, &(&u - &g))? - &u;
        if stat.amax() <= 1e-8 {
            Ok(u)
        } else {
            Err(Error::InnerSolveFailed(format!("stationarity {:.3e}", stat.amax())))
        }
    }

    /// Runs the iteration against a static plant `y = h(u) + d`.
    pub fn run(&self, plant: &Plant, lambda0: &Vector, max_iter: usize, tol: f64) -> Result<ModifierRun> {
        let Plant::Algebraic { map, disturbance } = plant else {
            return Err(Error::Config("modifier adaptation runs on a steady-state plant".into()));
        };
        let mut lambda = lambda0.clone();
        let mut u = Vector::zeros(self.model.input_dim);
        let mut run = ModifierRun {
            inputs: Vec::new(),
            modifiers: vec![lambda.clone()],
            status: Status::TimeLimit,
        };
        for k in 0..max_iter {
            u = self.solve_model(&lambda, &u)?;
            let y = map.eval(&u)? + disturbance.at(k as f64);
            let plant_grad = self.plant_sensitivity.at(&u)?.transpose() * self.cost.gradient(&y)?;
            let next = &lambda * (1.0 - self.filter) + (plant_grad - self.model_gradient(&u)?) * self.filter;
            let change = (&next - &lambda).amax();
            let prev_u = run.inputs.last().cloned();
            run.inputs.push(u.clone());
            run.modifiers.push(next.clone());
            lambda = next;
            if !lambda.iter().all(|v| v.is_finite()) || lambda.amax() > 1e6 {
                run.status = Status::Diverged;
                return Ok(run);
            }
            let u_change = prev_u.map_or(f64::INFINITY, |pu| (&pu - &u).amax());
            if change <= tol && u_change <= tol {
                run.status = Status::Converged;
                return Ok(run);
            }
        }
        Ok(run)
    }
}
