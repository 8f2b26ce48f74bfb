//! Small illustrative scenarios: gain-induced instability, constraint
//! mechanisms, metric flows, extremum seeking, modifier adaptation,
//! anti-windup and time-varying tracking.

use std::sync::Arc;

use super::{horizon, labeled, no_events, ParamReader, RunOutput, ScenarioConfig, VIOLATION_PREFIX};
use crate::controllers::{
    anti_windup_gradient, ContinuousController, extremum_seeking, gradient_feedback, modifier_adaptation, predictive_tv_controller,
    running_tv_controller, simulate, tracking_error_bound, FeedbackProblem, SensitivitySpec,
};
use crate::convex::{qp_solve, ConvexSet, Metric, QpProblem};
use crate::error::{Error, Result};
use crate::flows::{
    barrier_term, gradient_field, penalty_term, projected_gradient_field, saddle_field, ConstraintMap, Field,
    GradientMetric, SaddleSystem, ScalarField,
};
use crate::plants::{second_order_benchmark, Plant, Signal, SteadyStateMap};
use crate::sim::{integrate, Integration, IntegratorConfig, Method, Status, Trajectory};
use crate::stability::{epsilon_star, lti_boundary_layer_cert};
use crate::{Matrix, Vector};

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

// ---------------------------------------------------------------------------
// Gain threshold

/// `Φ(y) = (y² - 1)²` with minimizers `±1`.
pub fn quartic_cost() -> ScalarField {
    ScalarField::new(
        1,
        |y| Ok((y[0] * y[0] - 1.0).powi(2)),
        |y| Ok(v(&[4.0 * y[0] * (y[0] * y[0] - 1.0)])),
    )
    .with_hessian(|y| Ok(Matrix::from_element(1, 1, 12.0 * y[0] * y[0] - 4.0)))
}

/// Second-order plant `ζ̈ + aζ̇ + b(ζ - u) = 0` with `y = ζ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainThresholdSetup {
    pub damping: f64,
    pub stiffness: f64,
    pub u0: f64,
    pub dt: f64,
    pub t_end: f64,
}

impl Default for GainThresholdSetup {
    fn default() -> Self {
        Self {
            damping: 2.0,
            stiffness: 25.0,
            u0: 3.0,
            dt: 2e-3,
            t_end: 400.0,
        }
    }
}

/// Convergence tolerance on the closed-loop vector field.
const GAIN_CONVERGED: f64 = 1e-10;

impl GainThresholdSetup {
    /// Closed-loop run at gain `eps`; state `(ζ, ζ̇, u)`, plant starting at
    /// rest at `ζ = u0`.
    pub fn run(&self, eps: f64) -> Result<Integration> {
        let plant = Plant::Dynamic(second_order_benchmark(self.damping, self.stiffness));
        let problem = FeedbackProblem::output_cost(&quartic_cost(), 1, SensitivitySpec::constant(Matrix::identity(1, 1)))?;
        let ctrl = gradient_feedback(problem, eps);
        let cfg = IntegratorConfig::new(Method::Rk4, self.dt, self.t_end)
            .until_converged(GAIN_CONVERGED)
            .with_radius(1e3);
        simulate(&plant, &ctrl, &v(&[self.u0]), Some(&v(&[self.u0, 0.0])), &cfg)
    }

    /// Whether the loop settles at a minimizer `±1`.
    pub fn converges(&self, eps: f64) -> Result<bool> {
        let run = self.run(eps)?;
        let u = run.trajectory.last().expect("nonempty")[2];
        Ok(run.status == Status::Converged && (u.abs() - 1.0).abs() <= 1e-4)
    }

    /// Bisection for the largest stabilizing gain between a converging `lo`
    /// and a non-converging `hi`, to relative width `rel_tol`.
    pub fn empirical_threshold(&self, mut lo: f64, mut hi: f64, rel_tol: f64) -> Result<f64> {
        if !self.converges(lo)? || self.converges(hi)? {
            return Err(Error::Config("threshold bracket does not straddle the stability boundary".into()));
        }
        while hi - lo > rel_tol * lo {
            let mid = 0.5 * (lo + hi);
            if self.converges(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }

    /// Timescale-separation bound with `L = sup |Φ''|` over `|y| <= radius`.
    pub fn certified_gain(&self, radius: f64) -> Result<f64> {
        let a = Matrix::from_row_slice(2, 2, &[0.0, 1.0, -self.stiffness, -self.damping]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, self.stiffness]);
        let lipschitz = (12.0 * radius * radius - 4.0).max(8.0);
        Ok(epsilon_star(&lti_boundary_layer_cert(&a, &b, lipschitz)?))
    }
}

pub fn gain_threshold_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    no_events(config)?;
    let plant = ParamReader::new("plant", &config.plant);
    let ctrl = ParamReader::new("controller", &config.controller);
    let defaults = GainThresholdSetup::default();
    let (dt, t_end) = horizon(config, defaults.dt, 60.0)?;
    let setup = GainThresholdSetup {
        damping: plant.positive("a", defaults.damping)?,
        stiffness: plant.positive("b", defaults.stiffness)?,
        u0: ctrl.f64("u0", defaults.u0)?,
        dt,
        t_end,
    };
    let eps = ctrl.positive("gain", 0.1)?;
    plant.finish()?;
    ctrl.finish()?;
    let run = setup.run(eps)?;
    let mut trace = labeled(vec!["zeta".into(), "zeta_rate".into(), "u".into(), "cost".into()]);
    for (t, x) in run.trajectory.times.iter().zip(&run.trajectory.states) {
        let cost = (x[0] * x[0] - 1.0).powi(2);
        trace.push(*t, v(&[x[0], x[1], x[2], cost]));
    }
    let bound_radius = setup.u0.abs().max(1.0);
    Ok(RunOutput::new(trace, run.status).metric("epsilon_star", setup.certified_gain(bound_radius)?))
}

// ---------------------------------------------------------------------------
// Constraint mechanisms

/// Quadratic of the mechanism comparison and its constraints
/// `x₂ >= 0`, `x₂ >= x₁` written as `g(x) <= 0`.
pub fn mechanism_problem() -> (ScalarField, ConstraintMap) {
    let h = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let phi = ScalarField::quadratic(h, v(&[1.5, -1.0]));
    let g = ConstraintMap::affine(Matrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, -1.0]), v(&[0.0, 0.0]));
    (phi, g)
}

/// Constrained minimizer of the mechanism problem.
pub fn mechanism_optimum() -> Result<Vector> {
    let h = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let f = -(&h * v(&[1.5, -1.0]));
    let rows = ConvexSet::Polyhedron {
        a: Matrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, -1.0]),
        b: v(&[0.0, 0.0]),
    }
    .rows();
    Ok(qp_solve(&QpProblem::with_rows(h, f, rows))?.w)
}

/// Start used by every mechanism; strictly feasible.
pub const MECHANISM_START: [f64; 2] = [-1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    Penalty,
    Barrier,
    Saddle,
    AugmentedSaddle,
    Projected,
    Mixed,
}

impl Mechanism {
    pub const ALL: [Mechanism; 6] = [
        Mechanism::Penalty,
        Mechanism::Barrier,
        Mechanism::Saddle,
        Mechanism::AugmentedSaddle,
        Mechanism::Projected,
        Mechanism::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Penalty => "penalty",
            Mechanism::Barrier => "barrier",
            Mechanism::Saddle => "saddle",
            Mechanism::AugmentedSaddle => "augmented_saddle",
            Mechanism::Projected => "projected",
            Mechanism::Mixed => "mixed",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown mechanism {name}")))
    }

    /// Number of dual variables carried in the state.
    pub fn dual_dim(self) -> usize {
        match self {
            Mechanism::Saddle | Mechanism::AugmentedSaddle => 2,
            Mechanism::Mixed => 1,
            _ => 0,
        }
    }
}

/// Parameters of a mechanism run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismSettings {
    /// Penalty weight (penalty and augmented saddle).
    pub rho: f64,
    /// Barrier parameter; the barrier term is `-(1/μ) Σ log(-g)`.
    pub barrier: f64,
    pub dt: f64,
    pub t_end: f64,
}

impl Default for MechanismSettings {
    fn default() -> Self {
        Self {
            rho: 10.0,
            barrier: 100.0,
            dt: 1e-3,
            t_end: 60.0,
        }
    }
}

/// Integrates one mechanism from [`MECHANISM_START`] (duals start at zero).
/// The state is `x` followed by any duals.
pub fn run_mechanism(mechanism: Mechanism, s: &MechanismSettings) -> Result<Integration> {
    let (phi, g) = mechanism_problem();
    let x0 = v(&MECHANISM_START);
    let cfg = IntegratorConfig::new(Method::Rk4, s.dt, s.t_end).until_converged(1e-11);
    let saddle = |sys: SaddleSystem| -> Result<Integration> {
        let z0 = sys.join(&crate::flows::SaddleState {
            x: x0.clone(),
            mu: Vector::zeros(sys.ineq_dim()),
            lambda: Vector::zeros(0),
        });
        let cfg = IntegratorConfig::new(Method::Euler, s.dt, s.t_end)
            .until_converged(1e-11)
            .projected(sys.state_set());
        integrate(&saddle_field(&sys), &z0, &cfg)
    };
    match mechanism {
        Mechanism::Penalty => integrate(&gradient_field(&phi.add(&penalty_term(&g, s.rho)), GradientMetric::Fixed(Metric::Identity))?, &x0, &cfg),
        Mechanism::Barrier => integrate(&gradient_field(&phi.add(&barrier_term(&g, s.barrier)), GradientMetric::Fixed(Metric::Identity))?, &x0, &cfg),
        Mechanism::Saddle => {
            let mut sys = SaddleSystem::new(phi);
            sys.ineq = Some(g);
            saddle(sys)
        }
        Mechanism::AugmentedSaddle => {
            let mut sys = SaddleSystem::new(phi);
            sys.ineq = Some(g);
            sys.rho_primal = s.rho;
            saddle(sys)
        }
        Mechanism::Projected => {
            let set = ConvexSet::Polyhedron {
                a: g.jacobian(&x0)?,
                b: Vector::zeros(2),
            };
            let field = projected_gradient_field(&phi, &set, Metric::Identity);
            let cfg = IntegratorConfig::new(Method::Euler, s.dt, s.t_end)
                .until_converged(1e-11)
                .projected(set);
            integrate(&field, &x0, &cfg)
        }
        Mechanism::Mixed => {
            // x₂ >= 0 by projection, x₂ >= x₁ by a dual variable.
            let mut sys = SaddleSystem::new(phi);
            sys.primal_set = ConvexSet::Polyhedron {
                a: Matrix::from_row_slice(1, 2, &[0.0, -1.0]),
                b: v(&[0.0]),
            };
            sys.ineq = Some(ConstraintMap::affine(Matrix::from_row_slice(1, 2, &[1.0, -1.0]), v(&[0.0])));
            saddle(sys)
        }
    }
}

/// Constraint violations `max(g, 0)` of a primal point.
pub fn mechanism_violation(x: &Vector) -> Vector {
    let (_, g) = mechanism_problem();
    g.eval(&x.rows(0, 2).into_owned()).expect("affine").map(|e| e.max(0.0))
}

pub fn mechanisms_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    no_events(config)?;
    ParamReader::new("plant", &config.plant).finish()?;
    let ctrl = ParamReader::new("controller", &config.controller);
    let defaults = MechanismSettings::default();
    let mechanism = Mechanism::parse(&ctrl.string("kind", "projected")?)?;
    let (dt, t_end) = horizon(config, defaults.dt, defaults.t_end)?;
    let settings = MechanismSettings {
        rho: ctrl.positive("rho", defaults.rho)?,
        barrier: ctrl.positive("barrier", defaults.barrier)?,
        dt,
        t_end,
    };
    ctrl.finish()?;
    let run = run_mechanism(mechanism, &settings)?;
    let (phi, _) = mechanism_problem();
    let mut labels = vec!["x1".to_string(), "x2".to_string()];
    labels.extend((0..mechanism.dual_dim()).map(|i| format!("mu{}", i + 1)));
    labels.push("cost".into());
    labels.push(format!("{VIOLATION_PREFIX}x2>=0"));
    labels.push(format!("{VIOLATION_PREFIX}x2>=x1"));
    let mut trace = labeled(labels);
    for (t, z) in run.trajectory.times.iter().zip(&run.trajectory.states) {
        let x = z.rows(0, 2).into_owned();
        let mut row: Vec<f64> = z.iter().copied().collect();
        row.push(phi.value(&x)?);
        row.extend(mechanism_violation(&x).iter());
        trace.push(*t, Vector::from_vec(row));
    }
    let last = run.trajectory.last().expect("nonempty").rows(0, 2).into_owned();
    let gap = (last - mechanism_optimum()?).amax();
    Ok(RunOutput::new(trace, run.status).metric("distance_to_optimum", gap))
}

// ---------------------------------------------------------------------------
// Metric and Newton flows

/// `Φ(x) = ½ xᵀ H x + ¼ x₁⁴` with an ill-conditioned `H`.
pub fn metric_flow_objective() -> ScalarField {
    let h = Matrix::from_row_slice(2, 2, &[10.0, 3.0, 3.0, 2.0]);
    let (hv, hg, hh) = (h.clone(), h.clone(), h);
    ScalarField::new(
        2,
        move |x| Ok(0.5 * x.dot(&(&hv * x)) + 0.25 * x[0].powi(4)),
        move |x| Ok(&hg * x + v(&[x[0].powi(3), 0.0])),
    )
    .with_hessian(move |x| {
        let mut m = hh.clone();
        m[(0, 0)] += 3.0 * x[0] * x[0];
        Ok(m)
    })
    .with_convexity(true)
}

pub fn metric_flows_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    no_events(config)?;
    ParamReader::new("plant", &config.plant).finish()?;
    let ctrl = ParamReader::new("controller", &config.controller);
    let kind = ctrl.string("kind", "newton")?;
    let starts = ctrl.usize("starts", 8)?.max(1);
    let radius = ctrl.positive("radius", 1.0)?;
    let diag = ctrl.vector("metric", &[0.1, 1.0])?;
    ctrl.finish()?;
    let (dt, t_end) = horizon(config, 1e-3, 8.0)?;
    let phi = metric_flow_objective();
    let metric = match kind.as_str() {
        "gradient" => GradientMetric::Fixed(Metric::Identity),
        "metric" => {
            if diag.len() != 2 || diag.iter().any(|d| !(*d > 0.0)) {
                return Err(Error::Config("controller.metric: expected two positive numbers".into()));
            }
            GradientMetric::Fixed(Metric::Constant(Matrix::from_diagonal(&v(&diag))))
        }
        "newton" => GradientMetric::Newton,
        other => return Err(Error::Config(format!("unknown flow kind {other}"))),
    };
    let field: Field = gradient_field(&phi, metric)?;
    let cfg = IntegratorConfig::new(Method::Rk4, dt, t_end);
    let mut labels = Vec::new();
    let mut runs = Vec::new();
    let mut drift: f64 = 0.0;
    for k in 0..starts {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / starts as f64;
        let x0 = v(&[radius * angle.cos(), radius * angle.sin()]);
        let run = integrate(&field, &x0, &cfg)?;
        let g0 = phi.gradient(&x0)?.normalize();
        for x in &run.trajectory.states {
            let g = phi.gradient(x)?;
            if g.norm() > 1e-9 {
                drift = drift.max((g.normalize() - &g0).norm());
            }
        }
        labels.push(format!("x1[{k}]"));
        labels.push(format!("x2[{k}]"));
        runs.push(run.trajectory);
    }
    let mut trace = labeled(labels);
    for (i, t) in runs[0].times.iter().enumerate() {
        let row: Vec<f64> = runs.iter().flat_map(|r| r.states[i].iter().copied()).collect();
        trace.push(*t, Vector::from_vec(row));
    }
    Ok(RunOutput::new(trace, Status::TimeLimit).metric("gradient_direction_drift", drift))
}

// ---------------------------------------------------------------------------
// Extremum seeking

/// Extremum seeking on `y = u`, `Φ(y) = y²`; state is the dither-free input.
pub fn extremum_seeking_run(amplitude: f64, frequency: f64, gain: f64, u0: f64, dt: f64, t_end: f64) -> Result<Integration> {
    let cost = ScalarField::new(1, |y| Ok(y[0] * y[0]), |y| Ok(v(&[2.0 * y[0]])));
    let ctrl = extremum_seeking(cost, 1, amplitude, frequency, gain)?;
    let plant = Plant::algebraic(SteadyStateMap::linear(Matrix::identity(1, 1)));
    simulate(&plant, &ctrl, &v(&[u0]), None, &IntegratorConfig::new(Method::Rk4, dt, t_end))
}

/// Simulated mean of `u̇` over the first dither period, `(u(T) - u(0)) / T`.
pub fn extremum_seeking_drift(amplitude: f64, frequency: f64, gain: f64, u0: f64) -> Result<f64> {
    let period = 2.0 * std::f64::consts::PI / frequency;
    let run = extremum_seeking_run(amplitude, frequency, gain, u0, period / 4000.0, period)?;
    Ok((run.trajectory.last().expect("nonempty")[0] - u0) / period)
}

/// Period average of the extremum-seeking vector field at a frozen input
/// `u`, by the rectangle rule on `samples` equispaced dither phases.
pub fn extremum_seeking_averaged_field(amplitude: f64, frequency: f64, gain: f64, u: f64, samples: usize) -> Result<f64> {
    let cost = ScalarField::new(1, |y| Ok(y[0] * y[0]), |y| Ok(v(&[2.0 * y[0]])));
    let ctrl = extremum_seeking(cost, 1, amplitude, frequency, gain)?;
    let period = 2.0 * std::f64::consts::PI / frequency;
    let state = v(&[u]);
    let mut sum = 0.0;
    for k in 0..samples {
        let t = period * k as f64 / samples as f64;
        let y = ctrl.plant_input(t, &state)?;
        sum += ctrl.derivative(t, &state, &y)?[0];
    }
    Ok(sum / samples as f64)
}

pub fn extremum_seeking_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    no_events(config)?;
    ParamReader::new("plant", &config.plant).finish()?;
    let ctrl = ParamReader::new("controller", &config.controller);
    let a = ctrl.positive("amplitude", 0.01)?;
    let w = ctrl.positive("frequency", 100.0)?;
    let eps = ctrl.positive("gain", 0.1)?;
    let u0 = ctrl.f64("u0", 1.0)?;
    ctrl.finish()?;
    let period = 2.0 * std::f64::consts::PI / w;
    let (dt, t_end) = horizon(config, period / 400.0, 50.0 * period)?;
    let run = extremum_seeking_run(a, w, eps, u0, dt, t_end)?;
    let mut trace = labeled(vec!["u".into(), "u_applied".into(), "cost".into()]);
    for (t, x) in run.trajectory.times.iter().zip(&run.trajectory.states) {
        let applied = x[0] + 2.0 * a * (w * t).sin();
        trace.push(*t, v(&[x[0], applied, applied * applied]));
    }
    Ok(RunOutput::new(trace, run.status)
        .metric("averaged_drift", extremum_seeking_averaged_field(a, w, eps, u0, 2000)?)
        .metric("simulated_drift", extremum_seeking_drift(a, w, eps, u0)?)
        .metric("predicted_drift", -2.0 * eps * u0))
}

// ---------------------------------------------------------------------------
// Modifier adaptation

pub fn modifier_adaptation_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    no_events(config)?;
    let plant = ParamReader::new("plant", &config.plant);
    let plant_gain = plant.positive("gain", 2.0)?;
    let model_gain = plant.positive("model_gain", 1.0)?;
    let target = plant.f64("target", 4.0)?;
    plant.finish()?;
    let ctrl = ParamReader::new("controller", &config.controller);
    let kappa = ctrl.positive("filter", 0.25)?;
    let iterations = ctrl.usize("iterations", 50)?;
    let tol = ctrl.positive("tol", 1e-12)?;
    ctrl.finish()?;
    if config.sim.dt.is_some() || config.sim.t_end.is_some() {
        return Err(Error::Config("modifier adaptation is iterated; use controller.iterations".into()));
    }
    let cost = ScalarField::quadratic(Matrix::identity(1, 1), v(&[target]));
    let ma = modifier_adaptation(
        cost.clone(),
        SteadyStateMap::linear(Matrix::identity(1, 1) * model_gain),
        v(&[0.0]),
        SensitivitySpec::constant(Matrix::identity(1, 1) * plant_gain),
        kappa,
    )?;
    let real = Plant::algebraic(SteadyStateMap::linear(Matrix::identity(1, 1) * plant_gain));
    let run = ma.run(&real, &v(&[0.0]), iterations, tol)?;
    let mut trace = labeled(vec!["u".into(), "modifier".into(), "cost".into()]);
    for (k, u) in run.inputs.iter().enumerate() {
        let y = plant_gain * u[0];
        trace.push(k as f64, v(&[u[0], run.modifiers[k + 1][0], 0.5 * (y - target).powi(2)]));
    }
    let optimum = target / plant_gain;
    let err = run.inputs.last().map_or(f64::NAN, |u| (u[0] - optimum).abs());
    Ok(RunOutput::new(trace, run.status).metric("optimum_error", err))
}

// ---------------------------------------------------------------------------
// Anti-windup

/// Anti-windup gradient feedback and Euler projected gradient flow on
/// `Φ(y) = ½(y - target)²`, `y = u + d(t)`, `u ∈ [lower, upper]`.
///
/// The disturbance `d` equals `excursion` on `[t_on, t_off)` and zero
/// otherwise, so the optimizer leaves the saturation and returns to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntiWindupSetup {
    pub target: f64,
    pub lower: f64,
    pub upper: f64,
    pub gain: f64,
    pub u0: f64,
    pub excursion: f64,
    pub t_on: f64,
    pub t_off: f64,
    pub dt: f64,
    pub t_end: f64,
}

impl Default for AntiWindupSetup {
    fn default() -> Self {
        Self {
            target: 2.0,
            lower: -1.0,
            upper: 1.0,
            gain: 1.0,
            u0: 0.0,
            excursion: 2.0,
            t_on: 2.0,
            t_off: 4.0,
            dt: 1e-4,
            t_end: 8.0,
        }
    }
}

/// Trajectories of an anti-windup comparison on a common time grid.
#[derive(Debug, Clone)]
pub struct AntiWindupComparison {
    /// Integrator state `u`.
    pub windup: Trajectory,
    /// Applied input `P_U(u)`.
    pub applied: Vec<f64>,
    /// Euler projected gradient flow.
    pub projected: Vec<f64>,
}

impl AntiWindupComparison {
    pub fn sup_gap(&self) -> f64 {
        self.applied
            .iter()
            .zip(&self.projected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl AntiWindupSetup {
    fn problem(&self) -> Result<FeedbackProblem> {
        FeedbackProblem::output_cost(
            &ScalarField::quadratic(Matrix::identity(1, 1), v(&[self.target])),
            1,
            SensitivitySpec::constant(Matrix::identity(1, 1)),
        )?
        .with_input_set(ConvexSet::boxed(&[self.lower], &[self.upper]))
    }

    fn disturbance(&self) -> Signal {
        Signal::steps(v(&[0.0]), vec![(self.t_on, v(&[self.excursion])), (self.t_off, v(&[0.0]))])
    }

    pub fn compare(&self, k_aw: f64) -> Result<AntiWindupComparison> {
        let plant = Plant::algebraic(SteadyStateMap::linear(Matrix::identity(1, 1))).with_disturbance(self.disturbance());
        let cfg = IntegratorConfig::new(Method::Euler, self.dt, self.t_end);
        let aw = anti_windup_gradient(self.problem()?, self.gain, k_aw)?;
        let windup = simulate(&plant, &aw, &v(&[self.u0]), None, &cfg)?.trajectory;
        let pg = gradient_feedback(self.problem()?, self.gain);
        let projected = simulate(&plant, &pg, &v(&[self.u0]), None, &cfg)?.trajectory;
        Ok(AntiWindupComparison {
            applied: windup.states.iter().map(|u| u[0].clamp(self.lower, self.upper)).collect(),
            projected: projected.column(0),
            windup,
        })
    }

    /// Constrained minimizer once the disturbance has cleared.
    pub fn optimum(&self) -> f64 {
        self.target.clamp(self.lower, self.upper)
    }
}

pub fn anti_windup_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    no_events(config)?;
    let plant = ParamReader::new("plant", &config.plant);
    let ctrl = ParamReader::new("controller", &config.controller);
    let d = AntiWindupSetup::default();
    let (dt, t_end) = horizon(config, d.dt, d.t_end)?;
    let setup = AntiWindupSetup {
        target: plant.f64("target", d.target)?,
        lower: plant.f64("lower", d.lower)?,
        upper: plant.f64("upper", d.upper)?,
        gain: ctrl.positive("gain", d.gain)?,
        u0: ctrl.f64("u0", d.u0)?,
        excursion: plant.f64("excursion", d.excursion)?,
        t_on: plant.f64("t_on", d.t_on)?,
        t_off: plant.f64("t_off", d.t_off)?,
        dt,
        t_end,
    };
    let k_aw = ctrl.positive("k_aw", 0.01)?;
    plant.finish()?;
    ctrl.finish()?;
    if setup.lower > setup.upper {
        return Err(Error::Config("plant.lower must not exceed plant.upper".into()));
    }
    let cmp = setup.compare(k_aw)?;
    let d = setup.disturbance();
    let mut trace = labeled(vec!["u".into(), "u_applied".into(), "u_projected_flow".into(), "gap".into(), "cost".into()]);
    for (i, t) in cmp.windup.times.iter().enumerate() {
        let (u, a, p) = (cmp.windup.states[i][0], cmp.applied[i], cmp.projected[i]);
        let y = a + d.at(*t)[0];
        trace.push(*t, v(&[u, a, p, (a - p).abs(), 0.5 * (y - setup.target).powi(2)]));
    }
    let last = *cmp.applied.last().expect("nonempty");
    Ok(RunOutput::new(trace, Status::TimeLimit)
        .metric("sup_gap", cmp.sup_gap())
        .metric("saturated_equilibrium_error", (last - setup.optimum()).abs()))
}

// ---------------------------------------------------------------------------
// Time-varying tracking

/// Disturbance `d(t) = -sin(ωt)` with exact rate.
pub fn sinusoid_disturbance(omega: f64) -> Signal {
    Signal::function(
        1,
        move |t| v(&[-(omega * t).sin()]),
        Some(Arc::new(move |t| v(&[-omega * (omega * t).cos()]))),
    )
}

/// Tracking run on `y = u + d(t)`, `Φ(y) = ½y²`, whose optimizer is
/// `u*(t) = sin(ωt)`. Returns the trajectory of `u`.
pub fn tracking_run(predictive: bool, omega: f64, gain: f64, dt: f64, t_end: f64) -> Result<Integration> {
    let d = sinusoid_disturbance(omega);
    let plant = Plant::algebraic(SteadyStateMap::linear(Matrix::identity(1, 1))).with_disturbance(d.clone());
    let phi = ScalarField::quadratic(Matrix::identity(1, 1), v(&[0.0]));
    let problem = FeedbackProblem::output_cost(&phi, 1, SensitivitySpec::constant(Matrix::identity(1, 1)))?;
    let cfg = IntegratorConfig::new(Method::Rk4, dt, t_end);
    if predictive {
        simulate(&plant, &predictive_tv_controller(problem, gain, d)?, &v(&[0.0]), None, &cfg)
    } else {
        simulate(&plant, &running_tv_controller(problem, gain), &v(&[0.0]), None, &cfg)
    }
}

/// Largest `|u(t) - u*(t)|` for `t >= transient`.
pub fn post_transient_error(traj: &Trajectory, omega: f64, transient: f64) -> f64 {
    traj.times
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t >= transient)
        .map(|(t, u)| (u[0] - (omega * t).sin()).abs())
        .fold(0.0, f64::max)
}

pub fn tracking_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    no_events(config)?;
    ParamReader::new("plant", &config.plant).finish()?;
    let ctrl = ParamReader::new("controller", &config.controller);
    let kind = ctrl.string("kind", "running")?;
    let omega = ctrl.positive("omega", 1.0)?;
    let gain = ctrl.positive("gain", 1.0)?;
    let transient = ctrl.f64("transient", 10.0)?;
    ctrl.finish()?;
    let predictive = match kind.as_str() {
        "running" => false,
        "predictive" => true,
        other => return Err(Error::Config(format!("unknown tracking controller {other}"))),
    };
    let (dt, t_end) = horizon(config, 1e-3, 30.0)?;
    let run = tracking_run(predictive, omega, gain, dt, t_end)?;
    let mut trace = labeled(vec!["u".into(), "optimum".into(), "error".into(), "cost".into()]);
    for (t, u) in run.trajectory.times.iter().zip(&run.trajectory.states) {
        let opt = (omega * t).sin();
        trace.push(*t, v(&[u[0], opt, u[0] - opt, 0.5 * (u[0] - opt).powi(2)]));
    }
    // The optimizer moves at rate at most ω and the reduced cost is 1-strongly convex.
    let bound = tracking_error_bound(omega, 1.0, gain);
    Ok(RunOutput::new(trace, run.status)
        .metric("post_transient_error", post_transient_error(&run.trajectory, omega, transient))
        .metric("error_bound", bound))
}
