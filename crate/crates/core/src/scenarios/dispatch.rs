//! Feedback dispatch on an algebraic power-flow plant, sampled once per
//! minute, with step changes of generation caps and loads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{labeled, Event, ParamReader, RunOutput, ScenarioConfig, VIOLATION_PREFIX};
use crate::controllers::{
    lop_controller, saddle_feedback, ControllerMetric, DiscreteController, FeedbackProblem, Lop, SampledSaddle,
};
use crate::convex::ConvexSet;
use crate::error::{Error, Result};
use crate::flows::ScalarField;
use crate::powerflow::{assemble_feedback_problem, grid_sensitivity, OpfProblem, PowerNetwork, QuadraticCost};
use crate::sim::{Status, Trajectory};
use crate::{Matrix, Vector};

/// Violations above this count toward the violation duration.
pub const VIOLATION_TOL: f64 = 1e-6;

/// Default number of oracle starts per segment.
pub const ORACLE_STARTS: usize = 20;

fn vcat(a: &Vector, b: &Vector) -> Vector {
    Vector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Network, generation costs and loads.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchCase {
    pub network: PowerNetwork,
    pub costs: Vec<Option<QuadraticCost>>,
    pub p_load: Vector,
    pub q_load: Vector,
}

impl DispatchCase {
    /// Bundled six-bus network: slack at bus 1, a conventional unit at bus 2,
    /// a wind unit with a near-zero cost at bus 3, loads at buses 4 to 6.
    pub fn six_bus() -> Self {
        Self {
            network: PowerNetwork::six_bus(),
            costs: vec![
                Some(QuadraticCost { quadratic: 0.1, linear: 1.0 }),
                Some(QuadraticCost { quadratic: 0.15, linear: 0.8 }),
                Some(QuadraticCost { quadratic: 0.01, linear: 0.0 }),
                None,
                None,
                None,
            ],
            p_load: Vector::from_column_slice(&[0.0, 0.0, 0.0, 0.9, 1.0, 0.9]),
            q_load: Vector::from_column_slice(&[0.0, 0.0, 0.0, 0.2, 0.3, 0.2]),
        }
    }

    /// Wind cap raised at `t = 1200` so that line 2-3 binds, outage of the
    /// unit at bus 2 at `t = 2400`.
    pub fn standard_events() -> Vec<Event> {
        vec![
            Event {
                t: 1200.0,
                target: "p_max[3]".into(),
                value: 1.5,
            },
            Event {
                t: 2400.0,
                target: "p_max[2]".into(),
                value: 0.0,
            },
        ]
    }

    pub fn opf(&self) -> Result<OpfProblem> {
        OpfProblem::new(self.network.clone(), self.costs.clone(), self.p_load.clone(), self.q_load.clone())
    }

    fn target_bus(&self, target: &str, prefix: &str) -> Option<usize> {
        target
            .strip_prefix(prefix)
            .and_then(|s| s.strip_suffix(']'))
            .and_then(|id| self.network.bus_index(id))
    }

    /// Case after an event: `p_max[id]` sets a generation cap (lowering the
    /// floor if needed), `p_load[id]` sets an active load.
    pub fn apply(&self, ev: &Event) -> Result<Self> {
        let mut next = self.clone();
        if let Some(b) = self.target_bus(&ev.target, "p_max[") {
            if self.costs[b].is_none() {
                return Err(Error::Config(format!("{} targets a bus without generation", ev.target)));
            }
            let bus = &self.network.buses()[b];
            next.network = self
                .network
                .with_generation_bounds(b, bus.p_min.min(ev.value), ev.value)?;
        } else if let Some(b) = self.target_bus(&ev.target, "p_load[") {
            next.p_load[b] = ev.value;
        } else {
            return Err(Error::Config(format!("unknown dispatch event target {}", ev.target)));
        }
        Ok(next)
    }
}

/// Metric applied to the dispatch input space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchMetric {
    Identity,
    /// `I + ∇hᵀ∇h + σI`.
    OutputWeighted,
}

impl DispatchMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(DispatchMetric::Identity),
            "output" => Ok(DispatchMetric::OutputWeighted),
            _ => Err(Error::Config(format!("unknown controller metric {s}"))),
        }
    }

    fn controller_metric(&self) -> ControllerMetric {
        match self {
            DispatchMetric::Identity => ControllerMetric::Identity,
            DispatchMetric::OutputWeighted => ControllerMetric::default(),
        }
    }
}

/// Sampled controller used for dispatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DispatchController {
    /// Euler-discretized saddle flow without primal augmentation.
    Saddle {
        dual_gain: f64,
        alpha: f64,
        metric: DispatchMetric,
    },
    /// Linearized output-constrained projection.
    Lop { alpha: f64, metric: DispatchMetric },
}

impl DispatchController {
    pub fn saddle() -> Self {
        DispatchController::Saddle {
            dual_gain: 20.0,
            alpha: 0.2,
            metric: DispatchMetric::OutputWeighted,
        }
    }

    pub fn lop() -> Self {
        DispatchController::Lop {
            alpha: 0.2,
            metric: DispatchMetric::OutputWeighted,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DispatchController::Saddle { .. } => "saddle",
            DispatchController::Lop { .. } => "lop",
        }
    }

    fn build(&self, problem: FeedbackProblem) -> Box<dyn DiscreteController> {
        match *self {
            DispatchController::Saddle {
                dual_gain,
                alpha,
                metric,
            } => Box::new(SampledSaddle {
                inner: saddle_feedback(problem, 1.0, 0.0)
                    .with_dual_gain(dual_gain)
                    .with_metric(metric.controller_metric()),
                alpha,
            }),
            DispatchController::Lop { alpha, metric } => Box::<Lop>::new(
                lop_controller(problem, alpha).with_metric(metric.controller_metric()),
            ),
        }
    }
}

/// Result of the multi-start reference solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub u: Vector,
    pub cost: f64,
    pub violation: f64,
    pub kkt_residual: f64,
}

/// Reduced dispatch problem `min f(u) s.t. g(u) <= 0, u ∈ U` evaluated
/// through the power flow.
struct Reduced<'a> {
    opf: &'a OpfProblem,
    problem: FeedbackProblem,
    cost: ScalarField,
    set: ConvexSet,
}

struct Point {
    f: f64,
    grad: Vector,
    g: Vector,
    jac: Matrix,
}

impl Reduced<'_> {
    fn eval(&self, u: &Vector) -> Result<Point> {
        let state = self.opf.solve(u)?;
        let y = self.opf.partition.outputs(&self.opf.network, &state);
        let gh = grid_sensitivity(&self.opf.network, &state, &self.opf.partition)?;
        let (g, jac) = self.problem.reduced_constraints(u, &y, &gh)?;
        Ok(Point {
            f: self.cost.value(&vcat(u, &y))?,
            grad: self.problem.reduced_gradient(u, &y, &gh)?,
            g,
            jac,
        })
    }

    fn kkt(&self, u: &Vector) -> Result<f64> {
        let state = self.opf.solve(u)?;
        let y = self.opf.partition.outputs(&self.opf.network, &state);
        let gh = grid_sensitivity(&self.opf.network, &state, &self.opf.partition)?;
        self.problem.kkt_residual(u, &y, &gh)
    }
}

/// Augmented Lagrangian `f + (‖max(0, λ + ρg)‖² - ‖λ‖²) / 2ρ` and its gradient.
fn augmented(p: &Point, lam: &Vector, rho: f64) -> (f64, Vector) {
    let shifted = (lam + &p.g * rho).map(|e| e.max(0.0));
    let value = p.f + (shifted.norm_squared() - lam.norm_squared()) / (2.0 * rho);
    (value, &p.grad + p.jac.transpose() * shifted)
}

/// Spectral projected gradient on the augmented Lagrangian over the box.
fn inner_solve(red: &Reduced, u0: &Vector, lam: &Vector, rho: f64, tol: f64) -> Result<Vector> {
    let mut u = u0.clone();
    let (mut value, mut grad) = augmented(&red.eval(&u)?, lam, rho);
    let mut step: f64 = 1.0;
    for _ in 0..400 {
        let pg = red.set.project(&(&u - &grad))? - &u;
        if pg.amax() <= tol {
            break;
        }
        let dir = red.set.project(&(&u - &grad * step))? - &u;
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &u + &dir * t;
            if let Ok(tp) = red.eval(&trial) {
                let (tv, tg) = augmented(&tp, lam, rho);
                if tv <= value + 1e-4 * t * slope {
                    accepted = Some((trial, tv, tg));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, tv, tg)) = accepted else { break };
        let s = &trial - &u;
        let yv = &tg - &grad;
        let sy = s.dot(&yv);
        step = if sy > 0.0 { (s.norm_squared() / sy).clamp(1e-8, 1e4) } else { 1e4 };
        u = trial;
        value = tv;
        grad = tg;
    }
    Ok(u)
}

/// Bounds of the input box `𝒰`.
pub fn input_bounds(opf: &OpfProblem) -> (Vector, Vector) {
    let buses = opf.network.buses();
    let part = &opf.partition;
    let lower = part.pv.iter().map(|&b| buses[b].p_min).chain(part.generators.iter().map(|&b| buses[b].v_min));
    let upper = part.pv.iter().map(|&b| buses[b].p_max).chain(part.generators.iter().map(|&b| buses[b].v_max));
    let p = part.input_dim();
    (Vector::from_iterator(p, lower), Vector::from_iterator(p, upper))
}

/// Multi-start augmented-Lagrangian solve of the reduced dispatch problem.
/// Starts are drawn uniformly from the input box with a seeded generator.
pub fn oracle_dispatch(opf: &OpfProblem, starts: usize, seed: u64) -> Result<OracleSolution> {
    let problem = assemble_feedback_problem(opf)?;
    let red = Reduced {
        opf,
        cost: opf.cost(),
        set: opf.input_set(),
        problem,
    };
    let (lower, upper) = input_bounds(opf);
    let p = lower.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<OracleSolution> = None;
    for _ in 0..starts.max(1) {
        let mut u = Vector::from_fn(p, |i, _| {
            let (lo, hi) = (lower[i], upper[i]);
            if lo < hi {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        });
        let m = red.problem.constraint_dim();
        let mut lam = Vector::zeros(m);
        let mut rho = 10.0;
        let mut prev = f64::INFINITY;
        let mut ok = true;
        for _ in 0..40 {
            u = match inner_solve(&red, &u, &lam, rho, 1e-10) {
                Ok(u) => u,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            let Ok(pt) = red.eval(&u) else {
                ok = false;
                break;
            };
            let viol = pt.g.iter().fold(0.0f64, |a, &g| a.max(g));
            let next = (&lam + &pt.g * rho).map(|e| e.max(0.0));
            let change = (&next - &lam).amax();
            lam = next;
            if viol <= 1e-10 && change <= 1e-9 {
                break;
            }
            if viol > 0.25 * prev {
                rho = (rho * 10.0).min(1e8);
            }
            prev = viol;
        }
        if !ok {
            continue;
        }
        let Ok(pt) = red.eval(&u) else { continue };
        let violation = pt.g.iter().fold(0.0f64, |a, &g| a.max(g));
        let candidate = OracleSolution {
            kkt_residual: red.kkt(&u)?,
            u,
            cost: pt.f,
            violation,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let (cf, bf) = (candidate.violation <= 1e-7, b.violation <= 1e-7);
                (cf && !bf) || (cf == bf && (candidate.cost, candidate.violation) < (b.cost, b.violation))
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| Error::InnerSolveFailed("no oracle start produced a solvable point".into()))
}

/// Per-segment outcome of a dispatch run.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentReport {
    pub start: f64,
    pub end: f64,
    /// KKT residual of the segment's problem at its last sample.
    pub kkt_residual: f64,
    pub cost: f64,
    pub oracle: Option<OracleSolution>,
    /// Largest output-constraint violation over the segment.
    pub max_violation: f64,
    /// Largest line-current violation over the segment.
    pub max_line_violation: f64,
    pub final_input: Vector,
}

impl SegmentReport {
    /// Relative gap of the segment's final cost to the oracle.
    pub fn cost_gap(&self) -> Option<f64> {
        self.oracle
            .as_ref()
            .map(|o| (self.cost - o.cost) / o.cost.abs().max(1e-12))
    }
}

#[derive(Debug, Clone)]
pub struct DispatchRun {
    pub trace: Trajectory,
    pub segments: Vec<SegmentReport>,
    /// Time in which some constraint was violated by more than [`VIOLATION_TOL`].
    pub violation_duration: f64,
    pub status: Status,
}

/// Options of a dispatch run.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSettings {
    pub controller: DispatchController,
    pub events: Vec<Event>,
    /// Sampling period in minutes.
    pub period: f64,
    pub t_end: f64,
    pub u0: Option<Vector>,
    /// Oracle starts per segment; zero skips the oracle.
    pub oracle_starts: usize,
    pub seed: u64,
}

impl DispatchSettings {
    pub fn standard(controller: DispatchController) -> Self {
        Self {
            controller,
            events: DispatchCase::standard_events(),
            period: 1.0,
            t_end: 3600.0,
            u0: None,
            oracle_starts: ORACLE_STARTS,
            seed: 0,
        }
    }
}

/// Kind of a violation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    Input,
    Output,
    Line,
}

/// Labels and kinds of the rows of `𝒰` followed by those of `𝒳`.
fn violation_rows(opf: &OpfProblem) -> (Vec<String>, Vec<RowKind>) {
    let mut labels = Vec::new();
    let mut kinds = Vec::new();
    let (lower, upper) = input_bounds(opf);
    for (i, name) in opf.partition.input_labels(&opf.network).iter().enumerate() {
        if upper[i].is_finite() {
            labels.push(format!("{name}<=max"));
            kinds.push(RowKind::Input);
        }
        if lower[i].is_finite() {
            labels.push(format!("{name}>=min"));
            kinds.push(RowKind::Input);
        }
    }
    let (_, out) = opf.output_constraints();
    for l in out {
        kinds.push(if l.starts_with("i2[") { RowKind::Line } else { RowKind::Output });
        labels.push(l);
    }
    (labels, kinds)
}

fn violations(opf: &OpfProblem, u: &Vector, y: &Vector) -> Result<Vector> {
    // Row layout matches `violation_rows`, which stays fixed when a bound
    // collapses to an equality after an outage.
    let (lo, hi) = input_bounds(opf);
    let mut input = Vec::new();
    for i in 0..u.len() {
        if hi[i].is_finite() {
            input.push((u[i] - hi[i]).max(0.0));
        }
        if lo[i].is_finite() {
            input.push((lo[i] - u[i]).max(0.0));
        }
    }
    let input = Vector::from_vec(input);
    let output = match opf.output_constraints().0 {
        Some(g) => g.eval(&vcat(u, y))?.map(|e| e.max(0.0)),
        None => Vector::zeros(0),
    };
    Ok(vcat(&input, &output))
}

/// Runs a sampled controller through the event schedule.
pub fn run_dispatch(case: &DispatchCase, settings: &DispatchSettings) -> Result<DispatchRun> {
    if !(settings.period > 0.0) || !(settings.t_end > 0.0) {
        return Err(Error::Config("sampling period and horizon must be positive".into()));
    }
    let mut events = settings.events.clone();
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    if events.iter().any(|e| !(e.t >= 0.0)) {
        return Err(Error::Config("event times must be nonnegative".into()));
    }
    let samples = (settings.t_end / settings.period).round() as usize;
    let mut case = case.clone();
    let mut pending = events.as_slice();
    let mut opf = case.opf()?;
    while let Some((ev, rest)) = pending.split_first() {
        if ev.t > 0.0 {
            break;
        }
        case = case.apply(ev)?;
        pending = rest;
    }
    if pending.len() != events.len() {
        opf = case.opf()?;
    }
    let mut problem = assemble_feedback_problem(&opf)?;
    let mut ctrl = settings.controller.build(problem.clone());
    let part = opf.partition.clone();
    let u_start = match &settings.u0 {
        Some(u) => u.clone(),
        None => {
            // Mid-range active power, unit voltage setpoints.
            let (lo, hi) = input_bounds(&opf);
            let mut u = (lo + hi) * 0.5;
            u.rows_mut(part.pv.len(), part.generators.len()).fill(1.0);
            u
        }
    };
    let u_start = opf.input_set().project(&u_start)?;
    let mut state = vcat(&u_start, &Vector::zeros(ctrl.state_dim() - part.input_dim()));

    let (viol_labels, kinds) = violation_rows(&opf);
    let mut labels = part.input_labels(&opf.network);
    labels.extend(part.output_labels(&opf.network));
    let (_, out_labels) = opf.output_constraints();
    if ctrl.state_dim() > part.input_dim() {
        labels.extend(out_labels.iter().map(|l| format!("mu:{l}")));
    }
    labels.push("cost".into());
    labels.extend(viol_labels.iter().map(|l| format!("{VIOLATION_PREFIX}{l}")));
    let mut trace = labeled(labels);

    let mut segments = Vec::new();
    let mut seg_start = 0.0;
    let mut seg_max = 0.0f64;
    let mut seg_line = 0.0f64;
    let mut violated_samples = 0usize;
    let mut cost_field = opf.cost();
    let mut status = Status::TimeLimit;
    for k in 0..=samples {
        let t = k as f64 * settings.period;
        let u = ctrl.plant_input(&state)?;
        let grid = opf.solve(&u).map_err(|e| e.at_time(t))?;
        let y = opf.partition.outputs(&opf.network, &grid);
        let viol = violations(&opf, &u, &y)?;
        let cost = cost_field.value(&vcat(&u, &y))?;
        let mut row: Vec<f64> = u.iter().chain(y.iter()).copied().collect();
        row.extend(state.rows(part.input_dim(), state.len() - part.input_dim()).iter());
        row.push(cost);
        row.extend(viol.iter());
        trace.push(t, Vector::from_vec(row));
        if viol.iter().any(|&v| v > VIOLATION_TOL) {
            violated_samples += 1;
        }
        for (&v, kind) in viol.iter().zip(&kinds) {
            if *kind != RowKind::Input {
                seg_max = seg_max.max(v);
            }
            if *kind == RowKind::Line {
                seg_line = seg_line.max(v);
            }
        }
        let next_t = (k + 1) as f64 * settings.period;
        let event_due = pending.first().is_some_and(|e| e.t <= next_t + 1e-9 * settings.period) && k < samples;
        if k == samples || event_due {
            let gh = grid_sensitivity(&opf.network, &grid, &opf.partition).map_err(|e| e.at_time(t))?;
            let oracle = if settings.oracle_starts > 0 {
                Some(oracle_dispatch(&opf, settings.oracle_starts, settings.seed.wrapping_add(segments.len() as u64))?)
            } else {
                None
            };
            segments.push(SegmentReport {
                start: seg_start,
                end: t,
                kkt_residual: problem.kkt_residual(&u, &y, &gh)?,
                cost,
                oracle,
                max_violation: seg_max,
                max_line_violation: seg_line,
                final_input: u.clone(),
            });
            seg_start = next_t;
            seg_max = 0.0;
            seg_line = 0.0;
        }
        if k == samples {
            break;
        }
        let mut next = ctrl.update(t, &state, &y).map_err(|e| e.at_time(t))?;
        if !next.iter().all(|v| v.is_finite()) || next.norm() > 1e6 {
            status = Status::Diverged;
            break;
        }
        if event_due {
            while let Some((ev, rest)) = pending.split_first() {
                if ev.t > next_t + 1e-9 * settings.period {
                    break;
                }
                case = case.apply(ev)?;
                pending = rest;
            }
            opf = case.opf()?;
            problem = assemble_feedback_problem(&opf)?;
            cost_field = opf.cost();
            ctrl = settings.controller.build(problem.clone());
            // Inputs must lie in the new 𝒰, e.g. after a unit trips.
            let u_next = opf.input_set().project(&next.rows(0, part.input_dim()).into_owned())?;
            next.rows_mut(0, part.input_dim()).copy_from(&u_next);
        }
        state = next;
    }
    Ok(DispatchRun {
        trace,
        segments,
        violation_duration: violated_samples as f64 * settings.period,
        status,
    })
}

pub fn dispatch_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    let plant = ParamReader::new("plant", &config.plant);
    let mut case = DispatchCase::six_bus();
    if let Some(path) = plant.opt_string("network")? {
        case.network = PowerNetwork::from_file(&path)?;
        let n = case.network.bus_count();
        case.costs = vec![None; n];
        case.p_load = Vector::zeros(n);
        case.q_load = Vector::zeros(n);
    }
    let n = case.network.bus_count();
    let gens = case.network.generators();
    let default_quad: Vec<f64> = gens.iter().map(|&b| case.costs[b].map_or(0.1, |c| c.quadratic)).collect();
    let default_lin: Vec<f64> = gens.iter().map(|&b| case.costs[b].map_or(1.0, |c| c.linear)).collect();
    let quad = plant.vector("cost_quadratic", &default_quad)?;
    let lin = plant.vector("cost_linear", &default_lin)?;
    if quad.len() != gens.len() || lin.len() != gens.len() {
        return Err(Error::Config(format!("plant costs need one entry per generator ({})", gens.len())));
    }
    for (i, &b) in gens.iter().enumerate() {
        case.costs[b] = Some(QuadraticCost {
            quadratic: quad[i],
            linear: lin[i],
        });
    }
    let p_load = plant.vector("p_load", case.p_load.as_slice())?;
    let q_load = plant.vector("q_load", case.q_load.as_slice())?;
    if p_load.len() != n || q_load.len() != n {
        return Err(Error::Config(format!("plant loads need one entry per bus ({n})")));
    }
    case.p_load = Vector::from_vec(p_load);
    case.q_load = Vector::from_vec(q_load);
    let profile = plant.string("profile", "standard")?;
    plant.finish()?;

    let ctrl = ParamReader::new("controller", &config.controller);
    let kind = ctrl.string("kind", "lop")?;
    let metric = match ctrl.opt_string("metric")? {
        Some(m) => Some(DispatchMetric::parse(&m)?),
        None => None,
    };
    let controller = match (kind.as_str(), DispatchController::lop(), DispatchController::saddle()) {
        ("lop", DispatchController::Lop { alpha, metric: m }, _) => DispatchController::Lop {
            alpha: ctrl.positive("alpha", alpha)?,
            metric: metric.unwrap_or(m),
        },
        (
            "saddle",
            _,
            DispatchController::Saddle {
                dual_gain,
                alpha,
                metric: m,
            },
        ) => DispatchController::Saddle {
            dual_gain: ctrl.positive("dual_gain", dual_gain)?,
            alpha: ctrl.positive("alpha", alpha)?,
            metric: metric.unwrap_or(m),
        },
        (other, _, _) => return Err(Error::Config(format!("unknown dispatch controller {other}"))),
    };
    let u0 = ctrl.opt_vector("u0")?;
    let oracle_starts = ctrl.usize("oracle_starts", ORACLE_STARTS)?;
    ctrl.finish()?;

    let mut settings = DispatchSettings::standard(controller);
    settings.events = match profile.as_str() {
        "standard" => DispatchCase::standard_events(),
        "constant" => Vec::new(),
        other => return Err(Error::Config(format!("unknown dispatch profile {other}"))),
    };
    settings.events.extend(config.disturbances.iter().cloned());
    settings.period = config.sim.dt.unwrap_or(1.0);
    settings.t_end = config.sim.t_end.unwrap_or(3600.0);
    settings.u0 = u0.map(Vector::from_vec);
    settings.oracle_starts = oracle_starts;
    settings.seed = config.sim.seed;
    let run = run_dispatch(&case, &settings)?;

    let mut out = RunOutput::new(run.trace, run.status).metric("violation_duration", run.violation_duration);
    out.kkt_residual = run.segments.last().map(|s| s.kkt_residual);
    for (j, seg) in run.segments.iter().enumerate() {
        let j = j + 1;
        out = out
            .metric(&format!("segment{j}_kkt_residual"), seg.kkt_residual)
            .metric(&format!("segment{j}_max_violation"), seg.max_violation)
            .metric(&format!("segment{j}_max_line_violation"), seg.max_line_violation);
        if let (Some(o), Some(gap)) = (&seg.oracle, seg.cost_gap()) {
            out = out
                .metric(&format!("segment{j}_oracle_cost"), o.cost)
                .metric(&format!("segment{j}_cost_gap"), gap);
        }
    }
    Ok(out)
}
