//! Numerical hygiene suite: derivative checks of every scenario field and
//! constraint map, QP optimality, power-flow mismatch and balance, run
//! determinism and summary consistency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::congestion::CongestionNetwork;
use super::dispatch::DispatchCase;
use super::tutorial::{mechanism_problem, metric_flow_objective, quartic_cost};
use super::{run, ScenarioConfig};
use crate::convex::{qp_solve, QpProblem};
use crate::error::Result;
use crate::flows::{barrier_term, penalty_term, ConstraintMap, ScalarField};
use crate::powerflow::{assemble_feedback_problem, grid_sensitivity, initial_state, solve_power_flow, OpfProblem};
use crate::sim::{check_gradient, check_jacobian};
use crate::{Matrix, Vector};

/// Relative tolerance of the finite-difference checks.
pub const FD_TOL: f64 = 1e-5;
/// Tolerance on the QP KKT residual.
pub const QP_TOL: f64 = 1e-9;
/// Tolerance on the power-flow mismatch.
pub const MISMATCH_CHECK_TOL: f64 = 1e-8;
/// Tolerance on the active power balance `Σ p_G - Σ p_L - losses`.
pub const BALANCE_TOL: f64 = 1e-7;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

/// A scalar field with the points at which it is checked.
pub struct NamedField {
    pub name: String,
    pub field: ScalarField,
    pub points: Vec<Vector>,
}

/// A constraint map with the points at which it is checked.
pub struct NamedMap {
    pub name: String,
    pub map: ConstraintMap,
    pub points: Vec<Vector>,
}

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn vcat(a: &Vector, b: &Vector) -> Vector {
    Vector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Dispatch inputs at which power-flow based quantities are checked.
fn dispatch_points() -> Vec<Vector> {
    vec![
        v(&[1.0, 0.25, 1.0, 1.0, 1.0]),
        v(&[0.6, 0.5, 1.04, 1.02, 0.97]),
        v(&[1.4, 0.1, 0.98, 1.01, 1.03]),
    ]
}

fn dispatch_opf() -> Result<OpfProblem> {
    DispatchCase::six_bus().opf()
}

/// Reduced dispatch cost `u ↦ Φ(u, h(u))` through the power flow.
fn reduced_dispatch_cost(opf: &OpfProblem) -> Result<ScalarField> {
    let problem = assemble_feedback_problem(opf)?;
    let (ov, og) = (opf.clone(), opf.clone());
    let cost = opf.cost();
    let p = opf.partition.input_dim();
    Ok(ScalarField::new(
        p,
        move |u| {
            let s = ov.solve(u)?;
            cost.value(&vcat(u, &ov.partition.outputs(&ov.network, &s)))
        },
        move |u| {
            let s = og.solve(u)?;
            let y = og.partition.outputs(&og.network, &s);
            let gh = grid_sensitivity(&og.network, &s, &og.partition)?;
            problem.reduced_gradient(u, &y, &gh)
        },
    ))
}

/// Reduced dispatch constraints `u ↦ g(u, h(u))` through the power flow.
fn reduced_dispatch_constraints(opf: &OpfProblem) -> Result<ConstraintMap> {
    let problem = assemble_feedback_problem(opf)?;
    let (ov, oj) = (opf.clone(), opf.clone());
    let (pv, pj) = (problem.clone(), problem.clone());
    let p = opf.partition.input_dim();
    let m = problem.constraint_dim();
    let eval = move |u: &Vector| {
        let s = ov.solve(u)?;
        let y = ov.partition.outputs(&ov.network, &s);
        let gh = grid_sensitivity(&ov.network, &s, &ov.partition)?;
        Ok(pv.reduced_constraints(u, &y, &gh)?.0)
    };
    let jac = move |u: &Vector| {
        let s = oj.solve(u)?;
        let y = oj.partition.outputs(&oj.network, &s);
        let gh = grid_sensitivity(&oj.network, &s, &oj.partition)?;
        Ok(pj.reduced_constraints(u, &y, &gh)?.1)
    };
    Ok(ConstraintMap::new(p, m, eval, jac))
}

/// Every scalar field used by the built-in scenarios.
pub fn scenario_fields() -> Result<Vec<NamedField>> {
    let (quad, g) = mechanism_problem();
    let opf = dispatch_opf()?;
    let solved: Vec<Vector> = dispatch_points()
        .iter()
        .map(|u| {
            let s = opf.solve(u)?;
            Ok(vcat(u, &opf.partition.outputs(&opf.network, &s)))
        })
        .collect::<Result<_>>()?;
    let square = ScalarField::quadratic(Matrix::identity(1, 1) * 2.0, v(&[0.0]));
    let scalar_points = vec![v(&[-1.3]), v(&[0.2]), v(&[0.9])];
    Ok(vec![
        NamedField {
            name: "gain_threshold quartic cost".into(),
            field: quartic_cost(),
            points: scalar_points.clone(),
        },
        NamedField {
            name: "mechanisms objective".into(),
            field: quad.clone(),
            points: vec![v(&[-1.0, 2.0]), v(&[0.4, 0.1])],
        },
        NamedField {
            name: "mechanisms penalty term".into(),
            field: penalty_term(&g, 10.0),
            points: vec![v(&[1.0, -0.5]), v(&[0.7, 0.3])],
        },
        NamedField {
            name: "mechanisms barrier term".into(),
            field: barrier_term(&g, 100.0),
            points: vec![v(&[-1.0, 2.0]), v(&[0.1, 0.5])],
        },
        NamedField {
            name: "metric_flows objective".into(),
            field: metric_flow_objective(),
            points: vec![v(&[1.0, 0.0]), v(&[-0.7, 0.4])],
        },
        NamedField {
            name: "scalar quadratic costs".into(),
            field: square,
            points: scalar_points,
        },
        NamedField {
            name: "congestion disutility".into(),
            field: CongestionNetwork::chain().disutility(),
            points: vec![v(&[0.3, 0.6, 0.7]), v(&[0.1, 0.2, 1.5])],
        },
        NamedField {
            name: "dispatch generation cost".into(),
            field: opf.cost(),
            points: solved,
        },
        NamedField {
            name: "dispatch reduced cost".into(),
            field: reduced_dispatch_cost(&opf)?,
            points: dispatch_points(),
        },
    ])
}

/// Every constraint map used by the built-in scenarios.
pub fn scenario_constraints() -> Result<Vec<NamedMap>> {
    let (_, g) = mechanism_problem();
    let net = CongestionNetwork::chain();
    let opf = dispatch_opf()?;
    let (outputs, _) = opf.output_constraints();
    let solved: Vec<Vector> = dispatch_points()
        .iter()
        .map(|u| {
            let s = opf.solve(u)?;
            Ok(vcat(u, &opf.partition.outputs(&opf.network, &s)))
        })
        .collect::<Result<_>>()?;
    let mut maps = vec![
        NamedMap {
            name: "mechanisms constraints".into(),
            map: g,
            points: vec![v(&[-1.0, 2.0]), v(&[1.0, -0.5])],
        },
        NamedMap {
            name: "congestion link loads".into(),
            map: ConstraintMap::affine(net.routing, net.capacity),
            points: vec![v(&[0.3, 0.6, 0.7])],
        },
        NamedMap {
            name: "dispatch reduced constraints".into(),
            map: reduced_dispatch_constraints(&opf)?,
            points: dispatch_points(),
        },
    ];
    if let Some(map) = outputs {
        maps.push(NamedMap {
            name: "dispatch output constraints".into(),
            map,
            points: solved,
        });
    }
    Ok(maps)
}

/// Random strictly convex QPs with up to three variables.
pub fn qp_corpus(count: usize, seed: u64) -> Vec<QpProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = 1 + k % 3;
            let m = rng.gen_range(0..=4);
            let l = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let h = &l * l.transpose() + Matrix::identity(n, n) * 0.5;
            let f = Vector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let a = Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            // Right-hand sides keep the origin feasible.
            let b = Vector::from_fn(m, |_, _| rng.gen_range(0.0..1.0));
            QpProblem::with_rows(
                h,
                f,
                crate::convex::LinearRows {
                    a_ineq: a,
                    b_ineq: b,
                    a_eq: Matrix::zeros(0, n),
                    b_eq: Vector::zeros(0),
                },
            )
        })
        .collect()
}

fn derivative_checks(out: &mut Vec<CheckOutcome>) -> Result<()> {
    for f in scenario_fields()? {
        let worst = f
            .points
            .iter()
            .map(|x| check_gradient(&f.field, x))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        out.push(CheckOutcome::new(format!("gradient: {}", f.name), worst, FD_TOL));
    }
    for g in scenario_constraints()? {
        let worst = g
            .points
            .iter()
            .map(|x| check_jacobian(&g.map, x))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        out.push(CheckOutcome::new(format!("jacobian: {}", g.name), worst, FD_TOL));
    }
    Ok(())
}

fn qp_checks(out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut worst: f64 = 0.0;
    for qp in qp_corpus(200, 7) {
        let sol = qp_solve(&qp)?;
        worst = worst.max(qp.kkt_residual(&sol));
    }
    out.push(CheckOutcome::new("qp: KKT residual on random corpus", worst, QP_TOL));
    Ok(())
}

fn power_flow_checks(out: &mut Vec<CheckOutcome>) -> Result<()> {
    let opf = dispatch_opf()?;
    let (mut mismatch, mut balance) = (0.0f64, 0.0f64);
    for u in dispatch_points() {
        for scale in [0.5, 1.0, 1.3] {
            let mut inj = opf.injections(&u)?;
            inj.p_load *= scale;
            inj.q_load *= scale;
            let s = solve_power_flow(&opf.network, &inj, &initial_state(&opf.network, &inj))?;
            mismatch = mismatch.max(s.mismatch(&opf.network));
            balance = balance.max((s.p_gen.sum() - s.p_load.sum() - s.losses(&opf.network)).abs());
        }
    }
    out.push(CheckOutcome::new("power flow: mismatch", mismatch, MISMATCH_CHECK_TOL));
    out.push(CheckOutcome::new("power flow: active power balance", balance, BALANCE_TOL));
    Ok(())
}

fn run_checks_on(configs: &[ScenarioConfig], out: &mut Vec<CheckOutcome>) -> Result<()> {
    for cfg in configs {
        let a = run(cfg)?.finish(&cfg.scenario, 3, &[])?;
        let b = run(cfg)?.finish(&cfg.scenario, 3, &[])?;
        let identical = a.0.times == b.0.times
            && a.0.states.len() == b.0.states.len()
            && a.0
                .states
                .iter()
                .zip(&b.0.states)
                .all(|(x, y)| x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        out.push(CheckOutcome::new(
            format!("determinism: {}", cfg.scenario),
            if identical { 0.0 } else { 1.0 },
            0.0,
        ));
        let (trace, summary) = a;
        let mut gap: f64 = 0.0;
        for (k, name) in summary.constraint_labels.iter().enumerate() {
            let col = trace
                .labels
                .iter()
                .position(|l| l.strip_prefix(super::VIOLATION_PREFIX) == Some(name.as_str()))
                .map(|i| trace.column(i))
                .unwrap_or_default();
            let max = col.iter().copied().fold(0.0, f64::max);
            gap = gap.max((max - summary.max_violation[k]).abs());
        }
        out.push(CheckOutcome::new(format!("summary consistency: {}", cfg.scenario), gap, 0.0));
    }
    Ok(())
}

/// Runs the full suite.
pub fn run_checks() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    derivative_checks(&mut out)?;
    qp_checks(&mut out)?;
    power_flow_checks(&mut out)?;
    let configs = vec![
        ScenarioConfig::named("mechanisms").with_controller("kind", "saddle"),
        ScenarioConfig::named("congestion").with_horizon(1e-2, 20.0),
        ScenarioConfig::named("dispatch")
            .with_controller("oracle_starts", 0)
            .with_horizon(1.0, 30.0),
    ];
    run_checks_on(&configs, &mut out)?;
    Ok(out)
}
