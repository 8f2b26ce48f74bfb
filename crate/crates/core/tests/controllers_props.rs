use fbopt_core::controllers::{
    gradient_feedback, lop_controller, run_sampled, saddle_feedback, simulate, ControllerMetric,
    FeedbackProblem, SensitivitySpec,
};
use fbopt_core::convex::{project_point, ConvexSet, Metric};
use fbopt_core::flows::{projected_gradient_field, ConstraintMap, ScalarField};
use fbopt_core::plants::{lti_plant, Plant, Signal, SteadyStateMap};
use fbopt_core::sim::{integrate, IntegratorConfig, Method};
use fbopt_core::{Matrix, Vector};
use proptest::prelude::*;

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn gain() -> Matrix {
    Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0])
}

fn tracking_cost() -> ScalarField {
    ScalarField::quadratic(Matrix::identity(2, 2), v(&[2.0, 1.0]))
}

fn output_row() -> ConstraintMap {
    ConstraintMap::affine(Matrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 1.0]), v(&[1.5]))
}

fn lop_problem() -> FeedbackProblem {
    FeedbackProblem::output_cost(&tracking_cost(), 2, SensitivitySpec::constant(gain()))
        .unwrap()
        .with_input_set(ConvexSet::boxed(&[-1.0, -1.0], &[1.0, 1.0]))
        .unwrap()
        .with_constraints(output_row())
        .unwrap()
}

#[test]
fn lop_converges_to_projected_flow_as_step_shrinks() {
    let h = gain();
    let feasible = ConvexSet::Intersection(vec![
        ConvexSet::boxed(&[-1.0, -1.0], &[1.0, 1.0]),
        ConvexSet::Polyhedron {
            a: Matrix::from_row_slice(1, 2, &[1.0, 1.0]) * &h,
            b: v(&[1.5]),
        },
    ]);
    let reduced = tracking_cost().compose_affine(h.clone(), Vector::zeros(2));
    let field = projected_gradient_field(&reduced, &feasible, Metric::Identity);
    let horizon = 3.0;
    let fine = 1e-4;
    let cfg = IntegratorConfig::new(Method::Euler, fine, horizon).projected(feasible.clone());
    let reference = integrate(&field, &v(&[0.0, 0.0]), &cfg).unwrap().trajectory;
    let plant = Plant::algebraic(SteadyStateMap::linear(h));
    let mut gaps = Vec::new();
    for alpha in [0.1, 0.05, 0.01] {
        let lop = lop_controller(lop_problem(), alpha).with_metric(ControllerMetric::Identity);
        let samples = (horizon / alpha).round() as usize;
        let (traj, _) = run_sampled(&plant, &lop, &v(&[0.0, 0.0]), alpha, samples, alpha).unwrap();
        let stride = (alpha / fine).round() as usize;
        let gap = traj
            .states
            .iter()
            .enumerate()
            .map(|(k, u)| (u - &reference.states[k * stride]).amax())
            .fold(0.0, f64::max);
        for u in &traj.states {
            assert!(feasible.violation(u) <= 1e-10);
        }
        gaps.push(gap);
    }
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "gaps {gaps:?}");
}

#[test]
fn lop_equilibrium_is_kkt() {
    let plant = Plant::algebraic(SteadyStateMap::linear(gain()));
    let problem = lop_problem();
    let lop = lop_controller(problem.clone(), 0.2);
    let (traj, _) = run_sampled(&plant, &lop, &v(&[0.0, 0.0]), 1.0, 400, 1.0).unwrap();
    let u = traj.last().unwrap();
    let y = &gain() * u;
    let step = lop.step(u, &y).unwrap();
    assert!(step.direction.amax() < 1e-9);
    assert!(problem.kkt_residual(u, &y, &gain()).unwrap() < 1e-8);
}

#[test]
fn saddle_controller_keeps_duals_and_inputs_feasible() {
    let plant = Plant::algebraic(SteadyStateMap::linear(gain()));
    let ctrl = saddle_feedback(lop_problem(), 1.0, 0.5);
    let cfg = IntegratorConfig::new(Method::Euler, 0.01, 40.0);
    let out = simulate(&plant, &ctrl, &v(&[0.0, 0.0, 0.0]), None, &cfg).unwrap();
    let input_set = ConvexSet::boxed(&[-1.0, -1.0], &[1.0, 1.0]);
    for z in &out.trajectory.states {
        assert!(input_set.violation(&z.rows(0, 2).into_owned()) <= 1e-10);
        assert!(z[2] >= 0.0);
    }
    let z = out.trajectory.last().unwrap();
    let u = z.rows(0, 2).into_owned();
    let y = &gain() * &u;
    assert!(lop_problem().kkt_residual(&u, &y, &gain()).unwrap() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(5))]

    #[test]
    fn gradient_feedback_rejects_constant_disturbances(d in prop::collection::vec(-1.0f64..1.0, 2)) {
        let a = Matrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let b = Matrix::identity(2, 2);
        let c = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let dist = Vector::from_vec(d);
        let (plant, map) = lti_plant(&a, &b, &c, &Matrix::zeros(2, 2), Signal::constant(dist.clone())).unwrap();
        let cost = ScalarField::quadratic(Matrix::identity(4, 4) * 0.5, v(&[0.0, 0.0, 1.0, -1.0]));
        let problem = FeedbackProblem::new(cost, 2, 2, SensitivitySpec::exact(map.clone())).unwrap();
        let ctrl = gradient_feedback(problem.clone(), 0.2);
        let cfg = IntegratorConfig::new(Method::Rk4, 0.02, 200.0);
        let out = simulate(&Plant::Dynamic(plant), &ctrl, &v(&[0.0, 0.0]), None, &cfg).unwrap();
        let u = out.trajectory.last().unwrap().rows(2, 2).into_owned();
        let y_ss = map.eval(&u).unwrap() + &dist;
        let hgrad = map.sensitivity(&u).unwrap();
        prop_assert!(problem.reduced_gradient(&u, &y_ss, &hgrad).unwrap().amax() < 1e-6);
    }

    #[test]
    fn projected_gradient_feedback_stays_in_box(u0 in prop::collection::vec(-1.0f64..1.0, 2)) {
        let plant = Plant::algebraic(SteadyStateMap::linear(gain()));
        let set = ConvexSet::boxed(&[-0.5, -0.5], &[0.5, 0.5]);
        let problem = FeedbackProblem::output_cost(&tracking_cost(), 2, SensitivitySpec::constant(gain()))
            .unwrap()
            .with_input_set(set.clone())
            .unwrap();
        let ctrl = gradient_feedback(problem, 1.0);
        let start = project_point(&set, &Vector::from_vec(u0)).unwrap();
        let out = simulate(&plant, &ctrl, &start, None, &IntegratorConfig::new(Method::Euler, 0.05, 10.0)).unwrap();
        for u in &out.trajectory.states {
            prop_assert!(set.violation(u) <= 1e-10);
        }
    }
}
