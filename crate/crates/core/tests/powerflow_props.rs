mod common;

use common::oracles::gauss_seidel_power_flow;
use fbopt_core::controllers::{lop_controller, run_sampled};
use fbopt_core::plants::Plant;
use fbopt_core::powerflow::{
    assemble_feedback_problem, branch_flows, grid_sensitivity, initial_state, solve_power_flow,
    solve_power_flow_traced, Branch, Bus, BusKind, GridState, GridVariable, Injections, OpfProblem, Partition,
    PowerNetwork, QuadraticCost, Role,
};
use fbopt_core::Vector;
use proptest::prelude::*;

fn bus(id: &str, kind: BusKind) -> Bus {
    Bus {
        id: id.into(),
        kind,
        v_min: 0.9,
        v_max: 1.1,
        p_min: -10.0,
        p_max: 10.0,
        q_min: -10.0,
        q_max: 10.0,
    }
}

fn line(from: &str, to: &str, g: f64, b: f64) -> Branch {
    Branch {
        from: from.into(),
        to: to.into(),
        g,
        b,
        i_max: 10.0,
    }
}

fn triangle() -> PowerNetwork {
    PowerNetwork::new(
        vec![bus("1", BusKind::Slack), bus("2", BusKind::Pv), bus("3", BusKind::Pq)],
        vec![line("1", "2", 1.0, -8.0), line("2", "3", 2.0, -10.0), line("1", "3", 1.5, -6.0)],
    )
    .unwrap()
}

fn triangle_injections() -> Injections {
    let mut inj = Injections::zeros(3);
    inj.p_gen[1] = 0.4;
    inj.v_set[0] = 1.02;
    inj.v_set[1] = 1.01;
    inj.p_load[2] = 0.9;
    inj.q_load[2] = 0.3;
    inj
}

fn six_bus_injections(net: &PowerNetwork, scale: f64) -> Injections {
    let mut inj = Injections::zeros(net.bus_count());
    inj.p_gen[1] = 0.8 * scale;
    inj.p_gen[2] = 0.4 * scale;
    for (i, (p, q)) in [(3, (0.9, 0.2)), (4, (1.0, 0.3)), (5, (0.9, 0.2))] {
        inj.p_load[i] = p * scale;
        inj.q_load[i] = q * scale;
    }
    inj.v_set[0] = 1.03;
    inj.v_set[1] = 1.02;
    inj.v_set[2] = 1.01;
    inj
}

fn power_balance(net: &PowerNetwork, s: &GridState) -> f64 {
    s.p_gen.sum() - s.p_load.sum() - s.losses(net)
}

#[test]
fn triangle_matches_gauss_seidel() {
    let net = triangle();
    let inj = triangle_injections();
    let s = solve_power_flow(&net, &inj, &initial_state(&net, &inj)).unwrap();
    let (v, t) = gauss_seidel_power_flow(&net, &inj).unwrap();
    assert!((&s.v - v).amax() < 1e-6);
    assert!((&s.theta - t).amax() < 1e-6);
    assert!(s.mismatch(&net) < 1e-8);
}

#[test]
fn six_bus_matches_gauss_seidel_and_balances() {
    let net = PowerNetwork::six_bus();
    for scale in [0.5, 1.0, 1.3] {
        let inj = six_bus_injections(&net, scale);
        let s = solve_power_flow(&net, &inj, &GridState::flat(6)).unwrap();
        let (v, t) = gauss_seidel_power_flow(&net, &inj).unwrap();
        assert!((&s.v - v).amax() < 1e-6);
        assert!((&s.theta - t).amax() < 1e-6);
        assert!(power_balance(&net, &s).abs() < 1e-7);
    }
}

#[test]
fn newton_converges_quadratically() {
    let net = PowerNetwork::six_bus();
    let inj = six_bus_injections(&net, 1.3);
    let (_, trace) = solve_power_flow_traced(&net, &inj, &GridState::flat(6)).unwrap();
    assert!(trace.len() >= 3, "{trace:?}");
    let late: Vec<f64> = trace.windows(2).map(|w| w[1] / w[0]).skip(1).collect();
    for r in &late {
        assert!(*r <= 0.1, "{trace:?}");
    }
    // Quadratic: e_{k+1} / e_k² bounded.
    for w in trace.windows(2).skip(1) {
        assert!(w[1] <= 10.0 * w[0] * w[0], "{trace:?}");
    }
}

#[test]
fn overloaded_network_reports_no_convergence() {
    let net = triangle();
    let mut inj = triangle_injections();
    inj.p_load[2] = 50.0;
    let err = solve_power_flow(&net, &inj, &GridState::flat(3)).unwrap_err();
    assert!(matches!(err, fbopt_core::Error::NoConvergence { .. }), "{err:?}");
}

#[test]
fn two_bus_sensitivity_matches_analytic() {
    let net = PowerNetwork::new(
        vec![bus("1", BusKind::Slack), bus("2", BusKind::Pv)],
        vec![line("1", "2", 0.0, -10.0)],
    )
    .unwrap();
    let mut inj = Injections::zeros(2);
    inj.p_gen[1] = 1.0;
    let s = solve_power_flow(&net, &inj, &GridState::flat(2)).unwrap();
    let part = Partition::new(&net);
    let sens = grid_sensitivity(&net, &s, &part).unwrap();
    let theta_row = part.output_offsets().theta;
    let expected = 1.0 / (10.0 * s.theta[1].cos());
    assert!((sens[(theta_row, 0)] - expected).abs() < 1e-12);
    // Slack active generation falls one-for-one in a lossless network.
    assert!((sens[(0, 0)] + 1.0).abs() < 1e-12);
}

fn fd_sensitivity_check(net: &PowerNetwork, inj: &Injections) {
    let part = Partition::new(net);
    let s = solve_power_flow(net, inj, &initial_state(net, inj)).unwrap();
    let sens = grid_sensitivity(net, &s, &part).unwrap();
    let u0 = part.inputs(&s);
    for j in 0..u0.len() {
        let delta = 1e-6;
        let solve_at = |sign: f64| {
            let mut u = u0.clone();
            u[j] += sign * delta;
            let mut i2 = inj.clone();
            part.apply(&u, &mut i2).unwrap();
            let st = solve_power_flow(net, &i2, &s).unwrap();
            part.outputs(net, &st)
        };
        let fd = (solve_at(1.0) - solve_at(-1.0)) / (2.0 * delta);
        let col = sens.column(j);
        let err = (&fd - col).amax() / (1.0 + col.amax());
        assert!(err < 1e-5, "input {j}: {err}");
    }
}

#[test]
fn sensitivity_matches_finite_differences_on_scenario_networks() {
    fd_sensitivity_check(&triangle(), &triangle_injections());
    let net = PowerNetwork::six_bus();
    fd_sensitivity_check(&net, &six_bus_injections(&net, 1.0));
}

#[test]
fn partition_covers_every_variable_once() {
    let net = PowerNetwork::six_bus();
    let part = Partition::new(&net);
    let mut inputs = vec![0usize; part.input_dim()];
    let mut outputs = vec![0usize; part.output_dim()];
    let vars = [
        GridVariable::Voltage,
        GridVariable::Angle,
        GridVariable::ActiveGeneration,
        GridVariable::ReactiveGeneration,
        GridVariable::ActiveLoad,
        GridVariable::ReactiveLoad,
    ];
    let mut references = 0;
    for b in 0..net.bus_count() {
        for var in vars {
            match part.role(b, var) {
                Role::Input(i) => inputs[i] += 1,
                Role::Output(i) => outputs[i] += 1,
                Role::Reference => references += 1,
                Role::Exogenous => {}
            }
        }
    }
    assert_eq!(references, 1);
    assert!(inputs.iter().all(|&c| c == 1));
    let current = part.output_offsets().current;
    assert!(outputs[..current].iter().all(|&c| c == 1));
    assert_eq!(part.input_labels(&net).len(), part.input_dim());
    assert_eq!(part.output_labels(&net).len(), part.output_dim());
}

fn unconstrained_opf() -> OpfProblem {
    let net = PowerNetwork::six_bus();
    let mut buses = net.buses().to_vec();
    for b in &mut buses {
        if b.kind != BusKind::Pq {
            b.q_min = f64::NEG_INFINITY;
            b.q_max = f64::INFINITY;
            b.p_min = f64::NEG_INFINITY;
            b.p_max = f64::INFINITY;
            b.v_min = 1.0;
            b.v_max = 1.0;
        } else {
            b.v_min = 1e-3;
            b.v_max = f64::INFINITY;
        }
    }
    let mut branches = net.branches().to_vec();
    for br in &mut branches {
        br.g = 0.0;
        br.i_max = f64::MAX;
    }
    let lossless = PowerNetwork::new(buses, branches).unwrap();
    OpfProblem::new(
        lossless,
        vec![
            Some(QuadraticCost { quadratic: 1.0, linear: 1.0 }),
            Some(QuadraticCost { quadratic: 2.0, linear: 0.5 }),
            Some(QuadraticCost { quadratic: 0.5, linear: 0.0 }),
            None,
            None,
            None,
        ],
        Vector::from_column_slice(&[0.0, 0.0, 0.0, 0.9, 1.0, 0.9]),
        Vector::from_column_slice(&[0.0, 0.0, 0.0, 0.2, 0.3, 0.2]),
    )
    .unwrap()
}

#[test]
fn lossless_dispatch_reaches_equal_marginal_cost() {
    let opf = unconstrained_opf();
    let problem = assemble_feedback_problem(&opf).unwrap();
    // Voltage rows remain (lower bounds only); none bind.
    let plant = Plant::algebraic(opf.plant_map());
    let ctrl = lop_controller(problem.clone(), 0.2);
    let u0 = Vector::from_column_slice(&[0.5, 0.5, 1.0, 1.0, 1.0]);
    let (traj, _) = run_sampled(&plant, &ctrl, &u0, 1.0, 300, 1.0).unwrap();
    let u = traj.last().unwrap().rows(0, 5).into_owned();
    let s = opf.solve(&u).unwrap();
    assert!((s.p_gen.sum() - s.p_load.sum()).abs() < 1e-8);
    // Closed form: λ = (D + Σ b_i / 2a_i) / Σ 1/2a_i.
    let (a, b) = ([1.0, 2.0, 0.5], [1.0, 0.5, 0.0]);
    let inv: f64 = a.iter().map(|x| 1.0 / (2.0 * x)).sum();
    let shifted: f64 = a.iter().zip(b).map(|(x, y)| y / (2.0 * x)).sum();
    let lambda = (2.8 + shifted) / inv;
    for i in 0..3 {
        let p = (lambda - b[i]) / (2.0 * a[i]);
        assert!((s.p_gen[i] - p).abs() < 1e-6, "bus {i}: {} vs {p}", s.p_gen[i]);
    }
}

#[test]
fn binding_line_is_held_at_its_limit() {
    let net = PowerNetwork::six_bus();
    let mut branches = net.branches().to_vec();
    // Tight limit on the wind export line.
    branches[2].i_max = 0.3;
    let mut buses = net.buses().to_vec();
    buses[2].p_max = 1.5;
    let net = PowerNetwork::new(buses, branches).unwrap();
    let opf = OpfProblem::new(
        net,
        vec![
            Some(QuadraticCost { quadratic: 0.1, linear: 1.0 }),
            Some(QuadraticCost { quadratic: 0.15, linear: 0.8 }),
            Some(QuadraticCost { quadratic: 0.01, linear: 0.0 }),
            None,
            None,
            None,
        ],
        Vector::from_column_slice(&[0.0, 0.0, 0.0, 0.9, 1.0, 0.9]),
        Vector::from_column_slice(&[0.0, 0.0, 0.0, 0.2, 0.3, 0.2]),
    )
    .unwrap();
    let problem = assemble_feedback_problem(&opf).unwrap();
    let plant = Plant::algebraic(opf.plant_map());
    let ctrl = lop_controller(problem, 0.2);
    let u0 = Vector::from_column_slice(&[0.5, 0.2, 1.0, 1.0, 1.0]);
    let (traj, _) = run_sampled(&plant, &ctrl, &u0, 1.0, 400, 1.0).unwrap();
    let u = traj.last().unwrap().rows(0, 5).into_owned();
    let s = opf.solve(&u).unwrap();
    let i2 = s.currents_squared(&opf.network)[2];
    assert!(i2 <= 0.09 + 1e-9 && i2 >= 0.09 - 1e-6, "{i2}");
    // Curtailment: wind below its cap.
    assert!(u[1] < 1.5 - 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn current_is_symmetric_and_nonnegative(
        vl in 0.8f64..1.2, vk in 0.8f64..1.2, tl in -0.5f64..0.5, tk in -0.5f64..0.5,
        g in 0.0f64..5.0, b in -20.0f64..0.0,
    ) {
        let (_, _, a) = branch_flows(vl, vk, tl, tk, g, b);
        let (_, _, c) = branch_flows(vk, vl, tk, tl, g, b);
        prop_assert!(a >= 0.0);
        prop_assert!((a - c).abs() <= 1e-12 * (1.0 + a));
    }

    #[test]
    fn lossless_branch_is_antisymmetric(
        vl in 0.8f64..1.2, vk in 0.8f64..1.2, tl in -0.5f64..0.5, tk in -0.5f64..0.5, b in -20.0f64..-0.1,
    ) {
        let (p1, _, _) = branch_flows(vl, vk, tl, tk, 0.0, b);
        let (p2, _, _) = branch_flows(vk, vl, tk, tl, 0.0, b);
        prop_assert_eq!(p1, -p2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_four_bus_networks(
        params in prop::collection::vec((0.0f64..2.0, -15.0f64..-4.0), 5),
        loads in prop::collection::vec(0.0f64..0.6, 2),
        pv_gen in 0.0f64..0.8,
        lossless in any::<bool>(),
    ) {
        let names = ["1", "2", "3", "4"];
        let pairs = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)];
        let branches = pairs
            .iter()
            .zip(&params)
            .map(|(&(l, k), &(g, b))| line(names[l], names[k], if lossless { 0.0 } else { g }, b))
            .collect();
        let net = PowerNetwork::new(
            vec![bus("1", BusKind::Slack), bus("2", BusKind::Pv), bus("3", BusKind::Pq), bus("4", BusKind::Pq)],
            branches,
        )
        .unwrap();
        let mut inj = Injections::zeros(4);
        inj.p_gen[1] = pv_gen;
        inj.p_load[2] = loads[0];
        inj.p_load[3] = loads[1];
        inj.q_load[2] = 0.3 * loads[0];
        inj.q_load[3] = 0.3 * loads[1];
        let s = solve_power_flow(&net, &inj, &initial_state(&net, &inj)).unwrap();
        prop_assert!(s.mismatch(&net) <= 1e-8);
        prop_assert!(power_balance(&net, &s).abs() < 1e-7);
        if lossless {
            prop_assert!((s.p_gen.sum() - s.p_load.sum()).abs() < 1e-8);
        }
        let (v, t) = gauss_seidel_power_flow(&net, &inj).unwrap();
        prop_assert!((&s.v - v).amax() < 1e-6);
        prop_assert!((&s.theta - t).amax() < 1e-6);
        fd_sensitivity_check(&net, &inj);
    }
}
