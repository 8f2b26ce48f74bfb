use fbopt_core::scenarios::congestion::CongestionNetwork;
use fbopt_core::scenarios::dispatch::{run_dispatch, DispatchCase, DispatchController, DispatchSettings};
use fbopt_core::scenarios::{run, ScenarioConfig, SCENARIOS};
use fbopt_core::sim::Status;
use fbopt_core::{Error, Matrix, Vector};
use serde_json::json;

/// Short horizons so every scenario runs quickly.
fn quick(name: &str) -> ScenarioConfig {
    let cfg = ScenarioConfig::named(name);
    match name {
        "gain_threshold" => cfg.with_horizon(2e-3, 5.0),
        "mechanisms" => cfg.with_horizon(1e-3, 2.0),
        "anti_windup" => cfg.with_horizon(1e-3, 8.0),
        "tracking" => cfg.with_horizon(1e-2, 15.0),
        "congestion" => cfg.with_horizon(1e-2, 10.0),
        "frequency" => cfg.with_horizon(1e-2, 10.0),
        "dispatch" => cfg.with_controller("oracle_starts", 0).with_horizon(1.0, 20.0),
        _ => cfg,
    }
}

#[test]
fn every_builtin_scenario_runs_with_defaults() {
    for (name, _) in SCENARIOS {
        let out = run(&quick(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!out.trace.is_empty(), "{name}");
        assert!(
            out.trace.states.iter().all(|x| x.iter().all(|v| v.is_finite())),
            "{name}: non-finite trace"
        );
        assert_eq!(out.trace.labels.len(), out.trace.states[0].len(), "{name}");
    }
}

#[test]
fn unknown_keys_and_scenarios_are_config_errors() {
    let typo = ScenarioConfig::named("congestion").with_controller("gian", 1.0);
    assert!(matches!(run(&typo), Err(Error::Config(_))));
    assert!(matches!(run(&ScenarioConfig::named("nope")), Err(Error::Config(_))));
    let events = ScenarioConfig::named("tracking").with_event(1.0, "x", 1.0);
    assert!(matches!(run(&events), Err(Error::Config(_))));
    let bad_target = ScenarioConfig::named("frequency").with_event(1.0, "p_load[9]", 1.0);
    assert!(matches!(run(&bad_target), Err(Error::Config(_))));
}

#[test]
fn configs_parse_from_json_and_toml() {
    let from_json = ScenarioConfig::from_json(
        r#"{"scenario": "congestion", "controller": {"x0": 0.2}, "sim": {"dt": 0.01, "t_end": 5}}"#,
    )
    .unwrap();
    let from_toml = ScenarioConfig::from_toml(
        "scenario = \"congestion\"\n[controller]\nx0 = 0.2\n[sim]\ndt = 0.01\nt_end = 5.0\n",
    )
    .unwrap();
    assert_eq!(from_json, from_toml);
    assert!(ScenarioConfig::from_json(r#"{"scenario": "congestion", "extra": 1}"#).is_err());
}

#[test]
fn reruns_are_bit_identical() {
    for name in ["mechanisms", "congestion", "dispatch"] {
        let a = run(&quick(name)).unwrap();
        let b = run(&quick(name)).unwrap();
        assert_eq!(a.trace.times, b.trace.times, "{name}");
        for (x, y) in a.trace.states.iter().zip(&b.trace.states) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()), "{name}");
        }
    }
}

#[test]
fn summary_max_violation_matches_emitted_rows() {
    let cfg = quick("mechanisms").with_controller("kind", "saddle");
    let (trace, summary) = run(&cfg).unwrap().finish("mechanisms", 7, &[]).unwrap();
    for (k, name) in summary.constraint_labels.iter().enumerate() {
        let i = trace.labels.iter().position(|l| l == &format!("viol:{name}")).unwrap();
        let max = trace.column(i).into_iter().fold(0.0, f64::max);
        assert_eq!(max, summary.max_violation[k]);
    }
    assert!(summary.max_violation.iter().any(|v| *v > 0.0));
}

#[test]
fn decimation_keeps_last_row_and_selects_columns() {
    let out = run(&quick("congestion")).unwrap();
    let n = out.trace.len();
    let last_t = *out.trace.times.last().unwrap();
    let (trace, _) = out.finish("congestion", 10, &["x[1]".into(), "cost".into()]).unwrap();
    assert_eq!(trace.labels, vec!["x[1]".to_string(), "cost".to_string()]);
    assert_eq!(trace.len(), (n - 1) / 10 + 1 + usize::from((n - 1) % 10 != 0));
    assert_eq!(*trace.times.last().unwrap(), last_t);
    let bad = run(&quick("congestion")).unwrap().finish("congestion", 1, &["nope".into()]);
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn congestion_rates_are_proportionally_fair() {
    // Weighted chain: stationarity wᵢ / xᵢ = Σ_{links of i} μ_j.
    let cfg = ScenarioConfig::named("congestion").with_plant("weights", json!([2.0, 1.0, 1.0]));
    let out = run(&cfg).unwrap();
    assert_eq!(out.status, Status::Converged);
    let z = out.trace.last().unwrap();
    let (x, mu) = (z.rows(0, 3), z.rows(3, 2));
    let net = CongestionNetwork::chain();
    let price = net.routing.transpose() * mu;
    for (i, w) in [2.0, 1.0, 1.0].into_iter().enumerate() {
        assert!((w / x[i] - price[i]).abs() < 1e-6);
    }
    // Both links full.
    let load = &net.routing * x;
    assert!((load - Vector::from_element(2, 1.0)).amax() < 1e-6);
    assert!(out.kkt_residual.unwrap() < 1e-6);
}

#[test]
fn slack_link_carries_no_price() {
    // A third link on the long flow's path with spare capacity never binds.
    let routing = json!([[1, 1, 0], [1, 0, 1], [1, 0, 0]]);
    let cfg = ScenarioConfig::named("congestion")
        .with_plant("routing", routing)
        .with_plant("capacity", json!([1.0, 1.0, 10.0]));
    let out = run(&cfg).unwrap();
    let z = out.trace.last().unwrap();
    assert!(z[5].abs() < 1e-9, "mu[3] = {}", z[5]);
    // The other two links behave as in the plain chain.
    assert!((z[0] - 1.0 / 3.0).abs() < 1e-6 && (z[3] - 1.5).abs() < 1e-6);
    let net = CongestionNetwork::new(
        Matrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]),
        Vector::from_column_slice(&[1.0, 1.0, 10.0]),
        Vector::from_element(3, 1.0),
    )
    .unwrap();
    assert_eq!(net.links(), 3);
}

#[test]
fn congestion_rejects_bad_networks() {
    let cfg = ScenarioConfig::named("congestion").with_plant("routing", json!([[1, 2, 0], [1, 0, 1]]));
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
    let cfg = ScenarioConfig::named("congestion").with_plant("capacity", json!([1.0, -1.0]));
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
}

#[test]
fn frequency_load_step_is_absorbed_locally() {
    let cfg = ScenarioConfig::named("frequency").with_event(1.0, "p_load[2]", 0.1);
    let out = run(&cfg).unwrap();
    assert!(out.metrics["final_max_frequency_deviation"] < 1e-6);
    assert!(out.metrics["final_max_line_flow"] < 1e-6);
    assert!(out.metrics["final_generation_mismatch"] < 1e-6);
    assert!(out.metrics["settle_time"] > 1.0 && out.metrics["settle_time"] < 200.0);
}

#[test]
fn frequency_saddle_mode_needs_a_valid_gain_mapping() {
    // With unit inertia, droop and integral gain the mapping degenerates.
    let cfg = ScenarioConfig::named("frequency").with_controller("mode", "saddle_equivalent");
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
    let cfg = ScenarioConfig::named("frequency")
        .with_controller("mode", "saddle_equivalent")
        .with_plant("inertia", 2.0)
        .with_event(1.0, "p_load[1]", 0.2)
        .with_horizon(1e-2, 20.0);
    let out = run(&cfg).unwrap();
    assert!(out.metrics["physical_gap"] <= 1e-8);
}

#[test]
fn gain_threshold_reports_certified_gain() {
    let out = run(&quick("gain_threshold")).unwrap();
    let eps = out.metrics["epsilon_star"];
    assert!(eps > 0.0 && eps < 0.1);
}

#[test]
fn extremum_seeking_metrics_agree_with_gradient() {
    let out = run(&ScenarioConfig::named("extremum_seeking").with_controller("gain", 0.01)).unwrap();
    let predicted = out.metrics["predicted_drift"];
    assert!((out.metrics["averaged_drift"] / predicted - 1.0).abs() < 1e-6);
    assert!((out.metrics["simulated_drift"] / predicted - 1.0).abs() < 0.05);
}

#[test]
fn modifier_adaptation_rejects_time_settings() {
    let cfg = ScenarioConfig::named("modifier_adaptation").with_horizon(0.1, 1.0);
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
    let out = run(&ScenarioConfig::named("modifier_adaptation")).unwrap();
    assert!(out.metrics["optimum_error"] < 1e-8);
}

#[test]
fn dispatch_with_generous_limits_settles_without_violation() {
    let mut case = DispatchCase::six_bus();
    let branches: Vec<_> = case
        .network
        .branches()
        .iter()
        .cloned()
        .map(|mut b| {
            b.i_max = 10.0;
            b
        })
        .collect();
    case.network = fbopt_core::powerflow::PowerNetwork::new(case.network.buses().to_vec(), branches).unwrap();
    for ctrl in [DispatchController::lop(), DispatchController::saddle()] {
        let mut s = DispatchSettings::standard(ctrl);
        s.events.clear();
        s.t_end = 1200.0;
        s.oracle_starts = 4;
        let run = run_dispatch(&case, &s).unwrap();
        let seg = &run.segments[0];
        assert!(seg.kkt_residual <= 1e-4, "{}: {}", ctrl.name(), seg.kkt_residual);
        assert!(seg.cost_gap().unwrap() <= 1e-3);
        let tail = run.trace.times.iter().position(|t| *t >= 600.0).unwrap();
        let viol: Vec<usize> = (0..run.trace.labels.len()).filter(|&i| run.trace.labels[i].starts_with("viol:")).collect();
        for x in &run.trace.states[tail..] {
            assert!(viol.iter().all(|&i| x[i] <= 1e-6), "{}", ctrl.name());
        }
    }
}

#[test]
fn dispatch_outage_zeroes_the_tripped_unit() {
    let cfg = ScenarioConfig::named("dispatch").with_controller("oracle_starts", 4);
    let out = run(&cfg).unwrap();
    let p2 = out.column("p_gen[2]").unwrap();
    let t = &out.trace.times;
    let after = t.iter().position(|x| *x >= 2400.0).unwrap();
    assert!(p2[after..].iter().all(|p| p.abs() <= 1e-9));
    assert!(out.metrics["segment2_kkt_residual"] <= 1e-4);
    assert!(out.metrics["segment2_cost_gap"] <= 0.01);
    // Violation rows keep their layout when the tripped unit's bounds collapse.
    let (trace, summary) = out.finish("dispatch", 60, &[]).unwrap();
    assert!(trace.states.iter().all(|x| x.len() == trace.labels.len()));
    assert!(summary.constraint_labels.iter().any(|l| l.starts_with("p_gen[2]")));
}

#[test]
fn dispatch_rejects_unknown_event_targets() {
    let cfg = ScenarioConfig::named("dispatch")
        .with_plant("profile", "constant")
        .with_event(5.0, "q_max[2]", 1.0)
        .with_controller("oracle_starts", 0)
        .with_horizon(1.0, 10.0);
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
}
