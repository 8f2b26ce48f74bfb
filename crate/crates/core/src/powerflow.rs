//! AC power networks: branch flows, Newton-Raphson power flow, steady-state
//! sensitivities and assembly of the dispatch problem.
//!
//! Per-unit quantities throughout; the slack bus is the angle reference.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controllers::{FeedbackProblem, SensitivitySpec};
use crate::convex::ConvexSet;
use crate::error::{check_dim, Error, Result};
use crate::flows::{ConstraintMap, ScalarField};
use crate::plants::SteadyStateMap;
use crate::{Matrix, Vector};

/// Power-flow mismatch accepted as solved.
pub const MISMATCH_TOL: f64 = 1e-8;
/// Newton iteration cap.
pub const MAX_NEWTON_ITERATIONS: usize = 50;
const MAX_STEP_HALVINGS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: String,
    pub to: String,
    pub g: f64,
    pub b: f64,
    pub i_max: f64,
}

/// Validated network. Construct through [`PowerNetwork::new`] or the loaders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork", into = "RawNetwork")]
pub struct PowerNetwork {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    ends: Vec<(usize, usize)>,
    slack: usize,
}

#[derive(Serialize, Deserialize)]
struct RawNetwork {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
}

impl TryFrom<RawNetwork> for PowerNetwork {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        PowerNetwork::new(raw.buses, raw.branches)
    }
}

impl From<PowerNetwork> for RawNetwork {
    fn from(net: PowerNetwork) -> Self {
        RawNetwork {
            buses: net.buses,
            branches: net.branches,
        }
    }
}

impl PowerNetwork {
    pub fn new(buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        let mut index = HashMap::new();
        for (i, bus) in buses.iter().enumerate() {
            if index.insert(bus.id.clone(), i).is_some() {
                return bad(format!("duplicate bus id {}", bus.id));
            }
            let ordered = bus.v_min > 0.0 && bus.v_min <= bus.v_max && bus.p_min <= bus.p_max && bus.q_min <= bus.q_max;
            if !ordered {
                return bad(format!("bus {} has unordered or nonpositive bounds", bus.id));
            }
        }
        let slacks: Vec<usize> = (0..buses.len()).filter(|&i| buses[i].kind == BusKind::Slack).collect();
        if slacks.len() != 1 {
            return bad(format!("expected exactly one slack bus, found {}", slacks.len()));
        }
        let mut ends = Vec::with_capacity(branches.len());
        for br in &branches {
            let (Some(&l), Some(&k)) = (index.get(&br.from), index.get(&br.to)) else {
                return bad(format!("branch {}-{} references an unknown bus", br.from, br.to));
            };
            if l == k || !(br.i_max > 0.0) || !br.g.is_finite() || !br.b.is_finite() {
                return bad(format!("branch {}-{} is malformed", br.from, br.to));
            }
            ends.push((l, k));
        }
        let mut seen = vec![false; buses.len()];
        let mut queue = VecDeque::from([slacks[0]]);
        seen[slacks[0]] = true;
        while let Some(i) = queue.pop_front() {
            for &(l, k) in &ends {
                let next = if l == i { k } else if k == i { l } else { continue };
                if !seen[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("network is not connected".into());
        }
        Ok(Self {
            buses,
            branches,
            ends,
            slack: slacks[0],
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    /// The bundled six-bus dispatch network.
    pub fn six_bus() -> Self {
        Self::from_json(include_str!("../data/six_bus.json")).expect("bundled network is valid")
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Bus indices `(from, to)` of every branch.
    pub fn ends(&self) -> &[(usize, usize)] {
        &self.ends
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    fn of_kind(&self, pred: impl Fn(BusKind) -> bool) -> Vec<usize> {
        (0..self.buses.len()).filter(|&i| pred(self.buses[i].kind)).collect()
    }

    /// Buses with unknown angle.
    pub fn non_slack(&self) -> Vec<usize> {
        self.of_kind(|k| k != BusKind::Slack)
    }

    pub fn pv(&self) -> Vec<usize> {
        self.of_kind(|k| k == BusKind::Pv)
    }

    pub fn pq(&self) -> Vec<usize> {
        self.of_kind(|k| k == BusKind::Pq)
    }

    /// Voltage-controlled buses (slack and PV) in bus order.
    pub fn generators(&self) -> Vec<usize> {
        self.of_kind(|k| k != BusKind::Pq)
    }

    /// Copy with modified active-generation bounds at one bus.
    pub fn with_generation_bounds(&self, bus: usize, p_min: f64, p_max: f64) -> Result<Self> {
        let mut buses = self.buses.clone();
        buses[bus].p_min = p_min;
        buses[bus].p_max = p_max;
        Self::new(buses, self.branches.clone())
    }
}

/// Flows `(p_lk, q_lk, i²_lk)` on a branch measured at end `l`.
pub fn branch_flows(v_l: f64, v_k: f64, theta_l: f64, theta_k: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (s, c) = (theta_l - theta_k).sin_cos();
    let p = g * v_l * v_l - v_l * v_k * (g * c + b * s);
    let q = -b * v_l * v_l - v_l * v_k * (g * s - b * c);
    let i2 = (g * g + b * b) * (v_l * v_l + v_k * v_k - 2.0 * v_l * v_k * c);
    (p, q, i2.max(0.0))
}

/// Partials of a flow with respect to `(θ_l, θ_k, v_l, v_k)`.
type Partials = [f64; 4];

fn branch_partials(v_l: f64, v_k: f64, theta_l: f64, theta_k: f64, g: f64, b: f64) -> (Partials, Partials, Partials) {
    let (s, c) = (theta_l - theta_k).sin_cos();
    let dp_dt = v_l * v_k * (g * s - b * c);
    let dp = [
        dp_dt,
        -dp_dt,
        2.0 * g * v_l - v_k * (g * c + b * s),
        -v_l * (g * c + b * s),
    ];
    let dq_dt = -v_l * v_k * (g * c + b * s);
    let dq = [
        dq_dt,
        -dq_dt,
        -2.0 * b * v_l - v_k * (g * s - b * c),
        -v_l * (g * s - b * c),
    ];
    let y2 = g * g + b * b;
    let di_dt = y2 * 2.0 * v_l * v_k * s;
    let di = [
        di_dt,
        -di_dt,
        y2 * (2.0 * v_l - 2.0 * v_k * c),
        y2 * (2.0 * v_k - 2.0 * v_l * c),
    ];
    (dp, dq, di)
}

/// Per-bus injections that are held fixed during a power-flow solve.
///
/// Generation at the slack bus and reactive generation at PV buses are
/// outputs of the solve; the corresponding entries are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    pub p_gen: Vector,
    pub q_gen: Vector,
    pub p_load: Vector,
    pub q_load: Vector,
    /// Voltage setpoints, used at slack and PV buses.
    pub v_set: Vector,
}

impl Injections {
    pub fn zeros(n: usize) -> Self {
        Self {
            p_gen: Vector::zeros(n),
            q_gen: Vector::zeros(n),
            p_load: Vector::zeros(n),
            q_load: Vector::zeros(n),
            v_set: Vector::from_element(n, 1.0),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        check_dim("p_gen", n, self.p_gen.len())?;
        check_dim("q_gen", n, self.q_gen.len())?;
        check_dim("p_load", n, self.p_load.len())?;
        check_dim("q_load", n, self.q_load.len())?;
        check_dim("v_set", n, self.v_set.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub v: Vector,
    pub theta: Vector,
    pub p_gen: Vector,
    pub q_gen: Vector,
    pub p_load: Vector,
    pub q_load: Vector,
}

impl GridState {
    /// Unit voltages, zero angles, zero injections.
    pub fn flat(n: usize) -> Self {
        Self {
            v: Vector::from_element(n, 1.0),
            theta: Vector::zeros(n),
            p_gen: Vector::zeros(n),
            q_gen: Vector::zeros(n),
            p_load: Vector::zeros(n),
            q_load: Vector::zeros(n),
        }
    }

    /// Net injections `(Σ p_lk, Σ q_lk)` leaving each bus through branches.
    pub fn branch_injections(&self, net: &PowerNetwork) -> (Vector, Vector) {
        bus_flows(net, &self.v, &self.theta)
    }

    /// Largest power-balance residual over all buses.
    pub fn mismatch(&self, net: &PowerNetwork) -> f64 {
        let (p, q) = self.branch_injections(net);
        let rp = &self.p_gen - &self.p_load - p;
        let rq = &self.q_gen - &self.q_load - q;
        rp.amax().max(rq.amax())
    }

    /// Total active losses `Σ (p_lk + p_kl)`.
    pub fn losses(&self, net: &PowerNetwork) -> f64 {
        net.branches
            .iter()
            .zip(&net.ends)
            .map(|(br, &(l, k))| {
                let (v, t) = (&self.v, &self.theta);
                branch_flows(v[l], v[k], t[l], t[k], br.g, br.b).0 + branch_flows(v[k], v[l], t[k], t[l], br.g, br.b).0
            })
            .sum()
    }

    /// Squared branch currents.
    pub fn currents_squared(&self, net: &PowerNetwork) -> Vector {
        Vector::from_iterator(
            net.branches.len(),
            net.branches.iter().zip(&net.ends).map(|(br, &(l, k))| {
                branch_flows(self.v[l], self.v[k], self.theta[l], self.theta[k], br.g, br.b).2
            }),
        )
    }
}

fn bus_flows(net: &PowerNetwork, v: &Vector, theta: &Vector) -> (Vector, Vector) {
    let n = net.bus_count();
    let mut p = Vector::zeros(n);
    let mut q = Vector::zeros(n);
    for (br, &(l, k)) in net.branches.iter().zip(&net.ends) {
        let (plk, qlk, _) = branch_flows(v[l], v[k], theta[l], theta[k], br.g, br.b);
        let (pkl, qkl, _) = branch_flows(v[k], v[l], theta[k], theta[l], br.g, br.b);
        p[l] += plk;
        q[l] += qlk;
        p[k] += pkl;
        q[k] += qkl;
    }
    (p, q)
}

/// Jacobian of `(P, Q)` bus flows with respect to `(θ, v)`: `2n × 2n`.
fn flow_jacobian(net: &PowerNetwork, v: &Vector, theta: &Vector) -> Matrix {
    let n = net.bus_count();
    let mut j = Matrix::zeros(2 * n, 2 * n);
    for (br, &(l, k)) in net.branches.iter().zip(&net.ends) {
        for (a, c) in [(l, k), (k, l)] {
            let (dp, dq, _) = branch_partials(v[a], v[c], theta[a], theta[c], br.g, br.b);
            let cols = [a, c, n + a, n + c];
            for (m, &col) in cols.iter().enumerate() {
                j[(a, col)] += dp[m];
                j[(n + a, col)] += dq[m];
            }
        }
    }
    j
}

/// Jacobian of squared branch currents with respect to `(θ, v)`.
fn current_jacobian(net: &PowerNetwork, v: &Vector, theta: &Vector) -> Matrix {
    let n = net.bus_count();
    let mut j = Matrix::zeros(net.branches.len(), 2 * n);
    for (row, (br, &(l, k))) in net.branches.iter().zip(&net.ends).enumerate() {
        let (_, _, di) = branch_partials(v[l], v[k], theta[l], theta[k], br.g, br.b);
        for (m, col) in [l, k, n + l, n + k].into_iter().enumerate() {
            j[(row, col)] += di[m];
        }
    }
    j
}

/// Rows (P at non-slack, Q at PQ) and columns (θ at non-slack, v at PQ) of
/// the Newton system, as indices into the `2n` flow layout.
fn newton_layout(net: &PowerNetwork) -> Vec<usize> {
    let n = net.bus_count();
    net.non_slack()
        .into_iter()
        .chain(net.pq().into_iter().map(|i| n + i))
        .collect()
}

fn select(m: &Matrix, rows: &[usize], cols: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn residual(net: &PowerNetwork, state: &GridState, layout: &[usize]) -> Vector {
    let n = net.bus_count();
    let (p, q) = state.branch_injections(net);
    Vector::from_iterator(
        layout.len(),
        layout.iter().map(|&r| {
            if r < n {
                state.p_gen[r] - state.p_load[r] - p[r]
            } else {
                let i = r - n;
                state.q_gen[i] - state.q_load[i] - q[i]
            }
        }),
    )
}

/// Starting state for given injections: flat angles, setpoint voltages at
/// slack and PV buses, unit voltage at PQ buses.
pub fn initial_state(net: &PowerNetwork, inj: &Injections) -> GridState {
    let n = net.bus_count();
    let mut state = GridState::flat(n);
    for i in net.generators() {
        state.v[i] = inj.v_set[i];
    }
    state
}

/// Newton-Raphson solve. The initial state supplies the angle and PQ voltage
/// guess; setpoints and injections come from `inj`.
pub fn solve_power_flow(net: &PowerNetwork, inj: &Injections, initial: &GridState) -> Result<GridState> {
    solve_power_flow_traced(net, inj, initial).map(|(s, _)| s)
}

/// As [`solve_power_flow`], also returning the mismatch before every iteration.
pub fn solve_power_flow_traced(net: &PowerNetwork, inj: &Injections, initial: &GridState) -> Result<(GridState, Vec<f64>)> {
    let n = net.bus_count();
    inj.check(n)?;
    check_dim("initial voltages", n, initial.v.len())?;
    check_dim("initial angles", n, initial.theta.len())?;
    let layout = newton_layout(net);
    let mut state = GridState {
        v: initial.v.clone(),
        theta: initial.theta.clone(),
        p_gen: inj.p_gen.clone(),
        q_gen: inj.q_gen.clone(),
        p_load: inj.p_load.clone(),
        q_load: inj.q_load.clone(),
    };
    state.theta[net.slack] = 0.0;
    for i in net.generators() {
        state.v[i] = inj.v_set[i];
    }
    let apply = |state: &GridState, step: &Vector, scale: f64| -> GridState {
        let mut next = state.clone();
        for (idx, &col) in layout.iter().enumerate() {
            if col < n {
                next.theta[col] += scale * step[idx];
            } else {
                next.v[col - n] += scale * step[idx];
            }
        }
        next
    };
    let measure = |s: &GridState| -> f64 {
        if s.v.iter().any(|&v| !(v > 0.0)) {
            f64::INFINITY
        } else {
            let r = residual(net, s, &layout);
            if r.is_empty() { 0.0 } else { r.amax() }
        }
    };
    let mut trace = Vec::new();
    let mut mismatch = measure(&state);
    for _ in 0..MAX_NEWTON_ITERATIONS {
        trace.push(mismatch);
        if mismatch <= MISMATCH_TOL {
            break;
        }
        let jac = select(&flow_jacobian(net, &state.v, &state.theta), &layout, &layout);
        let f = residual(net, &state, &layout);
        // F = s - flows(x), so the Newton step solves J_flows dx = F.
        let step = jac.lu().solve(&f).ok_or(Error::SingularJacobian)?;
        let mut scale = 1.0;
        let mut trial = apply(&state, &step, scale);
        let mut trial_mismatch = measure(&trial);
        for _ in 0..MAX_STEP_HALVINGS {
            if trial_mismatch <= mismatch {
                break;
            }
            scale *= 0.5;
            trial = apply(&state, &step, scale);
            trial_mismatch = measure(&trial);
        }
        if !trial_mismatch.is_finite() {
            return Err(Error::NoConvergence {
                iterations: trace.len(),
                mismatch,
            });
        }
        state = trial;
        mismatch = trial_mismatch;
    }
    if mismatch > MISMATCH_TOL {
        return Err(Error::NoConvergence {
            iterations: MAX_NEWTON_ITERATIONS,
            mismatch,
        });
    }
    let (p, q) = state.branch_injections(net);
    let s = net.slack;
    state.p_gen[s] = state.p_load[s] + p[s];
    for i in net.generators() {
        state.q_gen[i] = state.q_load[i] + q[i];
    }
    Ok((state, trace))
}

/// Split of the grid variables into controllable inputs and measured outputs.
///
/// Inputs: active generation at PV buses, then voltage setpoints at slack and
/// PV buses. Outputs: slack active generation, reactive generation at slack
/// and PV buses, PQ voltages, non-slack angles, squared branch currents.
/// Loads and PQ-bus generation are exogenous.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub pv: Vec<usize>,
    pub generators: Vec<usize>,
    pub pq: Vec<usize>,
    pub non_slack: Vec<usize>,
    pub slack: usize,
    pub branches: usize,
}

/// Role of a grid variable under a [`Partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Input(usize),
    Output(usize),
    Exogenous,
    Reference,
}

/// Per-bus grid variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridVariable {
    Voltage,
    Angle,
    ActiveGeneration,
    ReactiveGeneration,
    ActiveLoad,
    ReactiveLoad,
}

impl Partition {
    pub fn new(net: &PowerNetwork) -> Self {
        Self {
            pv: net.pv(),
            generators: net.generators(),
            pq: net.pq(),
            non_slack: net.non_slack(),
            slack: net.slack(),
            branches: net.branches().len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.pv.len() + self.generators.len()
    }

    pub fn output_dim(&self) -> usize {
        1 + self.generators.len() + self.pq.len() + self.non_slack.len() + self.branches
    }

    /// Offsets of the output blocks.
    pub fn output_offsets(&self) -> OutputOffsets {
        let q_gen = 1;
        let v_pq = q_gen + self.generators.len();
        let theta = v_pq + self.pq.len();
        let current = theta + self.non_slack.len();
        OutputOffsets {
            p_slack: 0,
            q_gen,
            v_pq,
            theta,
            current,
        }
    }

    pub fn role(&self, bus: usize, var: GridVariable) -> Role {
        let pos = |list: &[usize]| list.iter().position(|&b| b == bus);
        let off = self.output_offsets();
        match var {
            GridVariable::ActiveLoad | GridVariable::ReactiveLoad => Role::Exogenous,
            GridVariable::Voltage => match (pos(&self.generators), pos(&self.pq)) {
                (Some(i), _) => Role::Input(self.pv.len() + i),
                (None, Some(i)) => Role::Output(off.v_pq + i),
                _ => unreachable!("every bus is a generator or PQ bus"),
            },
            GridVariable::Angle => match pos(&self.non_slack) {
                Some(i) => Role::Output(off.theta + i),
                None => Role::Reference,
            },
            GridVariable::ActiveGeneration => match pos(&self.pv) {
                Some(i) => Role::Input(i),
                None if bus == self.slack => Role::Output(off.p_slack),
                None => Role::Exogenous,
            },
            GridVariable::ReactiveGeneration => match pos(&self.generators) {
                Some(i) => Role::Output(off.q_gen + i),
                None => Role::Exogenous,
            },
        }
    }

    /// Input vector read from a state.
    pub fn inputs(&self, state: &GridState) -> Vector {
        let mut u = Vector::zeros(self.input_dim());
        for (i, &b) in self.pv.iter().enumerate() {
            u[i] = state.p_gen[b];
        }
        for (i, &b) in self.generators.iter().enumerate() {
            u[self.pv.len() + i] = state.v[b];
        }
        u
    }

    /// Writes an input vector into the injections.
    pub fn apply(&self, u: &Vector, inj: &mut Injections) -> Result<()> {
        check_dim("grid inputs", self.input_dim(), u.len())?;
        for (i, &b) in self.pv.iter().enumerate() {
            inj.p_gen[b] = u[i];
        }
        for (i, &b) in self.generators.iter().enumerate() {
            inj.v_set[b] = u[self.pv.len() + i];
        }
        Ok(())
    }

    /// Output vector of a solved state.
    pub fn outputs(&self, net: &PowerNetwork, state: &GridState) -> Vector {
        let off = self.output_offsets();
        let mut y = Vector::zeros(self.output_dim());
        y[off.p_slack] = state.p_gen[self.slack];
        for (i, &b) in self.generators.iter().enumerate() {
            y[off.q_gen + i] = state.q_gen[b];
        }
        for (i, &b) in self.pq.iter().enumerate() {
            y[off.v_pq + i] = state.v[b];
        }
        for (i, &b) in self.non_slack.iter().enumerate() {
            y[off.theta + i] = state.theta[b];
        }
        y.rows_mut(off.current, self.branches)
            .copy_from(&state.currents_squared(net));
        y
    }

    pub fn input_labels(&self, net: &PowerNetwork) -> Vec<String> {
        let id = |b: usize| &net.buses()[b].id;
        self.pv
            .iter()
            .map(|&b| format!("p_gen[{}]", id(b)))
            .chain(self.generators.iter().map(|&b| format!("v[{}]", id(b))))
            .collect()
    }

    pub fn output_labels(&self, net: &PowerNetwork) -> Vec<String> {
        let id = |b: usize| &net.buses()[b].id;
        std::iter::once(format!("p_gen[{}]", id(self.slack)))
            .chain(self.generators.iter().map(|&b| format!("q_gen[{}]", id(b))))
            .chain(self.pq.iter().map(|&b| format!("v[{}]", id(b))))
            .chain(self.non_slack.iter().map(|&b| format!("theta[{}]", id(b))))
            .chain(net.branches().iter().map(|br| format!("i2[{}-{}]", br.from, br.to)))
            .collect()
    }
}

/// Start index of each output block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputOffsets {
    pub p_slack: usize,
    pub q_gen: usize,
    pub v_pq: usize,
    pub theta: usize,
    pub current: usize,
}

/// Sensitivity `∂y/∂u` at a solved state by the implicit function theorem.
pub fn grid_sensitivity(net: &PowerNetwork, solved: &GridState, partition: &Partition) -> Result<Matrix> {
    let n = net.bus_count();
    let layout = newton_layout(net);
    let jf = flow_jacobian(net, &solved.v, &solved.theta);
    let jx = select(&jf, &layout, &layout);
    // F(x, u) = s(u) - flows(x, u); dx/du = -F_x⁻¹ F_u = J_x⁻¹ F_u.
    let pu = partition.input_dim();
    let npv = partition.pv.len();
    let mut f_u = Matrix::zeros(layout.len(), pu);
    for (i, &b) in partition.pv.iter().enumerate() {
        let row = layout.iter().position(|&r| r == b).expect("PV bus has a P row");
        f_u[(row, i)] = 1.0;
    }
    for (i, &b) in partition.generators.iter().enumerate() {
        for (row, &r) in layout.iter().enumerate() {
            f_u[(row, npv + i)] = -jf[(r, n + b)];
        }
    }
    let dx = jx.lu().solve(&f_u).ok_or(Error::SingularJacobian)?;
    // Full (θ, v) sensitivity.
    let mut dz = Matrix::zeros(2 * n, pu);
    for (idx, &col) in layout.iter().enumerate() {
        dz.row_mut(col).copy_from(&dx.row(idx));
    }
    for (i, &b) in partition.generators.iter().enumerate() {
        dz[(n + b, npv + i)] = 1.0;
    }
    let off = partition.output_offsets();
    let mut dy = Matrix::zeros(partition.output_dim(), pu);
    dy.row_mut(off.p_slack).copy_from(&(jf.row(partition.slack) * &dz));
    for (i, &b) in partition.generators.iter().enumerate() {
        dy.row_mut(off.q_gen + i).copy_from(&(jf.row(n + b) * &dz));
    }
    for (i, &b) in partition.pq.iter().enumerate() {
        dy.row_mut(off.v_pq + i).copy_from(&dz.row(n + b));
    }
    for (i, &b) in partition.non_slack.iter().enumerate() {
        dy.row_mut(off.theta + i).copy_from(&dz.row(b));
    }
    let ji = current_jacobian(net, &solved.v, &solved.theta) * &dz;
    dy.view_mut((off.current, 0), (partition.branches, pu)).copy_from(&ji);
    Ok(dy)
}

/// Generation cost `a p² + b p` at one bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub quadratic: f64,
    pub linear: f64,
}

impl QuadraticCost {
    pub fn value(&self, p: f64) -> f64 {
        self.quadratic * p * p + self.linear * p
    }

    pub fn marginal(&self, p: f64) -> f64 {
        2.0 * self.quadratic * p + self.linear
    }
}

/// Optimal power flow instance for feedback dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct OpfProblem {
    pub network: PowerNetwork,
    /// Cost per bus; `None` for buses without dispatchable generation.
    pub costs: Vec<Option<QuadraticCost>>,
    pub p_load: Vector,
    pub q_load: Vector,
    pub partition: Partition,
}

impl OpfProblem {
    pub fn new(network: PowerNetwork, costs: Vec<Option<QuadraticCost>>, p_load: Vector, q_load: Vector) -> Result<Self> {
        let n = network.bus_count();
        check_dim("costs", n, costs.len())?;
        check_dim("p_load", n, p_load.len())?;
        check_dim("q_load", n, q_load.len())?;
        for (i, c) in costs.iter().enumerate() {
            match c {
                Some(c) if c.quadratic < 0.0 => {
                    return Err(Error::Config(format!("bus {} has a nonconvex cost", network.buses()[i].id)))
                }
                Some(_) if network.buses()[i].kind == BusKind::Pq => {
                    return Err(Error::Config(format!("PQ bus {} cannot carry a generation cost", network.buses()[i].id)))
                }
                _ => {}
            }
        }
        let partition = Partition::new(&network);
        Ok(Self {
            network,
            costs,
            p_load,
            q_load,
            partition,
        })
    }

    /// Injections for input `u` with the problem's loads.
    pub fn injections(&self, u: &Vector) -> Result<Injections> {
        let mut inj = Injections::zeros(self.network.bus_count());
        inj.p_load = self.p_load.clone();
        inj.q_load = self.q_load.clone();
        self.partition.apply(u, &mut inj)?;
        Ok(inj)
    }

    /// Power-flow state at input `u` from a fresh start.
    pub fn solve(&self, u: &Vector) -> Result<GridState> {
        let inj = self.injections(u)?;
        solve_power_flow(&self.network, &inj, &initial_state(&self.network, &inj))
    }

    /// Steady-state map `u ↦ y` with its exact sensitivity.
    pub fn plant_map(&self) -> SteadyStateMap {
        let (pu, qy) = (self.partition.input_dim(), self.partition.output_dim());
        let eval = self.clone();
        let sens = self.clone();
        SteadyStateMap::new(
            pu,
            qy,
            move |u| {
                let state = eval.solve(u)?;
                Ok(eval.partition.outputs(&eval.network, &state))
            },
            move |u| {
                let state = sens.solve(u)?;
                grid_sensitivity(&sens.network, &state, &sens.partition)
            },
        )
    }

    /// Generation cost on the stacked vector `[u; y]`.
    pub fn cost(&self) -> ScalarField {
        let pu = self.partition.input_dim();
        let dim = pu + self.partition.output_dim();
        let mut terms: Vec<(usize, QuadraticCost)> = Vec::new();
        for (i, &b) in self.partition.pv.iter().enumerate() {
            if let Some(c) = self.costs[b] {
                terms.push((i, c));
            }
        }
        if let Some(c) = self.costs[self.partition.slack] {
            terms.push((pu + self.partition.output_offsets().p_slack, c));
        }
        let (tv, tg) = (terms.clone(), terms.clone());
        let mut hess = Matrix::zeros(dim, dim);
        for &(i, c) in &terms {
            hess[(i, i)] = 2.0 * c.quadratic;
        }
        ScalarField::new(
            dim,
            move |z| Ok(tv.iter().map(|&(i, c)| c.value(z[i])).sum()),
            move |z| {
                let mut g = Vector::zeros(dim);
                for &(i, c) in &tg {
                    g[i] = c.marginal(z[i]);
                }
                Ok(g)
            },
        )
        .with_hessian(move |_| Ok(hess.clone()))
        .with_convexity(true)
    }

    /// Box `𝒰` on PV active generation and generator voltage setpoints.
    pub fn input_set(&self) -> ConvexSet {
        let buses = self.network.buses();
        let p = &self.partition;
        let lower: Vec<f64> = p
            .pv
            .iter()
            .map(|&b| buses[b].p_min)
            .chain(p.generators.iter().map(|&b| buses[b].v_min))
            .collect();
        let upper: Vec<f64> = p
            .pv
            .iter()
            .map(|&b| buses[b].p_max)
            .chain(p.generators.iter().map(|&b| buses[b].v_max))
            .collect();
        ConvexSet::boxed(&lower, &upper)
    }

    /// Output constraints `𝒳` as affine rows on `[u; y]`, with labels.
    /// Non-finite bounds produce no row.
    pub fn output_constraints(&self) -> (Option<ConstraintMap>, Vec<String>) {
        let p = &self.partition;
        let pu = p.input_dim();
        let dim = pu + p.output_dim();
        let off = p.output_offsets();
        let net = &self.network;
        let buses = net.buses();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        let mut labels = Vec::new();
        let mut bound = |col: usize, lo: f64, hi: f64, name: String| {
            if hi.is_finite() {
                rows.push((col, 1.0, hi));
                labels.push(format!("{name}<=max"));
            }
            if lo.is_finite() {
                rows.push((col, -1.0, -lo));
                labels.push(format!("{name}>=min"));
            }
        };
        let s = p.slack;
        bound(pu + off.p_slack, buses[s].p_min, buses[s].p_max, format!("p_gen[{}]", buses[s].id));
        for (i, &b) in p.generators.iter().enumerate() {
            bound(pu + off.q_gen + i, buses[b].q_min, buses[b].q_max, format!("q_gen[{}]", buses[b].id));
        }
        for (i, &b) in p.pq.iter().enumerate() {
            bound(pu + off.v_pq + i, buses[b].v_min, buses[b].v_max, format!("v[{}]", buses[b].id));
        }
        for (i, br) in net.branches().iter().enumerate() {
            bound(
                pu + off.current + i,
                f64::NEG_INFINITY,
                br.i_max * br.i_max,
                format!("i2[{}-{}]", br.from, br.to),
            );
        }
        if rows.is_empty() {
            return (None, labels);
        }
        let mut a = Matrix::zeros(rows.len(), dim);
        let mut b = Vector::zeros(rows.len());
        for (r, &(col, sign, rhs)) in rows.iter().enumerate() {
            a[(r, col)] = sign;
            b[r] = rhs;
        }
        (Some(ConstraintMap::affine(a, b)), labels)
    }
}

/// Feedback problem: cost on generation, `𝒰` from generator limits, `𝒳`
/// from slack and reactive limits, voltage bounds and line currents, with the
/// exact power-flow sensitivity.
pub fn assemble_feedback_problem(opf: &OpfProblem) -> Result<FeedbackProblem> {
    let p = &opf.partition;
    let mut problem = FeedbackProblem::new(
        opf.cost(),
        p.input_dim(),
        p.output_dim(),
        SensitivitySpec::exact(opf.plant_map()),
    )?
    .with_input_set(opf.input_set())?;
    if let (Some(g), _) = opf.output_constraints() {
        problem = problem.with_constraints(g)?;
    }
    Ok(problem)
}
