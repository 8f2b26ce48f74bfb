//! Linearized frequency dynamics with governor-turbine droop and integral
//! area-control-error feedback, plus the equivalent partial saddle flow.
//!
//! Per bus `j` and line `l = (j, k)` with net line outflow `(E p)_j`:
//!
//! ```text
//! M ω̇   = p_M - D ω - p_L - E p
//! ṗ_l   = b_l (ω_j - ω_k)
//! T ṗ_M = -(p_M - p_C + ω / R)
//! ṗ_C   = -K (B ω + E p)
//! ```

use super::{horizon, labeled, ParamReader, RunOutput, ScenarioConfig};
use crate::error::{Error, Result};
use crate::flows::Field;
use crate::plants::Signal;
use crate::sim::{integrate, IntegratorConfig, Method, Status, Trajectory};
use crate::{Matrix, Vector};

/// Network and per-bus control parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    /// Lines as 0-based bus pairs.
    pub lines: Vec<(usize, usize)>,
    pub susceptance: Vector,
    pub inertia: Vector,
    pub damping: Vector,
    pub time_constant: Vector,
    pub droop: Vector,
    pub integral_gain: Vector,
    /// Frequency bias of the area control error.
    pub bias: Vector,
}

/// Gains of the partial saddle flow
///
/// ```text
/// ṗ_M = -ε_M (β p_M - μ - ω)
/// μ̇   = ε_μ (p_M - p_L)
/// ```
///
/// equivalent to the physical loop under `p_C = K (M ω - μ / ε_μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleGains {
    pub eps_m: Vector,
    pub beta: Vector,
    pub eps_mu: Vector,
}

impl FrequencyGrid {
    /// Line graph `1 - 2 - ... - n` with unit parameters and `B = D`.
    pub fn line_graph(n: usize) -> Self {
        let ones = Vector::from_element(n, 1.0);
        Self {
            lines: (0..n.saturating_sub(1)).map(|j| (j, j + 1)).collect(),
            susceptance: Vector::from_element(n.saturating_sub(1), 1.0),
            inertia: ones.clone(),
            damping: ones.clone(),
            time_constant: ones.clone(),
            droop: ones.clone(),
            integral_gain: ones.clone(),
            bias: ones,
        }
    }

    pub fn buses(&self) -> usize {
        self.inertia.len()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.buses();
        let per_bus = [
            &self.damping,
            &self.time_constant,
            &self.droop,
            &self.integral_gain,
            &self.bias,
        ];
        if per_bus.iter().any(|v| v.len() != n) || self.susceptance.len() != self.lines.len() {
            return Err(Error::Config("frequency parameters have inconsistent lengths".into()));
        }
        let positive = |v: &Vector| v.iter().all(|x| *x > 0.0);
        if !positive(&self.inertia) || per_bus.iter().any(|v| !positive(v)) || !positive(&self.susceptance) {
            return Err(Error::Config("frequency parameters must be positive".into()));
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        while let Some(j) = stack.pop() {
            if n == 0 || seen[j] {
                continue;
            }
            seen[j] = true;
            for &(a, b) in &self.lines {
                if a >= n || b >= n || a == b {
                    return Err(Error::Config(format!("line ({}, {}) is not between two buses", a + 1, b + 1)));
                }
                if a == j {
                    stack.push(b);
                } else if b == j {
                    stack.push(a);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("frequency grid is not connected".into()));
        }
        Ok(())
    }

    /// Bus-by-line incidence with `+1` at the sending end.
    pub fn incidence(&self) -> Matrix {
        let mut e = Matrix::zeros(self.buses(), self.line_count());
        for (l, &(a, b)) in self.lines.iter().enumerate() {
            e[(a, l)] = 1.0;
            e[(b, l)] = -1.0;
        }
        e
    }

    /// Physical state layout: `[ω; p; p_M; p_C]`.
    pub fn physical_dim(&self) -> usize {
        3 * self.buses() + self.line_count()
    }

    /// Saddle state layout: `[ω; p; p_M; μ]`.
    pub fn saddle_dim(&self) -> usize {
        self.physical_dim()
    }

    /// Vector field of the physical loop under load `p_L(t)`.
    pub fn physical_field(&self, load: Signal) -> Field {
        let g = self.clone();
        let e = self.incidence();
        let (n, m) = (self.buses(), self.line_count());
        Field::new(move |t, x| {
            let w = x.rows(0, n);
            let p = x.rows(n, m);
            let pm = x.rows(n + m, n);
            let pc = x.rows(2 * n + m, n);
            let pl = load.at(t);
            let outflow = &e * p;
            let mut dx = Vector::zeros(x.len());
            for j in 0..n {
                dx[j] = (pm[j] - g.damping[j] * w[j] - pl[j] - outflow[j]) / g.inertia[j];
                dx[n + m + j] = -(pm[j] - pc[j] + w[j] / g.droop[j]) / g.time_constant[j];
                dx[2 * n + m + j] = -g.integral_gain[j] * (g.bias[j] * w[j] + outflow[j]);
            }
            for (l, &(a, b)) in g.lines.iter().enumerate() {
                dx[n + l] = g.susceptance[l] * (w[a] - w[b]);
            }
            Ok(dx)
        })
    }

    /// Saddle gains of the physical loop; requires `B = D` and `K M ≠ 1/R`.
    pub fn saddle_gains(&self) -> Result<SaddleGains> {
        let n = self.buses();
        let mut gains = SaddleGains {
            eps_m: Vector::zeros(n),
            beta: Vector::zeros(n),
            eps_mu: Vector::zeros(n),
        };
        for j in 0..n {
            if (self.bias[j] - self.damping[j]).abs() > 1e-12 * self.damping[j].max(1.0) {
                return Err(Error::Config(format!("bus {}: saddle equivalence requires B = D", j + 1)));
            }
            let s = self.integral_gain[j] * self.inertia[j] - 1.0 / self.droop[j];
            if s.abs() <= 1e-12 {
                return Err(Error::Config(format!("bus {}: gain mapping is degenerate for K M = 1/R", j + 1)));
            }
            gains.eps_m[j] = s / self.time_constant[j];
            gains.beta[j] = 1.0 / s;
            gains.eps_mu[j] = -self.integral_gain[j] / s;
        }
        Ok(gains)
    }

    /// Vector field of the partial saddle flow under load `p_L(t)`.
    pub fn saddle_field(&self, load: Signal) -> Result<Field> {
        let gains = self.saddle_gains()?;
        let g = self.clone();
        let e = self.incidence();
        let (n, m) = (self.buses(), self.line_count());
        Ok(Field::new(move |t, x| {
            let w = x.rows(0, n);
            let p = x.rows(n, m);
            let pm = x.rows(n + m, n);
            let mu = x.rows(2 * n + m, n);
            let pl = load.at(t);
            let outflow = &e * p;
            let mut dx = Vector::zeros(x.len());
            for j in 0..n {
                dx[j] = (pm[j] - g.damping[j] * w[j] - pl[j] - outflow[j]) / g.inertia[j];
                dx[n + m + j] = -gains.eps_m[j] * (gains.beta[j] * pm[j] - mu[j] - w[j]);
                dx[2 * n + m + j] = gains.eps_mu[j] * (pm[j] - pl[j]);
            }
            for (l, &(a, b)) in g.lines.iter().enumerate() {
                dx[n + l] = g.susceptance[l] * (w[a] - w[b]);
            }
            Ok(dx)
        }))
    }

    /// Physical state `[ω; p; p_M; p_C]` from a saddle state `[ω; p; p_M; μ]`.
    pub fn saddle_to_physical(&self, gains: &SaddleGains, z: &Vector) -> Vector {
        let (n, m) = (self.buses(), self.line_count());
        let mut x = z.clone();
        for j in 0..n {
            x[2 * n + m + j] = self.integral_gain[j] * (self.inertia[j] * z[j] - z[2 * n + m + j] / gains.eps_mu[j]);
        }
        x
    }

    /// Saddle state from a physical state; inverse of [`Self::saddle_to_physical`].
    pub fn physical_to_saddle(&self, gains: &SaddleGains, x: &Vector) -> Vector {
        let (n, m) = (self.buses(), self.line_count());
        let mut z = x.clone();
        for j in 0..n {
            z[2 * n + m + j] = gains.eps_mu[j] * (self.inertia[j] * x[j] - x[2 * n + m + j] / self.integral_gain[j]);
        }
        z
    }

    pub fn state_labels(&self, dual: bool) -> Vec<String> {
        let n = self.buses();
        let mut labels: Vec<String> = (1..=n).map(|j| format!("omega[{j}]")).collect();
        labels.extend(self.lines.iter().map(|(a, b)| format!("p_line[{}-{}]", a + 1, b + 1)));
        labels.extend((1..=n).map(|j| format!("p_m[{j}]")));
        let last = if dual { "mu" } else { "p_c" };
        labels.extend((1..=n).map(|j| format!("{last}[{j}]")));
        labels
    }
}

/// Control law realized by the secondary loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencyMode {
    /// Physical equations with `B = D`.
    Physical,
    /// Partial saddle flow, mapped back to physical coordinates.
    SaddleEquivalent,
    /// Physical equations with the gradient ACE gain `B = D + 1/R`.
    AceGradient,
}

impl FrequencyMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "physical" => Ok(Self::Physical),
            "saddle_equivalent" => Ok(Self::SaddleEquivalent),
            "ace_gradient" => Ok(Self::AceGradient),
            other => Err(Error::Config(format!("unknown frequency mode {other}"))),
        }
    }
}

/// Load signal from `p_load[j]` events (1-based bus numbers).
pub fn load_profile(n: usize, events: &[super::Event]) -> Result<Signal> {
    let mut current = Vector::zeros(n);
    let mut sorted = events.to_vec();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut steps = Vec::new();
    for ev in &sorted {
        let bus = ev
            .target
            .strip_prefix("p_load[")
            .and_then(|s| s.strip_suffix(']'))
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&j| j >= 1 && j <= n)
            .ok_or_else(|| Error::Config(format!("unknown frequency event target {}", ev.target)))?;
        if !(ev.t >= 0.0) {
            return Err(Error::Config("event times must be nonnegative".into()));
        }
        current[bus - 1] = ev.value;
        steps.push((ev.t, current.clone()));
    }
    Ok(Signal::steps(Vector::zeros(n), steps))
}

/// Physical trajectory from rest for the given grid, mode and load.
pub fn simulate_frequency(
    grid: &FrequencyGrid,
    mode: FrequencyMode,
    load: &Signal,
    dt: f64,
    t_end: f64,
) -> Result<(Trajectory, Status)> {
    grid.validate()?;
    let cfg = IntegratorConfig::new(Method::Rk4, dt, t_end);
    let x0 = Vector::zeros(grid.physical_dim());
    match mode {
        FrequencyMode::Physical => {
            let run = integrate(&grid.physical_field(load.clone()), &x0, &cfg)?;
            Ok((run.trajectory, run.status))
        }
        FrequencyMode::AceGradient => {
            let mut g = grid.clone();
            g.bias = &g.damping + g.droop.map(|r| 1.0 / r);
            let run = integrate(&g.physical_field(load.clone()), &x0, &cfg)?;
            Ok((run.trajectory, run.status))
        }
        FrequencyMode::SaddleEquivalent => {
            let gains = grid.saddle_gains()?;
            let z0 = grid.physical_to_saddle(&gains, &x0);
            let run = integrate(&grid.saddle_field(load.clone())?, &z0, &cfg)?;
            let mut traj = run.trajectory;
            for z in &mut traj.states {
                *z = grid.saddle_to_physical(&gains, z);
            }
            Ok((traj, run.status))
        }
    }
}

/// Tolerance below which frequency and line-flow deviations count as settled.
pub const SETTLED: f64 = 1e-6;

/// First time after which `‖ω‖∞` and `|p_l|` stay below [`SETTLED`].
pub fn settle_time(grid: &FrequencyGrid, traj: &Trajectory) -> Option<f64> {
    let k = grid.buses() + grid.line_count();
    let bad = |x: &Vector| x.rows(0, k).amax() > SETTLED;
    match traj.states.iter().rposition(bad) {
        None => traj.times.first().copied(),
        Some(i) if i + 1 < traj.len() => Some(traj.times[i + 1]),
        Some(_) => None,
    }
}

pub fn frequency_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    let plant = ParamReader::new("plant", &config.plant);
    let n = plant.usize("buses", 3)?;
    let mut grid = FrequencyGrid::line_graph(n);
    let default_lines = Matrix::from_fn(grid.line_count(), 2, |l, c| (l + c + 1) as f64);
    let lines = plant.matrix("lines", &default_lines)?;
    if lines.ncols() != 2 || lines.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err(Error::Config("plant.lines: expected pairs of 1-based bus numbers".into()));
    }
    grid.lines = lines.row_iter().map(|r| (r[0] as usize - 1, r[1] as usize - 1)).collect();
    let m = grid.line_count();
    grid.susceptance = Vector::from_vec(plant.per_item("susceptance", 1.0, m)?);
    grid.inertia = Vector::from_vec(plant.per_item("inertia", 1.0, n)?);
    grid.damping = Vector::from_vec(plant.per_item("damping", 1.0, n)?);
    grid.time_constant = Vector::from_vec(plant.per_item("time_constant", 1.0, n)?);
    grid.droop = Vector::from_vec(plant.per_item("droop", 1.0, n)?);
    plant.finish()?;
    let ctrl = ParamReader::new("controller", &config.controller);
    let mode = FrequencyMode::parse(&ctrl.string("mode", "physical")?)?;
    grid.integral_gain = Vector::from_vec(ctrl.per_item("integral_gain", 1.0, n)?);
    ctrl.finish()?;
    grid.bias = grid.damping.clone();
    grid.validate()?;
    let load = load_profile(n, &config.disturbances)?;
    let (dt, t_end) = horizon(config, 1e-2, 200.0)?;
    let (traj, status) = simulate_frequency(&grid, mode, &load, dt, t_end)?;

    let mut labels = grid.state_labels(false);
    labels.extend((1..=n).map(|j| format!("p_load[{j}]")));
    let mut trace = labeled(labels);
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let row: Vec<f64> = x.iter().copied().chain(load.at(*t).iter().copied()).collect();
        trace.push(*t, Vector::from_vec(row));
    }
    let last = traj.last().expect("nonempty");
    let pl = load.at(*traj.times.last().expect("nonempty"));
    let mismatch = (last.rows(n + m, n) - &pl).amax();
    let mut out = RunOutput::new(trace, status)
        .metric("final_max_frequency_deviation", last.rows(0, n).amax())
        .metric("final_max_line_flow", if m == 0 { 0.0 } else { last.rows(n, m).amax() })
        .metric("final_generation_mismatch", mismatch)
        .metric("settle_time", settle_time(&grid, &traj).unwrap_or(f64::INFINITY));
    if mode == FrequencyMode::SaddleEquivalent {
        let (direct, _) = simulate_frequency(&grid, FrequencyMode::Physical, &load, dt, t_end)?;
        out = out.metric("physical_gap", direct.sup_gap(&traj));
    }
    Ok(out)
}
