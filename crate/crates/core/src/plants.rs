//! Plant models: LTI and nonlinear dynamics, steady-state maps and saturation.

use std::sync::Arc;

use crate::convex::{project_point, ConvexSet};
use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

type SignalFn = Arc<dyn Fn(f64) -> Vector + Send + Sync>;

/// Exogenous signal `d(t)`, usually an additive output disturbance.
#[derive(Clone)]
pub enum Signal {
    /// `initial` until the first step, then the value of the latest step.
    Steps { initial: Vector, steps: Vec<(f64, Vector)> },
    /// Smooth signal with an optional exact rate.
    Function {
        dim: usize,
        value: SignalFn,
        rate: Option<SignalFn>,
    },
}

impl std::fmt::Debug for Signal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Signal::Steps { initial, steps } => f
                .debug_struct("Steps")
                .field("initial", initial)
                .field("steps", steps)
                .finish(),
            Signal::Function { dim, rate, .. } => write!(f, "Function(dim {dim}, exact rate {})", rate.is_some()),
        }
    }
}

impl Signal {
    pub fn zero(dim: usize) -> Self {
        Signal::constant(Vector::zeros(dim))
    }

    pub fn constant(value: Vector) -> Self {
        Signal::Steps {
            initial: value,
            steps: Vec::new(),
        }
    }

    /// Piecewise-constant signal; steps are sorted by time.
    pub fn steps(initial: Vector, mut steps: Vec<(f64, Vector)>) -> Self {
        steps.sort_by(|a, b| a.0.total_cmp(&b.0));
        Signal::Steps { initial, steps }
    }

    pub fn function(
        dim: usize,
        value: impl Fn(f64) -> Vector + Send + Sync + 'static,
        rate: Option<SignalFn>,
    ) -> Self {
        Signal::Function {
            dim,
            value: Arc::new(value),
            rate,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Signal::Steps { initial, .. } => initial.len(),
            Signal::Function { dim, .. } => *dim,
        }
    }

    pub fn at(&self, t: f64) -> Vector {
        match self {
            Signal::Steps { initial, steps } => steps
                .iter()
                .rev()
                .find(|(ts, _)| t >= *ts)
                .map_or_else(|| initial.clone(), |(_, v)| v.clone()),
            Signal::Function { value, .. } => value(t),
        }
    }

    /// `ḋ(t)`: exact when available, zero between steps, otherwise a central
    /// difference with step `1e-6`.
    pub fn rate(&self, t: f64) -> Vector {
        match self {
            Signal::Steps { initial, .. } => Vector::zeros(initial.len()),
            Signal::Function { rate: Some(r), .. } => r(t),
            Signal::Function { value, .. } => {
                let h = 1e-6;
                (value(t + h) - value(t - h)) / (2.0 * h)
            }
        }
    }

    /// Times at which a step occurs.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Signal::Steps { steps, .. } => steps.iter().map(|s| s.0).collect(),
            Signal::Function { .. } => Vec::new(),
        }
    }
}

type DynFn = Arc<dyn Fn(&Vector, &Vector) -> Result<Vector> + Send + Sync>;

/// `ζ̇ = f(ζ, u)`, `y = g(ζ, u) + d(t)`.
#[derive(Clone)]
pub struct DynamicPlant {
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    dynamics: DynFn,
    output: DynFn,
    pub disturbance: Signal,
    /// RK4 step used when simulating to steady state.
    pub settle_dt: f64,
}

impl std::fmt::Debug for DynamicPlant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DynamicPlant")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .finish()
    }
}

/// Settling threshold on `‖f(ζ, u)‖`.
pub const SETTLE_TOL: f64 = 1e-9;
/// Simulated-time cap when settling.
pub const SETTLE_TIME_CAP: f64 = 1e4;

impl DynamicPlant {
    pub fn new(
        dims: (usize, usize, usize),
        dynamics: impl Fn(&Vector, &Vector) -> Result<Vector> + Send + Sync + 'static,
        output: impl Fn(&Vector, &Vector) -> Result<Vector> + Send + Sync + 'static,
    ) -> Self {
        Self {
            state_dim: dims.0,
            input_dim: dims.1,
            output_dim: dims.2,
            dynamics: Arc::new(dynamics),
            output: Arc::new(output),
            disturbance: Signal::zero(dims.2),
            settle_dt: 1e-2,
        }
    }

    pub fn with_disturbance(mut self, d: Signal) -> Self {
        self.disturbance = d;
        self
    }

    pub fn dynamics(&self, state: &Vector, u: &Vector) -> Result<Vector> {
        check_dim("plant state", self.state_dim, state.len())?;
        check_dim("plant input", self.input_dim, u.len())?;
        (self.dynamics)(state, u)
    }

    /// Measured output at time `t`, disturbance included.
    pub fn output(&self, state: &Vector, u: &Vector, t: f64) -> Result<Vector> {
        Ok((self.output)(state, u)? + self.disturbance.at(t))
    }

    /// Simulates with constant `u` from `state0` until `‖f‖ <= 1e-9`.
    pub fn settle(&self, u: &Vector, state0: &Vector) -> Result<Vector> {
        let h = self.settle_dt;
        let mut x = state0.clone();
        let mut t = 0.0;
        loop {
            let k1 = self.dynamics(&x, u)?;
            if k1.norm() <= SETTLE_TOL {
                return Ok(x);
            }
            if t >= SETTLE_TIME_CAP || !k1.iter().all(|v| v.is_finite()) {
                return Err(Error::NoSettle);
            }
            let k2 = self.dynamics(&(&x + &k1 * (0.5 * h)), u)?;
            let k3 = self.dynamics(&(&x + &k2 * (0.5 * h)), u)?;
            let k4 = self.dynamics(&(&x + &k3 * h), u)?;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            t += h;
        }
    }
}

type MapFn = Arc<dyn Fn(&Vector) -> Result<Vector> + Send + Sync>;
type JacFn = Arc<dyn Fn(&Vector) -> Result<Matrix> + Send + Sync>;

/// Steady-state input-output map `u ↦ h(u)` with its sensitivity `∇h(u)`.
#[derive(Clone)]
pub struct SteadyStateMap {
    pub input_dim: usize,
    pub output_dim: usize,
    map: MapFn,
    sensitivity: JacFn,
}

impl std::fmt::Debug for SteadyStateMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SteadyStateMap({} -> {})", self.input_dim, self.output_dim)
    }
}

impl SteadyStateMap {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        map: impl Fn(&Vector) -> Result<Vector> + Send + Sync + 'static,
        sensitivity: impl Fn(&Vector) -> Result<Matrix> + Send + Sync + 'static,
    ) -> Self {
        Self {
            input_dim,
            output_dim,
            map: Arc::new(map),
            sensitivity: Arc::new(sensitivity),
        }
    }

    /// `h(u) = H u`.
    pub fn linear(h: Matrix) -> Self {
        let (q, p) = h.shape();
        let h1 = h.clone();
        Self::new(p, q, move |u| Ok(&h1 * u), move |_| Ok(h.clone()))
    }

    pub fn eval(&self, u: &Vector) -> Result<Vector> {
        check_dim("steady-state map input", self.input_dim, u.len())?;
        (self.map)(u)
    }

    pub fn sensitivity(&self, u: &Vector) -> Result<Matrix> {
        check_dim("steady-state map input", self.input_dim, u.len())?;
        (self.sensitivity)(u)
    }
}

/// Plant seen by a controller.
#[derive(Clone, Debug)]
pub enum Plant {
    Dynamic(DynamicPlant),
    /// Static plant `y = h(u) + d(t)`.
    Algebraic { map: SteadyStateMap, disturbance: Signal },
}

impl Plant {
    pub fn algebraic(map: SteadyStateMap) -> Self {
        let q = map.output_dim;
        Plant::Algebraic {
            map,
            disturbance: Signal::zero(q),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Plant::Dynamic(p) => p.input_dim,
            Plant::Algebraic { map, .. } => map.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Plant::Dynamic(p) => p.output_dim,
            Plant::Algebraic { map, .. } => map.output_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Plant::Dynamic(p) => p.state_dim,
            Plant::Algebraic { .. } => 0,
        }
    }

    pub fn disturbance(&self) -> &Signal {
        match self {
            Plant::Dynamic(p) => &p.disturbance,
            Plant::Algebraic { disturbance, .. } => disturbance,
        }
    }

    pub fn with_disturbance(self, d: Signal) -> Self {
        match self {
            Plant::Dynamic(p) => Plant::Dynamic(p.with_disturbance(d)),
            Plant::Algebraic { map, .. } => Plant::Algebraic { map, disturbance: d },
        }
    }
}

/// Plant preceded by an input saturation `ū = P_U(u)`.
#[derive(Clone, Debug)]
pub struct SaturatedPlant {
    pub plant: Plant,
    pub input_set: ConvexSet,
}

impl SaturatedPlant {
    pub fn applied_input(&self, u: &Vector) -> Result<Vector> {
        project_point(&self.input_set, u)
    }
}

/// `ζ̈ + a ζ̇ + b (ζ - u) = 0` with output `y = ζ`; state `(ζ, ζ̇)`.
pub fn second_order_benchmark(a: f64, b: f64) -> DynamicPlant {
    DynamicPlant::new(
        (2, 1, 1),
        move |z, u| Ok(Vector::from_vec(vec![z[1], -a * z[1] - b * (z[0] - u[0])])),
        |z, _| Ok(Vector::from_vec(vec![z[0]])),
    )
}

/// Largest real part of the eigenvalues of a square matrix.
pub fn spectral_abscissa(a: &Matrix) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `ζ̇ = A ζ + B u`, `y = C ζ + D u + d` together with its steady-state map
/// `h(u) = (D - C A⁻¹ B) u`.
pub fn lti_plant(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    d: &Matrix,
    disturbance: Signal,
) -> Result<(DynamicPlant, SteadyStateMap)> {
    let n = a.nrows();
    check_dim("A columns", n, a.ncols())?;
    check_dim("B rows", n, b.nrows())?;
    check_dim("C columns", n, c.ncols())?;
    check_dim("D rows", c.nrows(), d.nrows())?;
    check_dim("D columns", b.ncols(), d.ncols())?;
    check_dim("disturbance", c.nrows(), disturbance.dim())?;
    let a_inv = a.clone().try_inverse().ok_or(Error::SingularA)?;
    if spectral_abscissa(a) >= 0.0 {
        return Err(Error::NotStable);
    }
    let h = d - c * a_inv * b;
    let (a1, b1, c1, d1) = (a.clone(), b.clone(), c.clone(), d.clone());
    let plant = DynamicPlant::new(
        (n, b.ncols(), c.nrows()),
        move |z, u| Ok(&a1 * z + &b1 * u),
        move |z, u| Ok(&c1 * z + &d1 * u),
    )
    .with_disturbance(disturbance);
    Ok((plant, SteadyStateMap::linear(h)))
}

/// Central-difference sensitivity of the settled output map at `u`.
///
/// Each column simulates the plant to steady state at `u ± δ eⱼ`, starting
/// from the steady state at `u`.
pub fn estimate_sensitivity(plant: &DynamicPlant, u: &Vector) -> Result<Matrix> {
    check_dim("plant input", plant.input_dim, u.len())?;
    let base = plant.settle(u, &Vector::zeros(plant.state_dim))?;
    let delta = 1e-3 * (1.0 + u.amax());
    let mut jac = Matrix::zeros(plant.output_dim, plant.input_dim);
    for j in 0..plant.input_dim {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += delta;
        um[j] -= delta;
        let yp = (plant.output)(&plant.settle(&up, &base)?, &up)?;
        let ym = (plant.output)(&plant.settle(&um, &base)?, &um)?;
        jac.set_column(j, &((yp - ym) / (2.0 * delta)));
    }
    Ok(jac)
}
