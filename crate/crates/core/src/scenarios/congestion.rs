//! Primal-dual congestion control: sources adjust rates against link prices,
//! links raise prices while overloaded.

use super::{horizon, labeled, no_events, ParamReader, RunOutput, ScenarioConfig, VIOLATION_PREFIX};
use crate::error::{Error, Result};
use crate::flows::{saddle_field, ConstraintMap, SaddleState, SaddleSystem, ScalarField};
use crate::sim::{integrate, Integration, IntegratorConfig, Method};
use crate::{Matrix, Vector};

/// Network utility problem `min -Σ wᵢ log xᵢ  s.t.  R x <= c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CongestionNetwork {
    /// Link-by-flow routing matrix with entries in `{0, 1}`.
    pub routing: Matrix,
    pub capacity: Vector,
    pub weights: Vector,
}

impl CongestionNetwork {
    pub fn new(routing: Matrix, capacity: Vector, weights: Vector) -> Result<Self> {
        if routing.iter().any(|&r| r != 0.0 && r != 1.0) {
            return Err(Error::Config("routing matrix entries must be 0 or 1".into()));
        }
        if capacity.len() != routing.nrows() || weights.len() != routing.ncols() {
            return Err(Error::Config(format!(
                "routing is {}x{} but there are {} capacities and {} weights",
                routing.nrows(),
                routing.ncols(),
                capacity.len(),
                weights.len()
            )));
        }
        if capacity.iter().any(|c| !(*c > 0.0)) || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("capacities and utility weights must be positive".into()));
        }
        Ok(Self {
            routing,
            capacity,
            weights,
        })
    }

    /// Two links in a chain, one long flow over both and one short flow per link.
    pub fn chain() -> Self {
        Self::new(
            Matrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]),
            Vector::from_element(2, 1.0),
            Vector::from_element(3, 1.0),
        )
        .expect("valid")
    }

    pub fn flows(&self) -> usize {
        self.routing.ncols()
    }

    pub fn links(&self) -> usize {
        self.routing.nrows()
    }

    /// Disutility `Φ(x) = -Σ wᵢ log xᵢ`, undefined for `x <= 0`.
    pub fn disutility(&self) -> ScalarField {
        let (wv, wg, wh) = (self.weights.clone(), self.weights.clone(), self.weights.clone());
        let n = self.flows();
        let domain = |x: &Vector| -> Result<()> {
            if x.iter().all(|&xi| xi > 0.0) {
                Ok(())
            } else {
                Err(Error::OutOfDomain(format!("nonpositive rate in {:?}", x.as_slice())))
            }
        };
        ScalarField::new(
            n,
            move |x| {
                domain(x)?;
                Ok(-x.iter().zip(wv.iter()).map(|(xi, wi)| wi * xi.ln()).sum::<f64>())
            },
            move |x| {
                domain(x)?;
                Ok(x.zip_map(&wg, |xi, wi| -wi / xi))
            },
        )
        .with_hessian(move |x| {
            domain(x)?;
            Ok(Matrix::from_diagonal(&x.zip_map(&wh, |xi, wi| wi / (xi * xi))))
        })
        .with_convexity(true)
    }

    /// Saddle system with link constraints `R x - c <= 0` priced by `μ`.
    pub fn saddle_system(&self) -> SaddleSystem {
        let mut sys = SaddleSystem::new(self.disutility());
        sys.ineq = Some(ConstraintMap::affine(self.routing.clone(), self.capacity.clone()));
        sys
    }

    /// Integrates the rate/price dynamics from `x0` with zero prices.
    pub fn run(&self, x0: &Vector, dt: f64, t_end: f64) -> Result<Integration> {
        let sys = self.saddle_system();
        let z0 = sys.join(&SaddleState {
            x: x0.clone(),
            mu: Vector::zeros(self.links()),
            lambda: Vector::zeros(0),
        });
        let cfg = IntegratorConfig::new(Method::Euler, dt, t_end)
            .projected(sys.state_set())
            .until_converged(1e-12);
        integrate(&saddle_field(&sys), &z0, &cfg)
    }
}

pub fn congestion_scenario(config: &ScenarioConfig) -> Result<RunOutput> {
    no_events(config)?;
    let plant = ParamReader::new("plant", &config.plant);
    let default = CongestionNetwork::chain();
    let routing = plant.matrix("routing", &default.routing)?;
    let capacity = Vector::from_vec(plant.per_item("capacity", 1.0, routing.nrows())?);
    let weights = Vector::from_vec(plant.per_item("weights", 1.0, routing.ncols())?);
    plant.finish()?;
    let net = CongestionNetwork::new(routing, capacity, weights)?;
    let ctrl = ParamReader::new("controller", &config.controller);
    let x0 = Vector::from_vec(ctrl.per_item("x0", 0.1, net.flows())?);
    ctrl.finish()?;
    let (dt, t_end) = horizon(config, 1e-2, 200.0)?;
    let run = net.run(&x0, dt, t_end)?;

    let sys = net.saddle_system();
    let phi = net.disutility();
    let mut labels: Vec<String> = (1..=net.flows()).map(|i| format!("x[{i}]")).collect();
    labels.extend((1..=net.links()).map(|j| format!("mu[{j}]")));
    labels.extend((1..=net.links()).map(|j| format!("y[{j}]")));
    labels.push("cost".into());
    labels.extend((1..=net.links()).map(|j| format!("{VIOLATION_PREFIX}link[{j}]")));
    let mut trace = labeled(labels);
    for (t, z) in run.trajectory.times.iter().zip(&run.trajectory.states) {
        let s = sys.split(z)?;
        let y = &net.routing * &s.x;
        let mut row: Vec<f64> = z.iter().copied().collect();
        row.extend(y.iter());
        row.push(phi.value(&s.x)?);
        row.extend((&y - &net.capacity).iter().map(|e| e.max(0.0)));
        trace.push(*t, Vector::from_vec(row));
    }
    let last = sys.split(run.trajectory.last().expect("nonempty"))?;
    let mut out = RunOutput::new(trace, run.status);
    out.kkt_residual = Some(sys.kkt_residual(&last)?);
    Ok(out)
}
