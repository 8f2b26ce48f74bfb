//! Gradient, penalty, barrier, projected and saddle-point vector fields.
//!
//! Metric convention: `Q` multiplies the gradient (`ẋ = -Q ∇Φ`, the Newton
//! flow uses `Q = (∇²Φ)⁻¹`). Projected flows project `-Q ∇Φ` onto the tangent
//! cone in the `Q⁻¹` norm, which is the pairing under which the projected
//! direction is still a descent direction.

use std::sync::Arc;

use crate::convex::{project_tangent, ConvexSet, Metric};
use crate::error::{check_dim, Error, Result};
use crate::{Matrix, Vector};

type ValueFn = Arc<dyn Fn(&Vector) -> Result<f64> + Send + Sync>;
type VecFn = Arc<dyn Fn(&Vector) -> Result<Vector> + Send + Sync>;
type MatFn = Arc<dyn Fn(&Vector) -> Result<Matrix> + Send + Sync>;

/// Differentiable scalar function `Φ: R^n -> R`.
#[derive(Clone)]
pub struct ScalarField {
    pub dim: usize,
    value: ValueFn,
    gradient: VecFn,
    hessian: Option<MatFn>,
    pub convex: bool,
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarField")
            .field("dim", &self.dim)
            .field("has_hessian", &self.hessian.is_some())
            .field("convex", &self.convex)
            .finish()
    }
}

impl ScalarField {
    pub fn new(
        dim: usize,
        value: impl Fn(&Vector) -> Result<f64> + Send + Sync + 'static,
        gradient: impl Fn(&Vector) -> Result<Vector> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            hessian: None,
            convex: false,
        }
    }

    pub fn with_hessian(
        mut self,
        hessian: impl Fn(&Vector) -> Result<Matrix> + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    pub fn with_convexity(mut self, convex: bool) -> Self {
        self.convex = convex;
        self
    }

    /// `½ (x - c)ᵀ H (x - c)`.
    pub fn quadratic(h: Matrix, center: Vector) -> Self {
        let n = center.len();
        let convex = h.clone().cholesky().is_some();
        let (h1, c1) = (h.clone(), center.clone());
        let (h2, c2) = (h.clone(), center);
        Self::new(
            n,
            move |x| {
                let d = x - &c1;
                Ok(0.5 * d.dot(&(&h1 * &d)))
            },
            move |x| Ok(&h2 * (x - &c2)),
        )
        .with_hessian(move |_| Ok(h.clone()))
        .with_convexity(convex)
    }

    /// `cᵀ x`.
    pub fn linear(c: Vector) -> Self {
        let n = c.len();
        let c1 = c.clone();
        Self::new(n, move |x| Ok(c1.dot(x)), move |_| Ok(c.clone()))
            .with_hessian(move |_| Ok(Matrix::zeros(n, n)))
            .with_convexity(true)
    }

    pub fn value(&self, x: &Vector) -> Result<f64> {
        check_dim("scalar field", self.dim, x.len())?;
        (self.value)(x)
    }

    pub fn gradient(&self, x: &Vector) -> Result<Vector> {
        check_dim("scalar field", self.dim, x.len())?;
        (self.gradient)(x)
    }

    pub fn has_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    /// Hessian at `x`; `None` when the field carries no Hessian.
    pub fn hessian(&self, x: &Vector) -> Option<Result<Matrix>> {
        self.hessian.as_ref().map(|h| h(x))
    }

    /// Pointwise sum; the Hessian is kept only if both terms have one.
    pub fn add(&self, other: &ScalarField) -> Self {
        let (a, b) = (self.clone(), other.clone());
        let (ga, gb) = (self.clone(), other.clone());
        let mut out = Self::new(
            self.dim,
            move |x| Ok(a.value(x)? + b.value(x)?),
            move |x| Ok(ga.gradient(x)? + gb.gradient(x)?),
        )
        .with_convexity(self.convex && other.convex);
        if let (Some(ha), Some(hb)) = (self.hessian.clone(), other.hessian.clone()) {
            out.hessian = Some(Arc::new(move |x| Ok(ha(x)? + hb(x)?)));
        }
        out
    }

    /// `Φ(A x + b)` for a field on the image space.
    pub fn compose_affine(&self, a: Matrix, b: Vector) -> Self {
        let n = a.ncols();
        let (inner, inner_g) = (self.clone(), self.clone());
        let (a1, b1, a2, b2) = (a.clone(), b.clone(), a.clone(), b.clone());
        let mut out = Self::new(
            n,
            move |x| inner.value(&(&a1 * x + &b1)),
            move |x| Ok(a2.transpose() * inner_g.gradient(&(&a2 * x + &b2))?),
        )
        .with_convexity(self.convex);
        if let Some(h) = self.hessian.clone() {
            out.hessian = Some(Arc::new(move |x| {
                Ok(a.transpose() * h(&(&a * x + &b))? * &a)
            }));
        }
        out
    }
}

/// Vector-valued map `g: R^n -> R^m` with its Jacobian.
#[derive(Clone)]
pub struct ConstraintMap {
    pub dim_in: usize,
    pub dim_out: usize,
    eval: VecFn,
    jacobian: MatFn,
}

impl std::fmt::Debug for ConstraintMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ConstraintMap({} -> {})", self.dim_in, self.dim_out)
    }
}

impl ConstraintMap {
    pub fn new(
        dim_in: usize,
        dim_out: usize,
        eval: impl Fn(&Vector) -> Result<Vector> + Send + Sync + 'static,
        jacobian: impl Fn(&Vector) -> Result<Matrix> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_in,
            dim_out,
            eval: Arc::new(eval),
            jacobian: Arc::new(jacobian),
        }
    }

    /// `g(x) = A x - b`.
    pub fn affine(a: Matrix, b: Vector) -> Self {
        let (n, m) = (a.ncols(), a.nrows());
        let a1 = a.clone();
        Self::new(n, m, move |x| Ok(&a1 * x - &b), move |_| Ok(a.clone()))
    }

    pub fn eval(&self, x: &Vector) -> Result<Vector> {
        check_dim("constraint map", self.dim_in, x.len())?;
        let g = (self.eval)(x)?;
        check_dim("constraint map output", self.dim_out, g.len())?;
        Ok(g)
    }

    pub fn jacobian(&self, x: &Vector) -> Result<Matrix> {
        check_dim("constraint map", self.dim_in, x.len())?;
        (self.jacobian)(x)
    }
}

/// Time-dependent vector field `ẋ = F(t, x)`.
pub trait VectorField {
    fn eval(&self, t: f64, x: &Vector) -> Result<Vector>;
}

impl<F> VectorField for F
where
    F: Fn(f64, &Vector) -> Result<Vector>,
{
    fn eval(&self, t: f64, x: &Vector) -> Result<Vector> {
        self(t, x)
    }
}

/// Shareable boxed vector field.
#[derive(Clone)]
pub struct Field(Arc<dyn Fn(f64, &Vector) -> Result<Vector> + Send + Sync>);

impl Field {
    pub fn new(f: impl Fn(f64, &Vector) -> Result<Vector> + Send + Sync + 'static) -> Self {
        Field(Arc::new(f))
    }

    pub fn autonomous(f: impl Fn(&Vector) -> Result<Vector> + Send + Sync + 'static) -> Self {
        Field(Arc::new(move |_, x| f(x)))
    }
}

impl VectorField for Field {
    fn eval(&self, t: f64, x: &Vector) -> Result<Vector> {
        (self.0)(t, x)
    }
}

/// Choice of gradient scaling for [`gradient_field`].
#[derive(Debug, Clone)]
pub enum GradientMetric {
    Fixed(Metric),
    /// `Q = (∇²Φ)⁻¹`; requires a positive definite Hessian.
    Newton,
}

/// `x ↦ -Q(x) ∇Φ(x)`.
pub fn gradient_field(phi: &ScalarField, metric: GradientMetric) -> Result<Field> {
    if matches!(metric, GradientMetric::Newton) && !phi.has_hessian() {
        return Err(Error::Config("Newton metric requires a Hessian".into()));
    }
    let phi = phi.clone();
    Ok(Field::autonomous(move |x| {
        let g = phi.gradient(x)?;
        match &metric {
            GradientMetric::Fixed(Metric::Identity) => Ok(-g),
            GradientMetric::Fixed(m) => Ok(-(m.at(x)? * g)),
            GradientMetric::Newton => {
                let h = phi.hessian(x).expect("checked above")?;
                let chol = h.cholesky().ok_or(Error::SingularHessian)?;
                Ok(-chol.solve(&g))
            }
        }
    }))
}

/// `(ρ/2) ‖max(g(x), 0)‖²`.
pub fn penalty_term(g: &ConstraintMap, rho: f64) -> ScalarField {
    let (gv, gg) = (g.clone(), g.clone());
    ScalarField::new(
        g.dim_in,
        move |x| {
            let v = gv.eval(x)?.map(|e| e.max(0.0));
            Ok(0.5 * rho * v.norm_squared())
        },
        move |x| {
            let v = gg.eval(x)?.map(|e| e.max(0.0));
            Ok(gg.jacobian(x)?.transpose() * v * rho)
        },
    )
    .with_convexity(true)
}

/// `(ρ/2) ‖h(x)‖²` for equality constraints.
pub fn equality_penalty_term(h: &ConstraintMap, rho: f64) -> ScalarField {
    let (hv, hg) = (h.clone(), h.clone());
    ScalarField::new(
        h.dim_in,
        move |x| Ok(0.5 * rho * hv.eval(x)?.norm_squared()),
        move |x| Ok(hg.jacobian(x)?.transpose() * hg.eval(x)? * rho),
    )
}

/// Log barrier `-(1/μ) Σ log(-gᵢ(x))`; fails outside the strict interior.
pub fn barrier_term(g: &ConstraintMap, mu: f64) -> ScalarField {
    fn interior(g: &Vector) -> Result<()> {
        if let Some(i) = g.iter().position(|&e| !(e < 0.0)) {
            return Err(Error::OutOfDomain(format!(
                "barrier row {i} has g = {:.3e} >= 0",
                g[i]
            )));
        }
        Ok(())
    }
    let (gv, gg) = (g.clone(), g.clone());
    ScalarField::new(
        g.dim_in,
        move |x| {
            let v = gv.eval(x)?;
            interior(&v)?;
            Ok(-v.iter().map(|e| (-e).ln()).sum::<f64>() / mu)
        },
        move |x| {
            let v = gg.eval(x)?;
            interior(&v)?;
            let w = v.map(|e| -1.0 / (mu * e));
            Ok(gg.jacobian(x)?.transpose() * w)
        },
    )
    .with_convexity(true)
}

/// `x ↦ Π_set[-Q ∇Φ](x)`, projected in the `Q⁻¹` norm.
pub fn projected_gradient_field(phi: &ScalarField, set: &ConvexSet, metric: Metric) -> Field {
    let phi = phi.clone();
    let set = set.clone();
    let inv = metric.inverse();
    Field::autonomous(move |x| {
        let g = phi.gradient(x)?;
        let v = match &metric {
            Metric::Identity => -g,
            m => -(m.at(x)? * g),
        };
        project_tangent(&set, x, &v, &inv)
    })
}

/// Primal-dual system `L(x, μ, λ) = Φ + μᵀg + λᵀh` with optional primal
/// augmentation `ρ` and dual regularization `ρ̂`.
#[derive(Clone, Debug)]
pub struct SaddleSystem {
    pub objective: ScalarField,
    /// Inequalities `g(x) <= 0`, dualized with `μ >= 0`.
    pub ineq: Option<ConstraintMap>,
    /// Equalities `h(x) = 0`, dualized with free `λ`.
    pub eq: Option<ConstraintMap>,
    pub primal_set: ConvexSet,
    pub rho_primal: f64,
    pub rho_dual: f64,
    pub primal_metric: Metric,
    pub dual_metric: Metric,
}

/// Split view of a saddle state `[x; μ; λ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleState {
    pub x: Vector,
    pub mu: Vector,
    pub lambda: Vector,
}

impl SaddleSystem {
    pub fn new(objective: ScalarField) -> Self {
        let n = objective.dim;
        Self {
            objective,
            ineq: None,
            eq: None,
            primal_set: ConvexSet::whole_space(n),
            rho_primal: 0.0,
            rho_dual: 0.0,
            primal_metric: Metric::Identity,
            dual_metric: Metric::Identity,
        }
    }

    pub fn primal_dim(&self) -> usize {
        self.objective.dim
    }

    pub fn ineq_dim(&self) -> usize {
        self.ineq.as_ref().map_or(0, |g| g.dim_out)
    }

    pub fn eq_dim(&self) -> usize {
        self.eq.as_ref().map_or(0, |h| h.dim_out)
    }

    pub fn state_dim(&self) -> usize {
        self.primal_dim() + self.ineq_dim() + self.eq_dim()
    }

    pub fn split(&self, z: &Vector) -> Result<SaddleState> {
        check_dim("saddle state", self.state_dim(), z.len())?;
        let (n, m, e) = (self.primal_dim(), self.ineq_dim(), self.eq_dim());
        Ok(SaddleState {
            x: z.rows(0, n).into_owned(),
            mu: z.rows(n, m).into_owned(),
            lambda: z.rows(n + m, e).into_owned(),
        })
    }

    pub fn join(&self, s: &SaddleState) -> Vector {
        let xs: Vec<f64> = s.x.iter().chain(s.mu.iter()).chain(s.lambda.iter()).copied().collect();
        Vector::from_vec(xs)
    }

    /// Set in which the full state lives: primal set × orthant × free.
    pub fn state_set(&self) -> ConvexSet {
        ConvexSet::product(&[
            self.primal_set.clone(),
            ConvexSet::NonnegOrthant(self.ineq_dim()),
            ConvexSet::whole_space(self.eq_dim()),
        ])
    }

    /// Gradient of the augmented Lagrangian in `x`.
    pub fn primal_gradient(&self, s: &SaddleState) -> Result<Vector> {
        let mut grad = self.objective.gradient(&s.x)?;
        if let Some(g) = &self.ineq {
            let gv = g.eval(&s.x)?;
            let weight = &s.mu + gv.map(|e| e.max(0.0)) * self.rho_primal;
            grad += g.jacobian(&s.x)?.transpose() * weight;
        }
        if let Some(h) = &self.eq {
            let hv = h.eval(&s.x)?;
            let weight = &s.lambda + hv * self.rho_primal;
            grad += h.jacobian(&s.x)?.transpose() * weight;
        }
        Ok(grad)
    }

    /// KKT residual: stationarity, primal feasibility and complementarity.
    pub fn kkt_residual(&self, s: &SaddleState) -> Result<f64> {
        let mut lagr = self.objective.gradient(&s.x)?;
        let mut r: f64 = 0.0;
        if let Some(g) = &self.ineq {
            let gv = g.eval(&s.x)?;
            lagr += g.jacobian(&s.x)?.transpose() * &s.mu;
            for i in 0..gv.len() {
                r = r.max(gv[i].max(0.0)).max((s.mu[i] * gv[i]).abs()).max((-s.mu[i]).max(0.0));
            }
        }
        if let Some(h) = &self.eq {
            let hv = h.eval(&s.x)?;
            lagr += h.jacobian(&s.x)?.transpose() * &s.lambda;
            r = r.max(hv.amax());
        }
        let proj = project_tangent(&self.primal_set, &s.x, &(-lagr), &Metric::Identity)?;
        Ok(r.max(proj.amax()))
    }
}

/// Vector field of the projected saddle flow on `[x; μ; λ]`:
///
/// ```text
/// ẋ = Π_X[-Q_p (∇Φ + J_gᵀ(μ + ρ max(g, 0)) + J_hᵀ(λ + ρ h))]
/// μ̇ = Π_{≥0}[Q_d (g - ρ̂ μ)]
/// λ̇ = h
/// ```
pub fn saddle_field(sys: &SaddleSystem) -> Field {
    let sys = sys.clone();
    let p_inv = sys.primal_metric.inverse();
    let d_inv = sys.dual_metric.inverse();
    Field::autonomous(move |z| {
        let s = sys.split(z)?;
        if s.mu.iter().any(|&m| m < 0.0) {
            return Err(Error::NegativeDual);
        }
        let grad = sys.primal_gradient(&s)?;
        let v = match &sys.primal_metric {
            Metric::Identity => -grad,
            m => -(m.at(&s.x)? * grad),
        };
        let dx = project_tangent(&sys.primal_set, &s.x, &v, &p_inv)?;
        let dmu = match &sys.ineq {
            Some(g) => {
                let raw = g.eval(&s.x)? - &s.mu * sys.rho_dual;
                let raw = match &sys.dual_metric {
                    Metric::Identity => raw,
                    m => m.at(&s.mu)? * raw,
                };
                project_tangent(&ConvexSet::NonnegOrthant(s.mu.len()), &s.mu, &raw, &d_inv)?
            }
            None => Vector::zeros(0),
        };
        let dlambda = match &sys.eq {
            Some(h) => h.eval(&s.x)?,
            None => Vector::zeros(0),
        };
        Ok(sys.join(&SaddleState {
            x: dx,
            mu: dmu,
            lambda: dlambda,
        }))
    })
}
