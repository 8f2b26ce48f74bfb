//! Timescale-separation certificates and LMI-based closed-loop verification.
//!
//! For an LTI plant `ζ̇ = Aζ + Bu` with Hurwitz `A`, the Lyapunov solution of
//! `AᵀP + PA = -I` gives `W(ζ, u) = (ζ - ĥ(u))ᵀ P (ζ - ĥ(u))` with
//!
//! ```text
//! Ẇ            <= -γ ‖ζ - ĥ(u)‖²,   γ = 1
//! ‖∇_u W‖      <=  ω ‖ζ - ĥ(u)‖,    ω = 2 ‖P‖ ‖A⁻¹B‖
//! ```
//!
//! and a gradient controller with gain below `ε* = γ / (ω L)` is stable when
//! the reduced cost has an `L`-Lipschitz gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::plants::spectral_abscissa;
use crate::Matrix;

/// Constants of the boundary-layer Lyapunov inequalities.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLayerCert {
    /// Lyapunov matrix of the plant.
    pub p: Matrix,
    /// Decay constant.
    pub gamma: f64,
    /// Input-sensitivity constant.
    pub omega: f64,
    /// Lipschitz constant of the reduced gradient.
    pub lipschitz: f64,
}

/// Largest gain for which timescale separation guarantees stability.
pub fn epsilon_star(cert: &BoundaryLayerCert) -> f64 {
    cert.gamma / (cert.omega * cert.lipschitz)
}

/// Solves `AᵀP + PA = -Q` by vectorization.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    check_dim("Lyapunov A", n, a.ncols())?;
    check_dim("Lyapunov Q", n, q.nrows())?;
    let eye = Matrix::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -Matrix::from_column_slice(n * n, 1, q.as_slice());
    let sol = op.lu().solve(&rhs).ok_or(Error::NotHurwitz)?;
    let p = Matrix::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Boundary-layer certificate for `ζ̇ = Aζ + Bu` and a reduced cost whose
/// gradient is `lipschitz`-Lipschitz.
pub fn lti_boundary_layer_cert(a: &Matrix, b: &Matrix, lipschitz: f64) -> Result<BoundaryLayerCert> {
    check_dim("B rows", a.nrows(), b.nrows())?;
    if !a.is_square() || spectral_abscissa(a) >= 0.0 {
        return Err(Error::NotHurwitz);
    }
    let n = a.nrows();
    let p = solve_lyapunov(a, &Matrix::identity(n, n))?;
    let a_inv_b = a.clone().try_inverse().ok_or(Error::NotHurwitz)? * b;
    let omega = 2.0 * p.norm_spectral() * a_inv_b.norm_spectral();
    Ok(BoundaryLayerCert {
        p,
        gamma: 1.0,
        omega,
        lipschitz,
    })
}

trait SpectralNorm {
    fn norm_spectral(&self) -> f64;
}

impl SpectralNorm for Matrix {
    fn norm_spectral(&self) -> f64 {
        self.clone().svd(false, false).singular_values.max()
    }
}

/// Worst ratios of the two boundary-layer inequalities over random samples of
/// `z = ζ - ĥ(u)`: returns `(max γ‖z‖² / (-Ẇ), max ‖∇_uW‖ / (ω‖z‖))`.
/// Both are at most one when the certificate holds.
pub fn sample_boundary_layer(a: &Matrix, b: &Matrix, cert: &BoundaryLayerCert, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lyap = a.transpose() * &cert.p + &cert.p * a;
    let sens = &cert.p * a.clone().try_inverse().ok_or(Error::NotHurwitz)? * b * 2.0;
    let mut decay: f64 = 0.0;
    let mut input: f64 = 0.0;
    for _ in 0..samples {
        let z = crate::Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let zz = z.norm_squared();
        if zz == 0.0 {
            continue;
        }
        let wdot = z.dot(&(&lyap * &z));
        let ratio = if wdot < 0.0 { cert.gamma * zz / -wdot } else { f64::INFINITY };
        decay = decay.max(ratio);
        input = input.max((sens.transpose() * &z).norm() / (cert.omega * zz.sqrt()));
    }
    Ok((decay, input))
}

/// Data of the LMI
///
/// ```text
/// [𝐀ᵀ𝐏 + 𝐏𝐀  𝐏𝐁]   [𝐂 0]ᵀ     [𝐂 0]
/// [𝐁ᵀ𝐏       0 ] + [0 I]  Ξ_ε [0 I]  ≺ 0
/// ```
///
/// with `Ξ_ε = [[-2ε²mL I, ε(L+m) I], [ε(L+m) I, -2 I]]`, the multiplier of an
/// `ε`-scaled gradient of an `m`-strongly convex, `L`-smooth function.
#[derive(Debug, Clone, PartialEq)]
pub struct IqcData {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub m: f64,
    pub l: f64,
    pub eps: f64,
    pub p: Matrix,
}

/// Outcome of [`verify_lmi`] with the largest eigenvalue of the LMI matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LmiVerdict {
    Certified(f64),
    NotCertified(f64),
}

impl LmiVerdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, LmiVerdict::Certified(_))
    }

    pub fn max_eigenvalue(&self) -> f64 {
        match self {
            LmiVerdict::Certified(v) | LmiVerdict::NotCertified(v) => *v,
        }
    }
}

/// Margin required for certification.
pub const LMI_MARGIN: f64 = 1e-9;

impl IqcData {
    /// Stacked data for `ζ̇ = Aζ + Bu`, `y = Cζ`, `u̇ = -ε Hᵀ ∇Φ(y)` with
    /// `H = -C A⁻¹ B`: state `[ζ; u]`, channel `y ↦ ε∇Φ(y)`.
    pub fn gradient_feedback(a: &Matrix, b: &Matrix, c: &Matrix, m: f64, l: f64, eps: f64) -> Result<Self> {
        let (n, p) = (a.nrows(), b.ncols());
        let q = c.nrows();
        check_dim("B rows", n, b.nrows())?;
        check_dim("C columns", n, c.ncols())?;
        let h = -(c * a.clone().try_inverse().ok_or(Error::SingularA)? * b);
        let mut big_a = Matrix::zeros(n + p, n + p);
        big_a.view_mut((0, 0), (n, n)).copy_from(a);
        big_a.view_mut((0, n), (n, p)).copy_from(b);
        let mut big_b = Matrix::zeros(n + p, q);
        big_b.view_mut((n, 0), (p, q)).copy_from(&(-h.transpose()));
        let mut big_c = Matrix::zeros(q, n + p);
        big_c.view_mut((0, 0), (q, n)).copy_from(c);
        Ok(Self {
            a: big_a,
            b: big_b,
            c: big_c,
            m,
            l,
            eps,
            p: Matrix::identity(n + p, n + p),
        })
    }

    pub fn with_p(mut self, p: Matrix) -> Self {
        self.p = p;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let k = self.b.ncols();
        check_dim("LMI A columns", n, self.a.ncols())?;
        check_dim("LMI B rows", n, self.b.nrows())?;
        check_dim("LMI C rows", k, self.c.nrows())?;
        check_dim("LMI C columns", n, self.c.ncols())?;
        check_dim("LMI P rows", n, self.p.nrows())?;
        check_dim("LMI P columns", n, self.p.ncols())
    }

    /// Assembled LMI matrix.
    pub fn lmi_matrix(&self) -> Result<Matrix> {
        self.validate()?;
        let n = self.a.nrows();
        let k = self.b.ncols();
        let mut big = Matrix::zeros(n + k, n + k);
        big.view_mut((0, 0), (n, n))
            .copy_from(&(self.a.transpose() * &self.p + &self.p * &self.a));
        let pb = &self.p * &self.b;
        big.view_mut((0, n), (n, k)).copy_from(&pb);
        big.view_mut((n, 0), (k, n)).copy_from(&pb.transpose());
        // [C 0; 0 I]ᵀ Ξ [C 0; 0 I]
        let (e, m, l) = (self.eps, self.m, self.l);
        let ctc = self.c.transpose() * &self.c;
        let cross = self.c.transpose() * (e * (l + m));
        let mut top = big.view((0, 0), (n, n)).into_owned();
        top += ctc * (-2.0 * e * e * m * l);
        big.view_mut((0, 0), (n, n)).copy_from(&top);
        let off = big.view((0, n), (n, k)).into_owned() + &cross;
        big.view_mut((0, n), (n, k)).copy_from(&off);
        big.view_mut((n, 0), (k, n)).copy_from(&off.transpose());
        let low = big.view((n, n), (k, k)).into_owned() - Matrix::identity(k, k) * 2.0;
        big.view_mut((n, n), (k, k)).copy_from(&low);
        Ok(big)
    }
}

/// Certified iff the largest eigenvalue of the LMI matrix is at most `-1e-9`.
pub fn verify_lmi(data: &IqcData) -> Result<LmiVerdict> {
    let m = data.lmi_matrix()?;
    let top = m.symmetric_eigenvalues().max();
    Ok(if top <= -LMI_MARGIN {
        LmiVerdict::Certified(top)
    } else {
        LmiVerdict::NotCertified(top)
    })
}

/// Heuristic search for a certifying `P`.
///
/// Candidates are Lyapunov matrices of the loop linearized with slopes in
/// `[εm, εL]`, over a range of scalings, followed by random `MᵀM + δI`.
/// Returns the best candidate and its verdict; failure to find one does not
/// prove that none exists.
pub fn search_lmi_certificate(data: &IqcData, random_trials: usize, seed: u64) -> Result<(Matrix, LmiVerdict)> {
    data.validate()?;
    let n = data.a.nrows();
    let mut best: Option<(Matrix, LmiVerdict)> = None;
    let consider = |p: Matrix, best: &mut Option<(Matrix, LmiVerdict)>| -> Result<()> {
        let verdict = verify_lmi(&data.clone().with_p(p.clone()))?;
        let better = best
            .as_ref()
            .map_or(true, |(_, b)| verdict.max_eigenvalue() < b.max_eigenvalue());
        if better {
            *best = Some((p, verdict));
        }
        Ok(())
    };
    for slope in [data.m, 0.5 * (data.m + data.l), data.l] {
        let closed = &data.a + &data.b * &data.c * (data.eps * slope);
        if spectral_abscissa(&closed) >= 0.0 {
            continue;
        }
        if let Ok(p0) = solve_lyapunov(&closed, &Matrix::identity(n, n)) {
            for k in -64..=24 {
                consider(&p0 * 10f64.powf(k as f64 / 8.0), &mut best)?;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random_trials {
        let m = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let delta = rng.gen_range(1e-3..1.0);
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        consider((m.transpose() * m + Matrix::identity(n, n) * delta) * scale, &mut best)?;
    }
    best.ok_or(Error::NotHurwitz)
}
