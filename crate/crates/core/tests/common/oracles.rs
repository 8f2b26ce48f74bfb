use fbopt_core::convex::QpProblem;
use fbopt_core::{Matrix, Vector};

/// Minimizer of a strictly convex QP by enumerating every subset of
/// inequality rows, solving the equality-constrained KKT system and keeping
/// the candidate that is primal feasible with nonnegative multipliers.
pub fn qp_enumerate(p: &QpProblem) -> Option<Vector> {
    let n = p.f.len();
    let m = p.a_ineq.nrows();
    let me = p.a_eq.nrows();
    let mut best: Option<(f64, Vector)> = None;
    for mask in 0u32..(1u32 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = rows.len() + me;
        let mut kkt = Matrix::zeros(n + k, n + k);
        let mut rhs = Vector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        for i in 0..n {
            rhs[i] = -p.f[i];
        }
        for (j, &r) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = p.a_ineq[(r, c)];
                kkt[(c, n + j)] = p.a_ineq[(r, c)];
            }
            rhs[n + j] = p.b_ineq[r];
        }
        for e in 0..me {
            let j = rows.len() + e;
            for c in 0..n {
                kkt[(n + j, c)] = p.a_eq[(e, c)];
                kkt[(c, n + j)] = p.a_eq[(e, c)];
            }
            rhs[n + j] = p.b_eq[e];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let w = sol.rows(0, n).into_owned();
        if !sol.iter().all(|x| x.is_finite()) {
            continue;
        }
        let w_scale = 1.0 + w.amax();
        let dual_scale = 1.0 + sol.rows(n, k).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let feasible = (0..m).all(|i| (p.a_ineq.row(i) * &w)[0] <= p.b_ineq[i] + 1e-9 * w_scale);
        let dual_ok = (0..rows.len()).all(|j| sol[n + j] >= -1e-9 * dual_scale);
        if feasible && dual_ok {
            let obj = 0.5 * w.dot(&(&p.h * &w)) + p.f.dot(&w);
            if best.as_ref().map_or(true, |(b, _)| obj < *b - 1e-12) {
                best = Some((obj, w));
            }
        }
    }
    best.map(|(_, w)| w)
}

/// Power flow by Gauss-Seidel iteration on the complex bus admittance matrix.
/// Returns `(v, θ)` or `None` when the iteration does not settle.
pub fn gauss_seidel_power_flow(
    net: &fbopt_core::powerflow::PowerNetwork,
    inj: &fbopt_core::powerflow::Injections,
) -> Option<(Vector, Vector)> {
    use fbopt_core::powerflow::BusKind;
    use nalgebra::Complex;
    let n = net.bus_count();
    let mut y = vec![vec![Complex::new(0.0, 0.0); n]; n];
    for (br, &(l, k)) in net.branches().iter().zip(net.ends()) {
        let ys = Complex::new(br.g, br.b);
        y[l][l] += ys;
        y[k][k] += ys;
        y[l][k] -= ys;
        y[k][l] -= ys;
    }
    let kinds: Vec<BusKind> = net.buses().iter().map(|b| b.kind).collect();
    let mut volt: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(if kinds[i] == BusKind::Pq { 1.0 } else { inj.v_set[i] }, 0.0))
        .collect();
    for _ in 0..200_000 {
        let mut change: f64 = 0.0;
        for l in 0..n {
            if kinds[l] == BusKind::Slack {
                continue;
            }
            let sum_all: Complex<f64> = (0..n).map(|k| y[l][k] * volt[k]).sum();
            let p = inj.p_gen[l] - inj.p_load[l];
            let q = if kinds[l] == BusKind::Pv {
                (volt[l] * sum_all.conj()).im
            } else {
                inj.q_gen[l] - inj.q_load[l]
            };
            let s = Complex::new(p, q);
            let others = sum_all - y[l][l] * volt[l];
            let mut next = (s.conj() / volt[l].conj() - others) / y[l][l];
            if kinds[l] == BusKind::Pv {
                next = next / next.norm() * inj.v_set[l];
            }
            change = change.max((next - volt[l]).norm());
            volt[l] = next;
        }
        if change < 1e-13 {
            let v = Vector::from_iterator(n, volt.iter().map(|c| c.norm()));
            let t = Vector::from_iterator(n, volt.iter().map(|c| c.arg()));
            return Some((v, t));
        }
    }
    None
}
