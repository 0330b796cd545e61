//! Operator-splitting solver for `min ½yᵀHy + gᵀy s.t. Ay = b, Cy <= d`.
//!
//! The problem is rewritten as `l <= K y <= u` with `K = [A; C]`, equilibrated
//! with Ruiz scaling and solved by over-relaxed ADMM. The penalty is rescaled
//! from the ratio of primal to dual residuals every few iterations, and the
//! linear system `H + σI + Kᵀ diag(ρ) K` is refactored when it changes.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{QpSolution, SolveStatus, SolverConfig};
use crate::error::{Error, Result};
use crate::problem::SparseQp;

const NORM_FLOOR: f64 = 1e-4;
const NORM_CEIL: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

/// Initial iterate for [`solve_full`]. Multipliers are optional; without them
/// the dual iterate starts at zero.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub y0: DVector<f64>,
    pub duals0: Option<(DVector<f64>, DVector<f64>)>,
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    k: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    /// Variable scaling.
    d: DVector<f64>,
    /// Constraint scaling.
    e: DVector<f64>,
    /// Cost scaling.
    c: f64,
}

/// Row-compressed copy of the constraint matrix for the per-iteration products.
struct Csr {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut row_ptr = Vec::with_capacity(m.nrows() + 1);
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        row_ptr.push(0);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { ncols: m.ncols(), row_ptr, cols, vals }
    }

    /// out = K x
    fn mul(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        for i in 0..self.row_ptr.len() - 1 {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            out[i] = acc;
        }
    }

    /// out = Kᵀ y
    fn mul_tr(&self, y: &DVector<f64>, out: &mut DVector<f64>) {
        debug_assert_eq!(out.len(), self.ncols);
        out.fill(0.0);
        for i in 0..self.row_ptr.len() - 1 {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.cols[p]] += self.vals[p] * yi;
            }
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

fn clamp_norm(v: f64) -> f64 {
    if v < NORM_FLOOR {
        1.0
    } else {
        v.min(NORM_CEIL)
    }
}

fn equilibrate(qp: &SparseQp, cfg: &SolverConfig) -> Scaled {
    let nv = qp.num_vars();
    let (ne, ni) = (qp.num_eq(), qp.num_ineq());
    let rows = ne + ni;
    let mut p = qp.cost_matrix.clone();
    let mut q = qp.cost_vector.clone();
    let mut k = DMatrix::zeros(rows, nv);
    k.view_mut((0, 0), (ne, nv)).copy_from(&qp.eq_matrix);
    k.view_mut((ne, 0), (ni, nv)).copy_from(&qp.ineq_matrix);
    let mut l = DVector::from_element(rows, f64::NEG_INFINITY);
    let mut u = DVector::zeros(rows);
    l.rows_mut(0, ne).copy_from(&qp.eq_rhs);
    u.rows_mut(0, ne).copy_from(&qp.eq_rhs);
    u.rows_mut(ne, ni).copy_from(&qp.ineq_rhs);

    let mut d = DVector::from_element(nv, 1.0);
    let mut e = DVector::from_element(rows, 1.0);
    let mut c = 1.0;
    for _ in 0..cfg.scaling_iters {
        let dd: Vec<f64> = (0..nv)
            .map(|j| {
                let norm = p.column(j).amax().max(k.column(j).amax());
                1.0 / clamp_norm(norm).sqrt()
            })
            .collect();
        let de: Vec<f64> = (0..rows)
            .map(|i| 1.0 / clamp_norm(k.row(i).amax()).sqrt())
            .collect();
        for j in 0..nv {
            for i in 0..nv {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..rows {
                k[(i, j)] *= de[i] * dd[j];
            }
            q[j] *= dd[j];
            d[j] *= dd[j];
        }
        for i in 0..rows {
            e[i] *= de[i];
        }
        let mean_col = (0..nv).map(|j| p.column(j).amax()).sum::<f64>() / nv.max(1) as f64;
        let gamma = 1.0 / clamp_norm(mean_col.max(inf_norm(&q)));
        p *= gamma;
        q *= gamma;
        c *= gamma;
    }
    for i in 0..rows {
        l[i] *= e[i];
        u[i] *= e[i];
    }
    Scaled { p, q, k, l, u, d, e, c }
}

/// Solves the full QP. A warm start, when given, is the initial iterate.
///
/// Returns `Ok` with a non-`Solved` status when the iteration budget runs
/// out or infeasibility is certified; `Err` only for malformed input.
pub fn solve_full(qp: &SparseQp, warm_start: Option<&WarmStart>, cfg: &SolverConfig) -> Result<QpSolution> {
    cfg.validate()?;
    let start = Instant::now();
    let nv = qp.num_vars();
    let (ne, ni) = (qp.num_eq(), qp.num_ineq());
    let rows = ne + ni;

    let s = equilibrate(qp, cfg);
    let mut rho_base = cfg.rho;
    let rho_of = |base: f64| -> DVector<f64> {
        DVector::from_fn(rows, |i, _| if i < ne { base * cfg.eq_rho_scale } else { base })
    };
    let mut rho = rho_of(rho_base);

    let mut chol = factor(&s, &rho, cfg)?;

    let k_sparse = Csr::from_dense(&s.k);
    let mut x = DVector::zeros(nv);
    let mut z = DVector::zeros(rows);
    let mut y = DVector::zeros(rows);
    if let Some(ws) = warm_start {
        if ws.y0.len() != nv {
            return Err(Error::Dimension(format!(
                "warm start has {} entries, QP has {nv} variables",
                ws.y0.len()
            )));
        }
        x = ws.y0.component_div(&s.d);
        z = DVector::zeros(rows);
        k_sparse.mul(&x, &mut z);
        if let Some((lam, mu)) = &ws.duals0 {
            if lam.len() != ne || mu.len() != ni {
                return Err(Error::Dimension("warm-start multipliers".into()));
            }
            for i in 0..ne {
                y[i] = s.c * lam[i] / s.e[i];
            }
            for i in 0..ni {
                y[ne + i] = s.c * mu[i] / s.e[ne + i];
            }
        }
    }

    let alpha = cfg.alpha;
    let mut rhs = DVector::zeros(nv);
    let mut tmp_rows = DVector::zeros(rows);
    let mut x_tilde = DVector::zeros(nv);
    let mut z_tilde = DVector::zeros(rows);
    let mut kx = DVector::zeros(rows);
    let mut px = DVector::zeros(nv);
    let mut kty = DVector::zeros(nv);
    let mut delta_y = DVector::zeros(rows);
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;

    for it in 1..=cfg.max_iter {
        iterations = it;
        // x̃ = (P + σI + Kᵀ ρ K)⁻¹ (σx - q + Kᵀ(ρ z - y))
        tmp_rows.copy_from(&z);
        tmp_rows.component_mul_assign(&rho);
        tmp_rows -= &y;
        k_sparse.mul_tr(&tmp_rows, &mut rhs);
        rhs.axpy(cfg.sigma, &x, 1.0);
        rhs -= &s.q;
        chol.solve_mut(&mut rhs);
        x_tilde.copy_from(&rhs);
        k_sparse.mul(&x_tilde, &mut z_tilde);

        x.axpy(alpha, &x_tilde, 1.0 - alpha);
        for i in 0..rows {
            let z_hat = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_new = (z_hat + y[i] / rho[i]).clamp(s.l[i], s.u[i]);
            delta_y[i] = rho[i] * (z_hat - z_new);
            y[i] += delta_y[i];
            z[i] = z_new;
        }

        k_sparse.mul(&x, &mut kx);
        px.gemv(1.0, &s.p, &x, 0.0);
        k_sparse.mul_tr(&y, &mut kty);

        // Absolute residuals in the original (unscaled) units.
        let mut prim = 0.0f64;
        for i in 0..rows {
            prim = prim.max(((kx[i] - z[i]) / s.e[i]).abs());
        }
        let mut dual = 0.0f64;
        for j in 0..nv {
            dual = dual.max(((px[j] + s.q[j] + kty[j]) / (s.d[j] * s.c)).abs());
        }
        if prim <= cfg.tol && dual <= cfg.tol {
            status = SolveStatus::Solved;
            break;
        }
        if primal_infeasible(&s, &delta_y, cfg.infeasibility_tol) {
            status = SolveStatus::Infeasible;
            break;
        }
        if cfg.adapt_interval > 0 && it % cfg.adapt_interval == 0 {
            let scale = penalty_factor(&s, &z, &kx, &px, &kty);
            let proposed = (rho_base * scale).clamp(RHO_MIN, RHO_MAX);
            let ratio = proposed / rho_base;
            if ratio > cfg.adapt_tolerance || ratio < 1.0 / cfg.adapt_tolerance {
                rho_base = proposed;
                rho = rho_of(rho_base);
                chol = factor(&s, &rho, cfg)?;
            }
        }
    }

    let y_out = x.component_mul(&s.d);
    let duals = DVector::from_fn(rows, |i, _| s.e[i] * y[i] / s.c);
    Ok(QpSolution {
        y: y_out,
        lambda_eq: duals.rows(0, ne).into_owned(),
        mu_ineq: duals.rows(ne, ni).into_owned(),
        iterations,
        status,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

fn factor(s: &Scaled, rho: &DVector<f64>, cfg: &SolverConfig) -> Result<Cholesky<f64, Dyn>> {
    let nv = s.p.nrows();
    let mut kkt = s.p.clone();
    let mut weighted = s.k.clone();
    for i in 0..rho.len() {
        weighted.row_mut(i).scale_mut(rho[i]);
    }
    kkt.gemm_tr(1.0, &s.k, &weighted, 1.0);
    for i in 0..nv {
        kkt[(i, i)] += cfg.sigma;
    }
    match kkt.clone().cholesky() {
        Some(ch) => Ok(ch),
        None => {
            for i in 0..nv {
                kkt[(i, i)] += cfg.regularization;
            }
            kkt.cholesky().ok_or(Error::NotPositiveDefinite)
        }
    }
}

/// `sqrt((‖Kx - z‖ / max(‖Kx‖, ‖z‖)) / (‖Px + q + Kᵀy‖ / max(‖Px‖, ‖Kᵀy‖, ‖q‖)))`
/// in the scaled space.
fn penalty_factor(
    s: &Scaled,
    z: &DVector<f64>,
    kx: &DVector<f64>,
    px: &DVector<f64>,
    kty: &DVector<f64>,
) -> f64 {
    let tiny = 1e-30;
    let prim = (kx - z).amax() / inf_norm(kx).max(inf_norm(z)).max(tiny);
    let dual_res = (px + &s.q + kty).amax();
    let dual = dual_res / inf_norm(px).max(inf_norm(kty)).max(inf_norm(&s.q)).max(tiny);
    if prim <= tiny || dual <= tiny {
        return 1.0;
    }
    (prim / dual).sqrt()
}

/// Farkas-type certificate on the dual increment: `Kᵀδy ≈ 0` while
/// `uᵀδy⁺ + lᵀδy⁻ < 0`.
fn primal_infeasible(s: &Scaled, delta_y: &DVector<f64>, tol: f64) -> bool {
    let dy_unscaled = delta_y.component_mul(&s.e);
    let norm = inf_norm(&dy_unscaled);
    if norm < 1e-30 {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy_unscaled.len() {
        let v = dy_unscaled[i];
        if v > 0.0 {
            support += s.u[i] / s.e[i] * v;
        } else if v < 0.0 {
            if s.l[i].is_infinite() {
                return false;
            }
            support += s.l[i] / s.e[i] * v;
        }
    }
    if support >= -tol * norm {
        return false;
    }
    let kt = s.k.tr_mul(delta_y);
    let lhs = (0..kt.len()).map(|j| (kt[j] / s.d[j]).abs()).fold(0.0, f64::max);
    lhs <= tol * norm
}
