use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{ConstraintCatalog, ConstraintKind, MpcInstance};
use crate::error::{Error, Result};
use crate::oracle::ActiveSetLabel;

/// Added to the cost diagonal when its Cholesky factorization fails.
pub const HESSIAN_REGULARIZATION: f64 = 1e-9;

/// Sparse (non-condensed) QP of an MPC instance:
///
/// ```text
/// minimize    ½ yᵀ H y + gᵀ y + c
/// subject to  A y = b        (dynamics)
///             C y <= d       (one row per catalog entry)
/// ```
///
/// over `y = [x_1..x_N, u_0..u_{N-1}]`. The constant `c` makes the objective
/// equal the horizon cost including the fixed stage-0 state term.
#[derive(Debug, Clone)]
pub struct SparseQp {
    pub cost_matrix: DMatrix<f64>,
    pub cost_vector: DVector<f64>,
    pub cost_constant: f64,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    /// Whether the cost diagonal had to be shifted to make it PD.
    pub regularized: bool,
    catalog: Arc<ConstraintCatalog>,
}

impl SparseQp {
    /// A QP given directly by its blocks, with no MPC structure behind it:
    /// horizon and dimensions are zero and the catalog is empty.
    pub fn from_matrices(
        cost_matrix: DMatrix<f64>,
        cost_vector: DVector<f64>,
        eq_matrix: DMatrix<f64>,
        eq_rhs: DVector<f64>,
        ineq_matrix: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
    ) -> Result<Self> {
        let nv = cost_matrix.nrows();
        let shapes_ok = cost_matrix.ncols() == nv
            && cost_vector.len() == nv
            && eq_matrix.ncols() == nv
            && eq_rhs.len() == eq_matrix.nrows()
            && ineq_matrix.ncols() == nv
            && ineq_rhs.len() == ineq_matrix.nrows();
        if !shapes_ok {
            return Err(Error::Dimension("QP blocks disagree in size".into()));
        }
        if (&cost_matrix - cost_matrix.transpose()).amax() > 1e-12 * (1.0 + cost_matrix.amax())
            || cost_matrix.clone().cholesky().is_none()
        {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(SparseQp {
            cost_matrix,
            cost_vector,
            cost_constant: 0.0,
            eq_matrix,
            eq_rhs,
            ineq_matrix,
            ineq_rhs,
            horizon: 0,
            n: 0,
            m: 0,
            regularized: false,
            catalog: Arc::new(ConstraintCatalog::empty()),
        })
    }

    pub fn num_vars(&self) -> usize {
        self.cost_matrix.nrows()
    }

    pub fn num_eq(&self) -> usize {
        self.eq_matrix.nrows()
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq_matrix.nrows()
    }

    pub fn catalog(&self) -> &ConstraintCatalog {
        &self.catalog
    }

    /// Offset of `x_k` (k in 1..=N) inside `y`.
    pub fn state_offset(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.horizon);
        (k - 1) * self.n
    }

    /// Offset of `u_k` (k in 0..N) inside `y`.
    pub fn input_offset(&self, k: usize) -> usize {
        debug_assert!(k < self.horizon);
        self.horizon * self.n + k * self.m
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.cost_matrix * y)) + self.cost_vector.dot(y) + self.cost_constant
    }

    /// The stacked input block `u_0..u_{N-1}` of `y`.
    pub fn inputs_of(&self, y: &DVector<f64>) -> DVector<f64> {
        y.rows(self.horizon * self.n, self.horizon * self.m).into_owned()
    }

    /// The first input `u_0` of `y`.
    pub fn first_input(&self, y: &DVector<f64>) -> DVector<f64> {
        y.rows(self.horizon * self.n, self.m).into_owned()
    }

    /// Rebuilds `y` from `x0` and a stacked input sequence via the dynamics
    /// encoded in the equality block.
    pub fn stack_from_inputs(&self, instance: &MpcInstance, inputs: &DVector<f64>) -> Result<DVector<f64>> {
        if inputs.len() != self.horizon * self.m {
            return Err(Error::Dimension(format!(
                "input sequence has {} entries, expected {}",
                inputs.len(),
                self.horizon * self.m
            )));
        }
        let us: Vec<DVector<f64>> = (0..self.horizon)
            .map(|k| inputs.rows(k * self.m, self.m).into_owned())
            .collect();
        let xs = instance.system.rollout(&instance.x0, &us);
        let mut y = DVector::zeros(self.num_vars());
        for k in 1..=self.horizon {
            y.rows_mut(self.state_offset(k), self.n).copy_from(&xs[k]);
        }
        y.rows_mut(self.horizon * self.n, inputs.len()).copy_from(inputs);
        Ok(y)
    }
}

/// Assembles the sparse QP of `instance`.
pub fn assemble_sparse_qp(instance: &MpcInstance) -> Result<SparseQp> {
    let (n, m, horizon) = (instance.n(), instance.m(), instance.horizon);
    if horizon == 0 {
        return Err(Error::InvalidInstance("horizon must be at least 1".into()));
    }
    if instance.x_ref.len() != horizon + 1 || instance.x0.len() != n {
        return Err(Error::Dimension("instance reference or initial state".into()));
    }
    let nx = horizon * n;
    let nv = nx + horizon * m;
    let u_off = |k: usize| nx + k * m;
    let x_off = |k: usize| (k - 1) * n;

    // Stage cost (x-r)ᵀQ(x-r) = ½ xᵀ(2Q)x - 2rᵀQx + rᵀQr.
    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    let mut constant = instance.stage_cost(0, &instance.x0, &DVector::zeros(m));
    for k in 1..=horizon {
        let w = if k == horizon { &instance.q_term } else { &instance.q_stage };
        let r = &instance.x_ref[k];
        h.view_mut((x_off(k), x_off(k)), (n, n)).copy_from(&(w * 2.0));
        g.rows_mut(x_off(k), n).copy_from(&(w * r * -2.0));
        constant += r.dot(&(w * r));
    }
    for k in 0..horizon {
        h.view_mut((u_off(k), u_off(k)), (m, m))
            .copy_from(&(&instance.r_stage * 2.0));
    }

    let mut regularized = false;
    if h.clone().cholesky().is_none() {
        for i in 0..nv {
            h[(i, i)] += HESSIAN_REGULARIZATION;
        }
        regularized = true;
        if h.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite);
        }
    }

    // x_{k+1} - A x_k - B u_k = 0, with A x_0 moved to the right-hand side.
    let sys = &instance.system;
    let mut a_eq = DMatrix::zeros(nx, nv);
    let mut b_eq = DVector::zeros(nx);
    for k in 0..horizon {
        let row = k * n;
        a_eq.view_mut((row, x_off(k + 1)), (n, n))
            .copy_from(&DMatrix::identity(n, n));
        a_eq.view_mut((row, u_off(k)), (n, m)).copy_from(&(-&sys.b));
        if k == 0 {
            b_eq.rows_mut(0, n).copy_from(&(&sys.a * &instance.x0));
        } else {
            a_eq.view_mut((row, x_off(k)), (n, n)).copy_from(&(-&sys.a));
        }
    }
    if !has_full_row_rank(&a_eq, 1e-8) {
        return Err(Error::RankDeficient);
    }

    let catalog = instance.catalog_arc();
    let mut c = DMatrix::zeros(catalog.len(), nv);
    let mut d = DVector::zeros(catalog.len());
    for (j, row) in catalog.rows().iter().enumerate() {
        let (off, width) = match row.kind {
            ConstraintKind::StateBound | ConstraintKind::TerminalBound => (x_off(row.stage), n),
            ConstraintKind::InputBound => (u_off(row.stage), m),
        };
        if row.coeff.len() != width {
            return Err(Error::Dimension(format!("catalog row {j} width")));
        }
        for (i, &v) in row.coeff.iter().enumerate() {
            c[(j, off + i)] = v;
        }
        d[j] = row.bound;
    }

    Ok(SparseQp {
        cost_matrix: h,
        cost_vector: g,
        cost_constant: constant,
        eq_matrix: a_eq,
        eq_rhs: b_eq,
        ineq_matrix: c,
        ineq_rhs: d,
        horizon,
        n,
        m,
        regularized,
        catalog,
    })
}

/// Rank test by singular values relative to the largest one.
pub(crate) fn has_full_row_rank(mat: &DMatrix<f64>, tol: f64) -> bool {
    if mat.nrows() == 0 {
        return true;
    }
    if mat.nrows() > mat.ncols() {
        return false;
    }
    let sv = mat.transpose().singular_values();
    let max = sv.max();
    max > 0.0 && sv.iter().all(|&s| s > tol * max)
}

/// Equality-only QP: the dynamics plus the rows predicted active, held as
/// equalities. Borrows the cost from its parent [`SparseQp`].
#[derive(Debug, Clone)]
pub struct ReducedQp<'a> {
    pub cost_matrix: &'a DMatrix<f64>,
    pub cost_vector: &'a DVector<f64>,
    pub constraint_matrix: DMatrix<f64>,
    pub constraint_rhs: DVector<f64>,
    /// Catalog indices of the inequality rows stacked below the dynamics.
    pub active_rows: Vec<usize>,
}

pub fn reduce_qp<'a>(qp: &'a SparseQp, labels: &ActiveSetLabel) -> Result<ReducedQp<'a>> {
    if labels.len() != qp.num_ineq() {
        return Err(Error::Dimension(format!(
            "label has {} bits, QP has {} inequality rows",
            labels.len(),
            qp.num_ineq()
        )));
    }
    let active: Vec<usize> = labels.active_indices().collect();
    Ok(reduce_with_rows(qp, active))
}

pub(crate) fn reduce_with_rows(qp: &SparseQp, active: Vec<usize>) -> ReducedQp<'_> {
    let (ne, nv) = (qp.num_eq(), qp.num_vars());
    let mut e = DMatrix::zeros(ne + active.len(), nv);
    let mut f = DVector::zeros(ne + active.len());
    e.view_mut((0, 0), (ne, nv)).copy_from(&qp.eq_matrix);
    f.rows_mut(0, ne).copy_from(&qp.eq_rhs);
    for (i, &j) in active.iter().enumerate() {
        e.row_mut(ne + i).copy_from(&qp.ineq_matrix.row(j));
        f[ne + i] = qp.ineq_rhs[j];
    }
    ReducedQp {
        cost_matrix: &qp.cost_matrix,
        cost_vector: &qp.cost_vector,
        constraint_matrix: e,
        constraint_rhs: f,
        active_rows: active,
    }
}

/// `eq_residual = A y - b`; `ineq_slack = d - C y` (nonnegative means the row
/// holds).
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub eq_residual: DVector<f64>,
    pub ineq_slack: DVector<f64>,
}

pub fn constraint_residuals(qp: &SparseQp, y: &DVector<f64>) -> Result<Residuals> {
    if y.len() != qp.num_vars() {
        return Err(Error::Dimension(format!(
            "y has {} entries, QP has {} variables",
            y.len(),
            qp.num_vars()
        )));
    }
    Ok(Residuals {
        eq_residual: &qp.eq_matrix * y - &qp.eq_rhs,
        ineq_slack: &qp.ineq_rhs - &qp.ineq_matrix * y,
    })
}
