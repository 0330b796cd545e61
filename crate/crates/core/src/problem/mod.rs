//! MPC instances, the three synthetic scenarios, and the sparse QP form.

mod catalog;
pub(crate) mod qp;
mod record;
mod scenario;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub use catalog::{fnv1a_64, Bounds, ConstraintCatalog, ConstraintKind, ConstraintRow};
pub use qp::{assemble_sparse_qp, constraint_residuals, reduce_qp, ReducedQp, Residuals, SparseQp};
pub use record::InstanceRecord;
pub use scenario::{build_mpc_instance, ScenarioId, ScenarioParams};

use crate::error::{Error, Result};

/// Discrete linear dynamics `x⁺ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "B has {} rows, A has {}",
                b.nrows(),
                a.nrows()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("system matrices"));
        }
        Ok(LinearSystem { a, b })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    /// States `x_0..x_N` produced by applying `inputs` from `x0`.
    pub fn rollout(&self, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for u in inputs {
            let next = self.step(states.last().unwrap(), u);
            states.push(next);
        }
        states
    }
}

/// One parametric MPC problem.
///
/// The stage cost is `(x - r)ᵀ Q (x - r) + uᵀ R u` for stages `0..N-1`, plus
/// `(x_N - r_N)ᵀ Q_N (x_N - r_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcInstance {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub system: LinearSystem,
    pub horizon: usize,
    pub q_stage: DMatrix<f64>,
    pub r_stage: DMatrix<f64>,
    pub q_term: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub x_ref: Vec<DVector<f64>>,
    pub bounds: Bounds,
    catalog: Arc<ConstraintCatalog>,
}

#[allow(clippy::too_many_arguments)]
impl MpcInstance {
    pub fn new(
        scenario: ScenarioId,
        seed: u64,
        system: LinearSystem,
        horizon: usize,
        q_stage: DMatrix<f64>,
        r_stage: DMatrix<f64>,
        q_term: DMatrix<f64>,
        x0: DVector<f64>,
        x_ref: Vec<DVector<f64>>,
        bounds: Bounds,
    ) -> Result<Self> {
        let (n, m) = (system.n(), system.m());
        if horizon == 0 {
            return Err(Error::InvalidInstance("horizon must be at least 1".into()));
        }
        for (name, mat, dim) in [("Q", &q_stage, n), ("R", &r_stage, m), ("Q_N", &q_term, n)] {
            if mat.nrows() != dim || mat.ncols() != dim {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {dim}x{dim}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            if !is_symmetric(mat) {
                return Err(Error::InvalidInstance(format!("{name} is not symmetric")));
            }
        }
        if !is_psd(&q_stage) || !is_psd(&q_term) {
            return Err(Error::InvalidInstance("state weights must be PSD".into()));
        }
        if r_stage.clone().cholesky().is_none() {
            return Err(Error::InvalidInstance("input weight must be positive definite".into()));
        }
        if x0.len() != n {
            return Err(Error::Dimension(format!("x0 has {} entries, expected {n}", x0.len())));
        }
        if x_ref.len() != horizon + 1 {
            return Err(Error::Dimension(format!(
                "reference has {} entries, expected {}",
                x_ref.len(),
                horizon + 1
            )));
        }
        if x_ref.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("reference entry has wrong length".into()));
        }
        if x0.iter().chain(x_ref.iter().flat_map(|r| r.iter())).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state or reference"));
        }
        let catalog = Arc::new(ConstraintCatalog::from_bounds(n, m, horizon, &bounds)?);
        for i in 0..n {
            if !(x0[i] > bounds.state_lb[i] && x0[i] < bounds.state_ub[i]) {
                return Err(Error::InfeasibleParams(format!(
                    "x0[{i}] = {} is not strictly inside [{}, {}]",
                    x0[i], bounds.state_lb[i], bounds.state_ub[i]
                )));
            }
        }
        Ok(MpcInstance {
            scenario,
            seed,
            system,
            horizon,
            q_stage,
            r_stage,
            q_term,
            x0,
            x_ref,
            bounds,
            catalog,
        })
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn m(&self) -> usize {
        self.system.m()
    }

    pub fn catalog(&self) -> &ConstraintCatalog {
        &self.catalog
    }

    pub(crate) fn catalog_arc(&self) -> Arc<ConstraintCatalog> {
        Arc::clone(&self.catalog)
    }

    /// Length of the stacked QP variable `[x_1..x_N, u_0..u_{N-1}]`.
    pub fn num_vars(&self) -> usize {
        self.horizon * (self.n() + self.m())
    }

    /// Same problem re-parameterized at a new initial state. The state box is
    /// not rechecked: closed-loop states may sit exactly on a bound.
    pub fn with_initial_state(&self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.n() {
            return Err(Error::Dimension("initial state length".into()));
        }
        let mut next = self.clone();
        next.x0 = x0;
        Ok(next)
    }

    pub fn with_reference(&self, x_ref: Vec<DVector<f64>>) -> Result<Self> {
        if x_ref.len() != self.horizon + 1 || x_ref.iter().any(|r| r.len() != self.n()) {
            return Err(Error::Dimension("reference shape".into()));
        }
        let mut next = self.clone();
        next.x_ref = x_ref;
        Ok(next)
    }

    pub fn stage_cost(&self, stage: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let e = x - &self.x_ref[stage];
        (e.transpose() * &self.q_stage * &e)[0] + (u.transpose() * &self.r_stage * u)[0]
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        let e = x - &self.x_ref[self.horizon];
        (e.transpose() * &self.q_term * &e)[0]
    }

    /// Horizon cost of an input sequence, evaluated by direct rollout.
    pub fn rollout_cost(&self, inputs: &[DVector<f64>]) -> f64 {
        let states = self.system.rollout(&self.x0, inputs);
        let running: f64 = (0..self.horizon)
            .map(|k| self.stage_cost(k, &states[k], &inputs[k]))
            .sum();
        running + self.terminal_cost(&states[self.horizon])
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    m.clone().symmetric_eigenvalues().iter().all(|&e| e >= -1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollout_applies_dynamics() {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.005, 0.1]),
        )
        .unwrap();
        let xs = sys.rollout(&DVector::from_vec(vec![0.0, 0.0]), &vec![DVector::from_vec(vec![1.0]); 2]);
        assert_eq!(xs.len(), 3);
        assert!((xs[1][0] - 0.005).abs() < 1e-15 && (xs[1][1] - 0.1).abs() < 1e-15);
        assert!((xs[2][0] - 0.02).abs() < 1e-15 && (xs[2][1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mismatched_b_rejected() {
        let err = LinearSystem::new(DMatrix::identity(2, 2), DMatrix::zeros(3, 1));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
