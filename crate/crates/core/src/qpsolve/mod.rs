//! QP solvers: an operator-splitting solver for the full problem (baseline
//! and fallback) and the closed-form solve of equality-constrained QPs.

mod admm;
mod kkt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use admm::{solve_full, WarmStart};
pub use kkt::{linear_solve_spd, solve_kkt_equality, KktSolution};

use crate::error::{Error, Result};

/// Settings of the iterative solver. `tol` bounds both the primal residual
/// and the stationarity residual, in absolute terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    /// Diagonal shift tried when a factorization is not positive definite.
    pub regularization: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    /// Ruiz equilibration passes.
    pub scaling_iters: usize,
    /// Equality rows use `rho * eq_rho_scale`.
    pub eq_rho_scale: f64,
    /// Threshold of the primal infeasibility certificate.
    pub infeasibility_tol: f64,
    /// Iterations between penalty updates; 0 keeps `rho` fixed.
    pub adapt_interval: usize,
    /// The penalty is only changed when the proposed factor is outside
    /// `[1/adapt_tolerance, adapt_tolerance]`.
    pub adapt_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-8,
            max_iter: 20_000,
            rho: 1.0,
            regularization: 1e-9,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            eq_rho_scale: 1e3,
            infeasibility_tol: 1e-6,
            adapt_interval: 25,
            adapt_tolerance: 5.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tol > 0.0
            && self.max_iter > 0
            && self.rho > 0.0
            && self.sigma > 0.0
            && self.alpha > 0.0
            && self.alpha < 2.0
            && self.regularization >= 0.0
            && self.eq_rho_scale > 0.0
            && self.adapt_tolerance > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("solver config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Solved,
    MaxIterations,
    Infeasible,
}

/// Primal-dual output of a full solve.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub y: DVector<f64>,
    /// Multipliers of the equality rows.
    pub lambda_eq: DVector<f64>,
    /// Multipliers of the inequality rows (nonnegative).
    pub mu_ineq: DVector<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Wall-clock seconds on a monotonic clock, setup included.
    pub solve_time: f64,
}

impl QpSolution {
    /// Turns a non-`Solved` status into the matching error.
    pub fn into_solved(self) -> Result<QpSolution> {
        match self.status {
            SolveStatus::Solved => Ok(self),
            SolveStatus::MaxIterations => Err(Error::MaxIterations(self.iterations)),
            SolveStatus::Infeasible => Err(Error::Infeasible),
        }
    }
}
