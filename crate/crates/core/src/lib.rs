//! Learned active-set prediction for linear model predictive control.
//!
//! The pipeline predicts which inequality rows of an MPC quadratic program
//! bind at the optimum, solves the resulting equality-constrained problem in
//! closed form, checks the answer against every original constraint and falls
//! back to a full iterative solve when the check fails.
//!
//! Modules, bottom-up:
//!
//! * [`problem`]: scenarios, MPC instances and their sparse QP form
//! * [`qpsolve`]: operator-splitting QP solver and the closed-form KKT solve
//! * [`oracle`]: ground-truth active-set labels and JSONL datasets
//! * [`predictor`]: transformer, MLP and logistic models with manual backprop
//! * [`pipeline`]: predict, reduce, verify, fall back; closed-loop simulation
//! * [`smooth`]: log-sum-exp constraint aggregation
//! * [`harness`]: offline verification and the timing study

pub mod error;
pub mod harness;

pub mod oracle;

pub mod pipeline;
pub mod predictor;
pub mod problem;
pub mod qpsolve;
pub mod smooth;


pub use error::{Error, Result};
pub use oracle::{ActiveSetLabel, DatasetHeader, DatasetRecord};
pub use pipeline::{PipelineConfig, PipelineResult};
pub use predictor::{Arch, Head, PredictorModel};
pub use problem::{MpcInstance, ScenarioId, ScenarioParams, SparseQp};
pub use qpsolve::{QpSolution, SolveStatus, SolverConfig};
