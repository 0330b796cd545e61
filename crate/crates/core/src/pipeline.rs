//! Execution phase: predict the active set, solve the reduced problem in
//! closed form, verify against every original constraint, and fall back to
//! the full solver when verification fails.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{label_active_set, ActiveSetLabel, DEFAULT_EPS_DUAL, DEFAULT_EPS_PRIMAL};
use crate::predictor::{PredictorModel, DEFAULT_THRESHOLD};
use crate::problem::{assemble_sparse_qp, reduce_qp, MpcInstance, ReducedQp, SparseQp};
use crate::qpsolve::{solve_full, solve_kkt_equality, KktSolution, QpSolution, SolveStatus, SolverConfig, WarmStart};

pub const DEFAULT_VERIFY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Largest accepted constraint violation, after row normalization.
    pub verify_tol: f64,
    /// Most negative accepted multiplier of a predicted-active row.
    pub dual_tol: f64,
    pub threshold: f64,
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            verify_tol: DEFAULT_VERIFY_TOL,
            dual_tol: DEFAULT_VERIFY_TOL,
            threshold: DEFAULT_THRESHOLD,
            solver: SolverConfig::default(),
        }
    }
}

/// Where the predicted active set comes from.
#[derive(Debug, Clone)]
pub enum LabelSource<'a> {
    Model(&'a PredictorModel),
    /// A label computed elsewhere, e.g. a stored oracle label.
    Fixed(ActiveSetLabel),
    /// Labels from a full solve of the same instance.
    Oracle,
    AllActive,
    AllInactive,
}

impl LabelSource<'_> {
    pub fn label(&self, instance: &MpcInstance, qp: &SparseQp, cfg: &PipelineConfig) -> Result<ActiveSetLabel> {
        let rows = qp.num_ineq();
        let label = match self {
            LabelSource::Model(m) => m.predict_label(instance, cfg.threshold)?,
            LabelSource::Fixed(l) => l.clone(),
            LabelSource::Oracle => {
                let sol = solve_full(qp, None, &cfg.solver)?.into_solved()?;
                label_active_set(qp, &sol, DEFAULT_EPS_PRIMAL, DEFAULT_EPS_DUAL)?
            }
            LabelSource::AllActive => ActiveSetLabel::all_active(rows),
            LabelSource::AllInactive => ActiveSetLabel::all_inactive(rows),
        };
        if label.len() != rows {
            return Err(Error::Dimension(format!("label has {} bits, catalog has {rows} rows", label.len())));
        }
        Ok(label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "kebab-case")]
pub enum RowRef {
    Equality(usize),
    Inequality(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub ok: bool,
    /// Largest normalized violation over all rows (0 when all hold).
    pub worst_violation: f64,
    pub worst_row: Option<RowRef>,
    pub violating_rows: Vec<RowRef>,
}

/// Checks `y` against every row of `qp`. Each row is divided by its largest
/// coefficient before comparing with `tol`.
pub fn verify_solution(qp: &SparseQp, y: &DVector<f64>, tol: f64) -> Result<Verification> {
    if y.len() != qp.num_vars() {
        return Err(Error::Dimension(format!("y has {} entries, QP has {}", y.len(), qp.num_vars())));
    }
    let mut worst = 0.0f64;
    let mut worst_row = None;
    let mut violating = Vec::new();
    let mut consider = |row: RowRef, v: f64| {
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v > tol {
            violating.push(row);
        }
        if v > worst {
            worst = v;
            worst_row = Some(row);
        }
    };
    let eq = &qp.eq_matrix * y - &qp.eq_rhs;
    for i in 0..qp.num_eq() {
        let norm = qp.eq_matrix.row(i).amax().max(f64::MIN_POSITIVE);
        consider(RowRef::Equality(i), eq[i].abs() / norm);
    }
    let lhs = &qp.ineq_matrix * y;
    for j in 0..qp.num_ineq() {
        let norm = qp.ineq_matrix.row(j).amax().max(f64::MIN_POSITIVE);
        consider(RowRef::Inequality(j), (lhs[j] - qp.ineq_rhs[j]) / norm);
    }
    Ok(Verification { ok: violating.is_empty(), worst_violation: worst, worst_row, violating_rows: violating })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub t_predict: f64,
    pub t_reduced: f64,
    pub t_verify: f64,
    pub t_fallback: f64,
    pub t_total: f64,
}

impl Timings {
    /// Prediction, reduced solve and verification.
    pub fn t_rmpc(&self) -> f64 {
        self.t_predict + self.t_reduced + self.t_verify
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReducedOutcome {
    Solved,
    /// Solved after dropping rows parallel to an earlier active row.
    SolvedAfterDedupe,
    RankDeficient,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineResult {
    pub predicted_label: ActiveSetLabel,
    pub reduced_outcome: ReducedOutcome,
    #[serde(skip)]
    pub reduced_solution: Option<KktSolution>,
    /// Verification of the reduced solution, when one exists.
    pub reduced_check: Option<Verification>,
    /// Most negative multiplier among predicted-active rows.
    pub min_active_multiplier: Option<f64>,
    pub verified: bool,
    pub fell_back: bool,
    pub fallback_iterations: Option<usize>,
    pub warm_started: bool,
    /// Check of the returned solution against the full problem.
    pub final_check: Verification,
    pub final_u: Vec<f64>,
    pub final_inputs: Vec<f64>,
    #[serde(skip)]
    pub final_y: DVector<f64>,
    pub timings: Timings,
}

fn dedupe_rows(qp: &SparseQp, label: &ActiveSetLabel) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for j in label.active_indices() {
        let row = qp.ineq_matrix.row(j);
        let nj = row.amax();
        let parallel = kept.iter().any(|&k| {
            let other = qp.ineq_matrix.row(k);
            let nk = other.amax();
            let same = (row / nj - other / nk).amax() <= 1e-12;
            let opposite = (row / nj + other / nk).amax() <= 1e-12;
            same || opposite
        });
        if !parallel {
            kept.push(j);
        }
    }
    kept
}

fn kkt(reduced: &ReducedQp<'_>) -> Result<KktSolution> {
    solve_kkt_equality(
        reduced.cost_matrix,
        reduced.cost_vector,
        &reduced.constraint_matrix,
        &reduced.constraint_rhs,
    )
}

/// Multipliers consistent with a primal guess: equality multipliers from the
/// state block of stationarity, input-bound multipliers from the remaining
/// residual on rows that hold with equality at `y`.
fn estimate_duals(qp: &SparseQp, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let ns = qp.horizon * qp.n;
    let r = -(&qp.cost_matrix * y + &qp.cost_vector);
    let a_x = qp.eq_matrix.columns(0, ns).transpose();
    let lambda = a_x.lu().solve(&r.rows(0, ns).into_owned())?;
    let r_all = r - qp.eq_matrix.tr_mul(&lambda);
    let slack = &qp.ineq_rhs - &qp.ineq_matrix * y;
    let mut mu = DVector::zeros(qp.num_ineq());
    for j in 0..qp.num_ineq() {
        if slack[j].abs() > 1e-9 * (1.0 + qp.ineq_rhs[j].abs()) {
            continue;
        }
        let row = qp.ineq_matrix.row(j);
        let nonzero: Vec<usize> = (0..row.len()).filter(|&i| row[i] != 0.0).collect();
        if let [i] = nonzero[..] {
            if i >= ns {
                mu[j] = (r_all[i] / row[i]).max(0.0);
            }
        }
    }
    Some((lambda, mu))
}

/// Initial iterate for the fallback solve from a warm-start model: the
/// predicted inputs clipped to the input box, rolled out from x0, plus
/// multiplier estimates.
pub fn warm_start_from_model(model: &PredictorModel, instance: &MpcInstance, qp: &SparseQp) -> Result<WarmStart> {
    let mut u = model.predict_inputs(instance, &instance.x0)?;
    let b = &instance.bounds;
    for k in 0..instance.horizon {
        for i in 0..instance.m() {
            let idx = k * instance.m() + i;
            u[idx] = u[idx].clamp(b.input_lb[i], b.input_ub[i]);
        }
    }
    let y0 = qp.stack_from_inputs(instance, &u)?;
    let duals0 = estimate_duals(qp, &y0);
    Ok(WarmStart { y0, duals0 })
}

/// Runs predict → reduce → verify → (fallback) on one instance.
///
/// Only a failing fallback solve is an error; a failed or rejected reduced
/// solve just routes to the fallback. The returned inputs always pass
/// [`verify_solution`] at `cfg.verify_tol`.
pub fn solve_with_prediction(
    instance: &MpcInstance,
    source: &LabelSource<'_>,
    warm_model: Option<&PredictorModel>,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    let qp = assemble_sparse_qp(instance)?;
    solve_assembled(instance, &qp, source, warm_model, cfg)
}

/// [`solve_with_prediction`] on an already assembled QP.
pub fn solve_assembled(
    instance: &MpcInstance,
    qp: &SparseQp,
    source: &LabelSource<'_>,
    warm_model: Option<&PredictorModel>,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    let start = Instant::now();
    let mut timings = Timings::default();

    let label = source.label(instance, qp, cfg)?;
    timings.t_predict = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let reduced = reduce_qp(qp, &label)?;
    let ne = qp.num_eq();
    let (outcome, solution, rows) = match kkt(&reduced) {
        Ok(s) => (ReducedOutcome::Solved, Some(s), reduced.active_rows),
        Err(Error::RankDeficient) => {
            let rows = dedupe_rows(qp, &label);
            if rows.len() < reduced.active_rows.len() {
                match kkt(&crate::problem::qp::reduce_with_rows(qp, rows.clone())) {
                    Ok(s) => (ReducedOutcome::SolvedAfterDedupe, Some(s), rows),
                    Err(_) => (ReducedOutcome::RankDeficient, None, rows),
                }
            } else {
                (ReducedOutcome::RankDeficient, None, rows)
            }
        }
        Err(_) => (ReducedOutcome::Failed, None, reduced.active_rows),
    };
    timings.t_reduced = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut reduced_check = None;
    let mut min_mult = None;
    let mut verified = false;
    if let Some(s) = &solution {
        let check = verify_solution(qp, &s.y, cfg.verify_tol)?;
        let m = (0..rows.len()).map(|i| s.lambda[ne + i]).fold(f64::INFINITY, f64::min);
        verified = check.ok && m >= -cfg.dual_tol;
        min_mult = rows.first().map(|_| m);
        reduced_check = Some(check);
    }
    timings.t_verify = t.elapsed().as_secs_f64();

    let (final_y, fell_back, fallback_iterations, warm_started, final_check) = if verified {
        let s = solution.as_ref().expect("verified implies a solution");
        (s.y.clone(), false, None, false, reduced_check.clone().expect("checked"))
    } else {
        let t = Instant::now();
        let warm = warm_model.map(|m| warm_start_from_model(m, instance, qp)).transpose()?;
        let sol = solve_full(qp, warm.as_ref(), &cfg.solver)?;
        let iterations = sol.iterations;
        let sol = sol.into_solved()?;
        let check = verify_solution(qp, &sol.y, cfg.verify_tol)?;
        timings.t_fallback = t.elapsed().as_secs_f64();
        if !check.ok {
            return Err(Error::Unverified(check.worst_violation));
        }
        (sol.y, true, Some(iterations), warm.is_some(), check)
    };
    timings.t_total = start.elapsed().as_secs_f64();

    Ok(PipelineResult {
        predicted_label: label,
        reduced_outcome: outcome,
        reduced_solution: solution,
        reduced_check,
        min_active_multiplier: min_mult,
        verified,
        fell_back,
        fallback_iterations,
        warm_started,
        final_u: qp.first_input(&final_y).as_slice().to_vec(),
        final_inputs: qp.inputs_of(&final_y).as_slice().to_vec(),
        final_check,
        final_y,
        timings,
    })
}

/// Full solve with no prediction, checked like a pipeline output.
pub fn solve_baseline(qp: &SparseQp, cfg: &PipelineConfig) -> Result<QpSolution> {
    let sol = solve_full(qp, None, &cfg.solver)?;
    if sol.status != SolveStatus::Solved {
        return sol.into_solved();
    }
    let check = verify_solution(qp, &sol.y, cfg.verify_tol)?;
    if !check.ok {
        return Err(Error::Unverified(check.worst_violation));
    }
    Ok(sol)
}

/// How each closed-loop step computes its input.
#[derive(Debug, Clone)]
pub enum Controller<'a> {
    Pipeline {
        source: LabelSource<'a>,
        warm_model: Option<&'a PredictorModel>,
    },
    /// Full solve at every step.
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// One entry per step for pipeline controllers; empty for `Full`.
    pub steps: Vec<PipelineResult>,
    /// Accumulated stage cost against the reference in force at each step.
    pub cost: f64,
}

/// Reference window starting `shift` stages later, holding the last value.
fn shifted_reference(base: &MpcInstance, shift: usize) -> Vec<DVector<f64>> {
    (0..=base.horizon)
        .map(|k| base.x_ref[(k + shift).min(base.horizon)].clone())
        .collect()
}

/// Receding-horizon simulation: re-solve at the current state each step,
/// apply the first input through the nominal dynamics.
pub fn run_receding_horizon(
    initial: &MpcInstance,
    steps: usize,
    controller: &Controller<'_>,
    cfg: &PipelineConfig,
) -> Result<ClosedLoopTrace> {
    if steps == 0 {
        return Err(Error::InvalidArgument("closed-loop run needs at least one step".into()));
    }
    let mut x = initial.x0.clone();
    let mut trace = ClosedLoopTrace { states: vec![x.as_slice().to_vec()], inputs: Vec::new(), steps: Vec::new(), cost: 0.0 };
    for t in 0..steps {
        let inst = initial.with_initial_state(x.clone())?.with_reference(shifted_reference(initial, t))?;
        let u = match controller {
            Controller::Pipeline { source, warm_model } => {
                let res = solve_with_prediction(&inst, source, *warm_model, cfg).map_err(|e| {
                    Error::InvalidArgument(format!("closed loop aborted at step {t} after {} states: {e}", trace.states.len()))
                })?;
                let u = DVector::from_column_slice(&res.final_u);
                trace.steps.push(res);
                u
            }
            Controller::Full => {
                let qp = assemble_sparse_qp(&inst)?;
                let sol = solve_baseline(&qp, cfg).map_err(|e| {
                    Error::InvalidArgument(format!("closed loop aborted at step {t} after {} states: {e}", trace.states.len()))
                })?;
                qp.first_input(&sol.y)
            }
        };
        trace.cost += inst.stage_cost(0, &x, &u);
        x = inst.system.step(&x, &u);
        trace.inputs.push(u.as_slice().to_vec());
        trace.states.push(x.as_slice().to_vec());
    }
    Ok(trace)
}

/// Average time per problem of the predict-then-fallback scheme:
/// `α·t_RMPC + (1 - α)(t_RMPC + t_MPC)`.
pub fn pipeline_average(alpha: f64, t_rmpc: f64, t_mpc: f64) -> f64 {
    (t_rmpc + t_mpc) - alpha * t_mpc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub instances: usize,
    pub fallbacks: usize,
    /// Fraction of instances served without fallback.
    pub alpha: f64,
    /// Mean of predict + reduced solve + verify over all instances.
    pub t_rmpc: f64,
    /// Mean fallback solve time over the instances that fell back.
    pub t_mpc: f64,
    pub t_predict: f64,
    pub pipeline_avg: f64,
    pub baseline_avg: f64,
    pub speedup: f64,
}

/// Combines per-instance pipeline timings with baseline solve times of the
/// same instances.
pub fn aggregate_timing(results: &[PipelineResult], baseline_times: &[f64]) -> Result<TimingReport> {
    let timings: Vec<(bool, Timings)> = results.iter().map(|r| (r.fell_back, r.timings)).collect();
    aggregate_timings(&timings, baseline_times)
}

/// [`aggregate_timing`] on bare `(fell_back, timings)` pairs.
pub fn aggregate_timings(results: &[(bool, Timings)], baseline_times: &[f64]) -> Result<TimingReport> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no timing samples".into()));
    }
    if results.len() != baseline_times.len() {
        return Err(Error::Dimension("pipeline and baseline sample counts differ".into()));
    }
    let k = results.len() as f64;
    let fallbacks = results.iter().filter(|(f, _)| *f).count();
    let alpha = (results.len() - fallbacks) as f64 / k;
    let t_rmpc = results.iter().map(|(_, t)| t.t_rmpc()).sum::<f64>() / k;
    let t_predict = results.iter().map(|(_, t)| t.t_predict).sum::<f64>() / k;
    let t_mpc = if fallbacks == 0 {
        0.0
    } else {
        results.iter().filter(|(f, _)| *f).map(|(_, t)| t.t_fallback).sum::<f64>() / fallbacks as f64
    };
    let pipeline_avg = pipeline_average(alpha, t_rmpc, t_mpc);
    let baseline_avg = baseline_times.iter().sum::<f64>() / k;
    Ok(TimingReport {
        instances: results.len(),
        fallbacks,
        alpha,
        t_rmpc,
        t_mpc,
        t_predict,
        pipeline_avg,
        baseline_avg,
        speedup: baseline_avg / pipeline_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_reference_value() {
        assert_eq!(pipeline_average(0.9, 1.0, 10.0), 2.0);
        assert_eq!(pipeline_average(1.0, 0.25, 10.0), 0.25);
        assert_eq!(pipeline_average(0.0, 0.25, 10.0), 10.25);
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatch() {
        assert!(aggregate_timings(&[], &[]).is_err());
        assert!(aggregate_timings(&[(false, Timings::default())], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn aggregate_uses_fallback_mean_only_over_fallbacks() {
        let fast = Timings { t_predict: 0.5, t_reduced: 0.25, t_verify: 0.25, t_fallback: 0.0, t_total: 1.0 };
        let slow = Timings { t_fallback: 10.0, t_total: 11.0, ..fast };
        let rep = aggregate_timings(&[(false, fast), (true, slow)], &[4.0, 4.0]).unwrap();
        assert_eq!(rep.alpha, 0.5);
        assert_eq!(rep.t_rmpc, 1.0);
        assert_eq!(rep.t_mpc, 10.0);
        assert_eq!(rep.pipeline_avg, 6.0);
        assert_eq!(rep.speedup, 4.0 / 6.0);
    }
}
