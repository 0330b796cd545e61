use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use mpcx::oracle::ActiveSetLabel;
use mpcx::pipeline::{
    aggregate_timings, run_receding_horizon, solve_baseline, solve_with_prediction, verify_solution, Controller,
    LabelSource, PipelineConfig, ReducedOutcome, RowRef, Timings,
};
use mpcx::problem::{assemble_sparse_qp, build_mpc_instance, MpcInstance, ScenarioId, ScenarioParams, SparseQp};
use mpcx::Error;

fn instance(scenario: ScenarioId, seed: u64) -> MpcInstance {
    build_mpc_instance(scenario, &ScenarioParams::default(), seed).unwrap()
}

fn saturating() -> MpcInstance {
    let params = ScenarioParams {
        x0: Some(vec![-4.0, 0.0]),
        reference: Some(vec![vec![4.0, 0.0]; 21]),
        ..ScenarioParams::default()
    };
    build_mpc_instance(ScenarioId::DoubleIntegrator, &params, 0).unwrap()
}

fn full_inputs(inst: &MpcInstance, cfg: &PipelineConfig) -> DVector<f64> {
    let qp = assemble_sparse_qp(inst).unwrap();
    let sol = solve_baseline(&qp, cfg).unwrap();
    sol.y.rows(inst.horizon * inst.n(), inst.horizon * inst.m()).into_owned()
}

#[test]
fn all_inactive_labels_fall_back_on_saturation() {
    let inst = saturating();
    let cfg = PipelineConfig::default();
    let res = solve_with_prediction(&inst, &LabelSource::AllInactive, None, &cfg).unwrap();
    assert!(!res.verified);
    assert!(res.fell_back);
    assert!(res.final_check.ok);
    let qp = assemble_sparse_qp(&inst).unwrap();
    assert!(verify_solution(&qp, &res.final_y, cfg.verify_tol).unwrap().ok);
}

#[test]
fn all_active_labels_fall_back() {
    let cfg = PipelineConfig::default();
    for seed in 0..5 {
        let inst = instance(ScenarioId::DoubleIntegrator, seed);
        let res = solve_with_prediction(&inst, &LabelSource::AllActive, None, &cfg).unwrap();
        assert!(res.fell_back);
        assert!(res.final_check.ok);
        assert_ne!(res.reduced_outcome, ReducedOutcome::Solved);
    }
}

#[test]
fn oracle_labels_reproduce_the_full_solve() {
    let cfg = PipelineConfig::default();
    for scenario in ScenarioId::ALL {
        for seed in 0..8 {
            let inst = instance(scenario, seed);
            let res = solve_with_prediction(&inst, &LabelSource::Oracle, None, &cfg).unwrap();
            assert!(res.verified && !res.fell_back, "{scenario} seed {seed}");
            let u = DVector::from_column_slice(&res.final_inputs);
            assert!((u - full_inputs(&inst, &cfg)).amax() <= 1e-6);
            assert_eq!(res.final_u.len(), inst.m());
        }
    }
}

#[test]
fn wrong_label_length_rejected() {
    let inst = instance(ScenarioId::DoubleIntegrator, 1);
    let res = solve_with_prediction(&inst, &LabelSource::Fixed(ActiveSetLabel::all_inactive(3)), None, &PipelineConfig::default());
    assert!(res.is_err());
}

#[test]
fn verifier_reports_the_violated_row() {
    let inst = instance(ScenarioId::MassSpringChain, 3);
    let qp = assemble_sparse_qp(&inst).unwrap();
    let cfg = PipelineConfig::default();
    let y = solve_baseline(&qp, &cfg).unwrap().y;
    assert!(verify_solution(&qp, &y, 1e-6).unwrap().ok);
    assert!(verify_solution(&qp, &DVector::zeros(2), 1e-6).is_err());

    let boxed = SparseQp::from_matrices(
        DMatrix::identity(3, 3),
        DVector::zeros(3),
        DMatrix::zeros(0, 3),
        DVector::zeros(0),
        DMatrix::identity(3, 3) * 2.0,
        DVector::from_element(3, 2.0),
    )
    .unwrap();
    let y = DVector::from_vec(vec![0.5, 1.001, 0.0]);
    let v = verify_solution(&boxed, &y, 1e-6).unwrap();
    assert!(!v.ok);
    assert_eq!(v.worst_row, Some(RowRef::Inequality(1)));
    assert!((v.worst_violation - 1e-3).abs() <= 1e-12);
    assert_eq!(v.violating_rows, vec![RowRef::Inequality(1)]);
    assert!(verify_solution(&boxed, &y, f64::INFINITY).unwrap().ok);
}

#[test]
fn equilibrium_stays_put() {
    let params = ScenarioParams {
        x0: Some(vec![1.0, 0.0]),
        reference: Some(vec![vec![1.0, 0.0]; 21]),
        ..ScenarioParams::default()
    };
    let inst = build_mpc_instance(ScenarioId::DoubleIntegrator, &params, 0).unwrap();
    let ctrl = Controller::Pipeline { source: LabelSource::Oracle, warm_model: None };
    let trace = run_receding_horizon(&inst, 10, &ctrl, &PipelineConfig::default()).unwrap();
    assert!(trace.inputs.iter().flatten().all(|u| u.abs() <= 1e-9));
    assert!(trace.cost <= 1e-12);
    assert_eq!(trace.states.len(), 11);
}

#[test]
fn pipeline_and_full_closed_loops_agree() {
    let cfg = PipelineConfig::default();
    for (inst, source) in [
        (saturating(), LabelSource::Oracle),
        (saturating(), LabelSource::AllInactive),
        (instance(ScenarioId::MassSpringChain, 4), LabelSource::Oracle),
    ] {
        let steps = 12;
        let full = run_receding_horizon(&inst, steps, &Controller::Full, &cfg).unwrap();
        let piped = run_receding_horizon(&inst, steps, &Controller::Pipeline { source, warm_model: None }, &cfg).unwrap();
        assert!((full.cost - piped.cost).abs() <= 1e-6 * full.cost.abs().max(1.0));
        // Applied inputs move the state through the nominal dynamics.
        for t in 0..steps {
            let x = DVector::from_column_slice(&piped.states[t]);
            let u = DVector::from_column_slice(&piped.inputs[t]);
            let next = inst.system.step(&x, &u);
            assert!((next - DVector::from_column_slice(&piped.states[t + 1])).amax() <= 1e-10);
            assert!(piped.steps[t].final_check.ok);
        }
    }
}

#[test]
fn zero_steps_rejected() {
    let inst = instance(ScenarioId::DoubleIntegrator, 0);
    assert!(matches!(
        run_receding_horizon(&inst, 0, &Controller::Full, &PipelineConfig::default()),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn timing_report_follows_the_average_formula() {
    let fast = Timings { t_predict: 0.1, t_reduced: 0.2, t_verify: 0.05, t_fallback: 0.0, t_total: 0.35 };
    let slow = Timings { t_fallback: 3.0, t_total: 3.35, ..fast };
    let all_fast = aggregate_timings(&[(false, fast); 4], &[1.0; 4]).unwrap();
    assert_eq!(all_fast.alpha, 1.0);
    assert!((all_fast.pipeline_avg - fast.t_rmpc()).abs() <= 1e-15);
    let all_slow = aggregate_timings(&[(true, slow); 4], &[1.0; 4]).unwrap();
    assert_eq!(all_slow.alpha, 0.0);
    assert!((all_slow.pipeline_avg - 3.35).abs() <= 1e-12);
    assert!(all_slow.speedup < 1.0);
    assert!(aggregate_timings(&[], &[]).is_err());
    assert!(aggregate_timings(&[(false, fast)], &[1.0, 2.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Whatever the labels, the emitted solution satisfies the original constraints.
    #[test]
    fn emitted_solution_is_always_feasible(seed in 0u64..100_000, bits in prop::collection::vec(any::<bool>(), 400)) {
        let inst = instance(ScenarioId::DoubleIntegrator, seed);
        let qp = assemble_sparse_qp(&inst).unwrap();
        prop_assume!(bits.len() >= qp.num_ineq());
        let label = ActiveSetLabel::new(bits[..qp.num_ineq()].to_vec());
        let cfg = PipelineConfig::default();
        let res = solve_with_prediction(&inst, &LabelSource::Fixed(label), None, &cfg).unwrap();
        prop_assert!(verify_solution(&qp, &res.final_y, cfg.verify_tol).unwrap().ok);
        prop_assert!(res.final_check.ok);
    }
}
