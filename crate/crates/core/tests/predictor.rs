use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpcx::oracle::{generate_dataset, GenerationConfig};
use mpcx::predictor::{
    attention, encode_inputs, evaluate, threshold_labels, train, Arch, Head, Hyper, LrSchedule, PredictorModel, TrainConfig,
};
use mpcx::problem::{build_mpc_instance, ScenarioId, ScenarioParams};
use mpcx::DatasetRecord;

fn tiny_hyper() -> Hyper {
    Hyper { d_model: 8, n_heads: 2, n_layers: 1, ff_width: 16, mlp_hidden: 16, ..Hyper::default() }
}

fn records(count: usize, seed: u64) -> Vec<DatasetRecord> {
    let params = ScenarioParams { horizon: Some(5), ..ScenarioParams::default() };
    let cfg = GenerationConfig { params, ..GenerationConfig::default() };
    generate_dataset(ScenarioId::DoubleIntegrator, count, seed, &cfg).unwrap().1
}

fn quick(records: &[DatasetRecord], arch: Arch, head: Head, epochs: usize, seed: u64) -> mpcx::predictor::Trained {
    quick_with(records, arch, head, epochs, seed, LrSchedule::Cosine)
}

fn quick_with(records: &[DatasetRecord], arch: Arch, head: Head, epochs: usize, seed: u64, schedule: LrSchedule) -> mpcx::predictor::Trained {
    let cfg = TrainConfig { hyper: tiny_hyper(), epochs, batch_size: 8, learning_rate: 5e-3, schedule, seed, ..TrainConfig::default() };
    train(records, records, arch, head, &cfg).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
}

#[test]
fn attention_matches_two_loop_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, k, v) = (random_matrix(&mut rng, 4, 8), random_matrix(&mut rng, 4, 8), random_matrix(&mut rng, 4, 8));
    let (ctx, weights) = attention(&q, &k, &v).unwrap();
    let scale = 1.0 / 8f64.sqrt();
    for i in 0..4 {
        let logits: Vec<f64> = (0..4).map(|j| q.row(i).dot(&k.row(j)) * scale).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..8 {
            let expect: f64 = (0..4).map(|j| logits[j].exp() / z * v[(j, c)]).sum();
            assert!((ctx[(i, c)] - expect).abs() <= 1e-12);
        }
        assert!((weights.row(i).sum() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn zero_tokens_for_zero_state_and_reference() {
    let params = ScenarioParams {
        horizon: Some(4),
        x0: Some(vec![0.0, 0.0]),
        reference: Some(vec![vec![0.0, 0.0]; 5]),
        ..ScenarioParams::default()
    };
    let inst = build_mpc_instance(ScenarioId::DoubleIntegrator, &params, 0).unwrap();
    let seq = encode_inputs(&inst);
    assert_eq!((seq.len(), seq.width()), (5, 4));
    assert!(seq.tokens.iter().all(|&t| t == 0.0));
}

#[test]
fn reference_change_touches_one_token() {
    let mut reference = vec![vec![1.0, 0.0]; 6];
    let base = ScenarioParams { horizon: Some(5), reference: Some(reference.clone()), ..ScenarioParams::default() };
    reference[3][0] = -1.0;
    let moved = ScenarioParams { reference: Some(reference), ..base.clone() };
    let a = encode_inputs(&build_mpc_instance(ScenarioId::DoubleIntegrator, &base, 2).unwrap());
    let b = encode_inputs(&build_mpc_instance(ScenarioId::DoubleIntegrator, &moved, 2).unwrap());
    for k in 0..a.len() {
        assert_eq!(a.tokens.row(k) == b.tokens.row(k), k != 3, "row {k}");
    }
}

#[test]
fn threshold_examples() {
    let scores = DVector::from_vec(vec![0.9, 0.1]);
    assert_eq!(threshold_labels(&scores, 0.5).bits(), [true, false]);
    assert_eq!(threshold_labels(&scores, 0.0).bits(), [true, true]);
    assert_eq!(threshold_labels(&DVector::from_element(1, 0.5), 0.5).bits(), [true]);
}

#[test]
fn zero_weight_models() {
    let inst = build_mpc_instance(ScenarioId::MassSpringChain, &ScenarioParams::default(), 1).unwrap();
    let seq = encode_inputs(&inst);
    for arch in [Arch::Transformer, Arch::Mlp, Arch::LogReg] {
        let c = PredictorModel::zeroed(arch, Head::Constraint, &tiny_hyper(), &inst).unwrap();
        assert!(c.forward(&seq).unwrap().iter().all(|&s| s == 0.5));
        let w = PredictorModel::zeroed(arch, Head::WarmStart, &tiny_hyper(), &inst).unwrap();
        let out = w.forward(&seq).unwrap();
        assert_eq!(out.len(), inst.horizon * inst.m());
        assert!(out.iter().all(|&s| s == 0.0));
    }
}

#[test]
fn single_record_is_memorized() {
    let data = records(1, 8);
    for arch in [Arch::Transformer, Arch::Mlp] {
        let t = quick_with(&data, arch, Head::Constraint, 400, 0, LrSchedule::Constant);
        let last = *t.report.train_loss.last().unwrap();
        assert!(last < 1e-3, "{arch}: final loss {last}");
        assert_eq!(t.report.train_metrics.unwrap().exact_set_accuracy, 1.0);
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let data = records(24, 3);
    let bytes = |seed| {
        let t = quick(&data, Arch::Transformer, Head::Constraint, 3, seed);
        let mut out = Vec::new();
        t.model.save(&mut out).unwrap();
        out
    };
    assert_eq!(bytes(1), bytes(1));
    assert_ne!(bytes(1), bytes(2));
}

#[test]
fn saved_model_reproduces_predictions() {
    let data = records(16, 5);
    let t = quick(&data, Arch::Transformer, Head::WarmStart, 2, 0);
    let mut out = Vec::new();
    t.model.save(&mut out).unwrap();
    let back = PredictorModel::load(out.as_slice()).unwrap();
    for r in &data {
        let seq = encode_inputs(&r.instance);
        assert_eq!(t.model.forward(&seq).unwrap(), back.forward(&seq).unwrap());
    }
    assert!(t.report.mean_u_error.is_some());
}

#[test]
fn corrupted_model_is_rejected() {
    let data = records(8, 5);
    let t = quick(&data, Arch::Mlp, Head::Constraint, 1, 0);
    let mut out = Vec::new();
    t.model.save(&mut out).unwrap();
    out.truncate(out.len() / 2);
    assert!(PredictorModel::load(out.as_slice()).is_err());
}

#[test]
fn evaluation_on_training_records_reports_train_accuracy() {
    let data = records(40, 9);
    let t = quick(&data, Arch::Transformer, Head::Constraint, 20, 0);
    let m = evaluate(&t.model, &data, 0.5).unwrap();
    assert_eq!(Some(m), t.report.train_metrics);
}

#[test]
fn mismatched_catalogs_rejected() {
    let a = records(4, 1);
    let params = ScenarioParams { horizon: Some(7), ..ScenarioParams::default() };
    let cfg = GenerationConfig { params, ..GenerationConfig::default() };
    let b = generate_dataset(ScenarioId::DoubleIntegrator, 4, 1, &cfg).unwrap().1;
    let tc = TrainConfig { hyper: tiny_hyper(), epochs: 1, ..TrainConfig::default() };
    assert!(train(&a, &b, Arch::Mlp, Head::Constraint, &tc).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Permuting the tokens permutes the context rows the same way.
    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), l in 1usize..9, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (random_matrix(&mut rng, l, d), random_matrix(&mut rng, l, d), random_matrix(&mut rng, l, d));
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |m: &DMatrix<f64>| DMatrix::from_fn(l, d, |i, c| m[(perm[i], c)]);
        let (ctx, w) = attention(&q, &k, &v).unwrap();
        let (ctx_p, _) = attention(&permute(&q), &permute(&k), &permute(&v)).unwrap();
        prop_assert!((permute(&ctx) - ctx_p).amax() <= 1e-12);
        for i in 0..l {
            prop_assert!((w.row(i).sum() - 1.0).abs() <= 1e-12);
            prop_assert!(w.row(i).iter().all(|&x| x >= 0.0));
        }
    }
}
