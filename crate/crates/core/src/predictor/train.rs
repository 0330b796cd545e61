use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{layout, Dims, Network};
use super::{encode_inputs, sigmoid, threshold_labels, Arch, Head, Hyper, Normalization, PredictorModel, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::oracle::{ActiveSetLabel, DatasetRecord};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run, stepped per epoch.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hyper: Hyper,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Only used by the constraint head; the warm-start head is always MSE.
    pub loss: LossKind,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyper: Hyper::default(),
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            schedule: LrSchedule::Cosine,
            loss: LossKind::Mse,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("learning rate must be positive, momentum in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: usize,
    pub exact_set_accuracy: f64,
    pub per_bit_accuracy: f64,
    /// Truly active bits predicted inactive, over all truly active bits.
    pub false_inactive_rate: f64,
    /// Mean fraction of rows predicted inactive, i.e. removed from the QP.
    pub mean_inactive_removed_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: Arch,
    pub head: Head,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    /// Constraint head only.
    pub train_metrics: Option<Metrics>,
    pub test_metrics: Option<Metrics>,
    /// Warm-start head only: mean over test records of `‖ũ - u*‖∞`.
    pub mean_u_error: Option<f64>,
    pub parameters: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: PredictorModel,
    pub report: TrainReport,
}

struct Batchable {
    x: Vec<DMatrix<f64>>,
    targets: Vec<DVector<f64>>,
}

fn prepare(records: &[DatasetRecord], head: Head, norm: &Normalization) -> Result<Batchable> {
    let mut x = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in records {
        x.push(norm.apply(&encode_inputs(&r.instance))?);
        targets.push(match head {
            Head::Constraint => DVector::from_vec(r.label.as_targets()),
            Head::WarmStart => r.u_star_vector(),
        });
    }
    Ok(Batchable { x, targets })
}

fn stack(xs: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let (l, c) = xs[0].shape();
    let mut m = DMatrix::zeros(l * xs.len(), c);
    for (s, x) in xs.iter().enumerate() {
        m.rows_mut(s * l, l).copy_from(x);
    }
    m
}

fn stack_targets(ts: &[&DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(ts.len(), ts[0].len(), |s, j| ts[s][j])
}

/// Batch loss (per-record sum over outputs, averaged over the batch) and its
/// gradient with respect to the logits.
fn loss_and_grad(head: Head, kind: LossKind, logits: &DMatrix<f64>, targets: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let b = logits.nrows() as f64;
    let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
    let mut loss = 0.0;
    for (idx, (&z, &t)) in logits.iter().zip(targets.iter()).enumerate() {
        let (l, g) = match (head, kind) {
            (Head::WarmStart, _) => ((z - t) * (z - t), 2.0 * (z - t)),
            (Head::Constraint, LossKind::Mse) => {
                let p = sigmoid(z);
                ((p - t) * (p - t), 2.0 * (p - t) * p * (1.0 - p))
            }
            (Head::Constraint, LossKind::Bce) => {
                // -[t log σ(z) + (1-t) log(1-σ(z))] = softplus(z) - t z
                let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                (softplus - t * z, sigmoid(z) - t)
            }
        };
        loss += l;
        grad[idx] = g / b;
    }
    (loss / b, grad)
}

fn logits_for(net: &Network, xs: &[DMatrix<f64>]) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(EVAL_CHUNK) {
        let refs: Vec<&DMatrix<f64>> = chunk.iter().collect();
        let (logits, _) = net.forward(&stack(&refs));
        for s in 0..logits.nrows() {
            out.push(DVector::from_iterator(logits.ncols(), logits.row(s).iter().copied()));
        }
    }
    out
}

fn dataset_loss(net: &Network, head: Head, kind: LossKind, data: &Batchable) -> f64 {
    let logits = logits_for(net, &data.x);
    let mut total = 0.0;
    for (z, t) in logits.iter().zip(&data.targets) {
        let zm = DMatrix::from_row_slice(1, z.len(), z.as_slice());
        let tm = DMatrix::from_row_slice(1, t.len(), t.as_slice());
        total += loss_and_grad(head, kind, &zm, &tm).0;
    }
    total / logits.len() as f64
}

fn check_records(records: &[DatasetRecord], what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} split is empty")));
    }
    Ok(())
}

/// Mini-batch SGD with momentum on the stacked network. Deterministic for a
/// fixed `cfg.seed`: the same seed draws the initial weights and the batch
/// order.
pub fn train(
    train_set: &[DatasetRecord],
    test_set: &[DatasetRecord],
    arch: Arch,
    head: Head,
    cfg: &TrainConfig,
) -> Result<Trained> {
    let start = std::time::Instant::now();
    cfg.validate()?;
    check_records(train_set, "training")?;
    check_records(test_set, "test")?;
    let first = &train_set[0].instance;
    let digest = first.catalog().digest();
    for r in train_set.iter().chain(test_set) {
        if r.instance.scenario != first.scenario || r.instance.horizon != first.horizon {
            return Err(Error::InvalidArgument("records mix scenarios or horizons".into()));
        }
        let d = r.instance.catalog().digest();
        if d != digest {
            return Err(Error::DigestMismatch { expected: digest, found: d });
        }
    }

    let norm = Normalization::fit(train_set.iter().map(|r| encode_inputs(&r.instance)).collect::<Vec<_>>().iter())?;
    let train_data = prepare(train_set, head, &norm)?;
    let test_data = prepare(test_set, head, &norm)?;
    let dims = Dims {
        seq_len: first.horizon + 1,
        d_in: 2 * first.n(),
        out: train_data.targets[0].len(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::init(arch, &cfg.hyper, dims, &mut rng);
    let mut velocity = net.zeros_like();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut test_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&DMatrix<f64>> = batch.iter().map(|&i| &train_data.x[i]).collect();
            let ts: Vec<&DVector<f64>> = batch.iter().map(|&i| &train_data.targets[i]).collect();
            let (logits, cache) = net.forward(&stack(&xs));
            let (loss, d_logits) = loss_and_grad(head, cfg.loss, &logits, &stack_targets(&ts));
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("batch loss {loss}") });
            }
            epoch_sum += loss * batch.len() as f64;
            let grads = net.backward(&cache, &d_logits);
            for (idx, g) in grads.iter().enumerate() {
                if !net.trainable(idx) {
                    continue;
                }
                let v = &mut velocity[idx];
                *v *= cfg.momentum;
                *v += g;
                net.params[idx].zip_apply(v, |p, vi| *p -= lr * vi);
            }
        }
        let tl = epoch_sum / train_set.len() as f64;
        let vl = dataset_loss(&net, head, cfg.loss, &test_data);
        if !tl.is_finite() || !vl.is_finite() {
            return Err(Error::Divergence { epoch, detail: format!("train loss {tl}, test loss {vl}") });
        }
        train_loss.push(tl);
        test_loss.push(vl);
    }

    let model = PredictorModel::from_parts(head, first.scenario, digest, norm, net);
    let parameters = model.parameter_count();
    let (train_metrics, test_metrics, mean_u_error) = match head {
        Head::Constraint => (
            Some(evaluate(&model, train_set, cfg.threshold)?),
            Some(evaluate(&model, test_set, cfg.threshold)?),
            None,
        ),
        Head::WarmStart => {
            let preds = logits_for(model.net(), &test_data.x);
            let err = preds
                .iter()
                .zip(&test_data.targets)
                .map(|(p, t)| (p - t).amax())
                .sum::<f64>()
                / preds.len() as f64;
            (None, None, Some(err))
        }
    };
    Ok(Trained {
        model,
        report: TrainReport {
            arch,
            head,
            train_loss,
            test_loss,
            train_metrics,
            test_metrics,
            mean_u_error,
            parameters,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Thresholded predictions of `model` against the stored labels.
pub fn evaluate(model: &PredictorModel, records: &[DatasetRecord], tau: f64) -> Result<Metrics> {
    if model.head != Head::Constraint {
        return Err(Error::HeadMismatch { expected: Head::Constraint.to_string(), found: model.head.to_string() });
    }
    let xs = records
        .iter()
        .map(|r| {
            model.check_digest(&r.instance.catalog().digest())?;
            model.normalization.apply(&encode_inputs(&r.instance))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<ActiveSetLabel> = logits_for(model.net(), &xs)
        .into_iter()
        .map(|z| threshold_labels(&z.map(sigmoid), tau))
        .collect();
    let truths: Vec<&ActiveSetLabel> = records.iter().map(|r| &r.label).collect();
    evaluate_predictions(&preds, &truths)
}

pub fn evaluate_predictions(preds: &[ActiveSetLabel], truths: &[&ActiveSetLabel]) -> Result<Metrics> {
    if preds.len() != truths.len() {
        return Err(Error::Dimension("prediction and label counts differ".into()));
    }
    if preds.is_empty() {
        return Ok(Metrics::default());
    }
    let (mut exact, mut bits_right, mut bits_total) = (0usize, 0usize, 0usize);
    let (mut active_total, mut active_missed) = (0usize, 0usize);
    let mut removed = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::Dimension("label lengths differ".into()));
        }
        if p == *t {
            exact += 1;
        }
        for (&pb, &tb) in p.bits().iter().zip(t.bits()) {
            bits_right += usize::from(pb == tb);
            if tb {
                active_total += 1;
                active_missed += usize::from(!pb);
            }
        }
        bits_total += p.len();
        removed += (p.len() - p.count_active()) as f64 / p.len().max(1) as f64;
    }
    let k = preds.len() as f64;
    Ok(Metrics {
        records: preds.len(),
        exact_set_accuracy: exact as f64 / k,
        per_bit_accuracy: bits_right as f64 / bits_total.max(1) as f64,
        false_inactive_rate: if active_total == 0 { 0.0 } else { active_missed as f64 / active_total as f64 },
        mean_inactive_removed_fraction: removed / k,
    })
}

/// Compares analytic gradients with central differences on a tiny random
/// problem (`L = 3`, `d_model = 4`). Returns, per parameter group, the
/// relative error `‖g - g_fd‖ / max(‖g‖, ‖g_fd‖)`.
pub fn gradient_check(arch: Arch, head: Head, loss: LossKind, seed: u64) -> Result<Vec<(String, f64)>> {
    const H: f64 = 1e-5;
    let hyper = Hyper { d_model: 4, n_heads: 2, n_layers: 2, ff_width: 6, mlp_hidden: 5, ..Hyper::default() };
    let dims = Dims { seq_len: 3, d_in: 2, out: 5 };
    let batch = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(arch, &hyper, dims, &mut rng);
    // Move every parameter off its structured initial value.
    for p in net.params.iter_mut() {
        p.apply(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = DMatrix::from_fn(batch * dims.seq_len, dims.d_in, |_, _| rng.random_range(-1.5..1.5));
    let t = DMatrix::from_fn(batch, dims.out, |_, _| match head {
        Head::Constraint => f64::from(rng.random_bool(0.3)),
        Head::WarmStart => rng.random_range(-1.0..1.0),
    });
    let eval = |net: &Network| loss_and_grad(head, loss, &net.forward(&x).0, &t).0;

    let (logits, cache) = net.forward(&x);
    let (_, d_logits) = loss_and_grad(head, loss, &logits, &t);
    let grads = net.backward(&cache, &d_logits);
    let names = layout(arch, &hyper, dims);
    let mut out = Vec::with_capacity(names.len());
    for (idx, (name, _, _)) in names.into_iter().enumerate() {
        let mut fd = DMatrix::zeros(grads[idx].nrows(), grads[idx].ncols());
        for e in 0..fd.len() {
            let orig = net.params[idx][e];
            net.params[idx][e] = orig + H;
            let up = eval(&net);
            net.params[idx][e] = orig - H;
            let down = eval(&net);
            net.params[idx][e] = orig;
            fd[e] = (up - down) / (2.0 * H);
        }
        let denom = grads[idx].norm().max(fd.norm());
        let rel = if denom == 0.0 { 0.0 } else { (&grads[idx] - &fd).norm() / denom };
        out.push((name, rel));
    }
    Ok(out)
}
