//! Learned active-set classifier and warm-start regressor.
//!
//! Every architecture reads the same token sequence: one token per horizon
//! stage, `[x0 ‖ x_ref_k]`, standardized with statistics stored in the model.

mod attention;
mod net;
mod train;

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use attention::attention;
pub use net::{Arch, Hyper, PositionalEncoding};
pub use train::{evaluate, evaluate_predictions, gradient_check, train, LossKind, LrSchedule, Metrics, TrainConfig, TrainReport, Trained};

use crate::error::{Error, Result};
use crate::oracle::ActiveSetLabel;
use crate::problem::{MpcInstance, ScenarioId};
use net::{layout, Dims, Network};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Per-row activity scores in `[0, 1]`.
    Constraint,
    /// Predicted input sequence `u_0..u_{N-1}`.
    WarmStart,
}

impl std::str::FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constraint" => Ok(Head::Constraint),
            "warm-start" | "warmstart" => Ok(Head::WarmStart),
            other => Err(Error::InvalidArgument(format!("unknown head {other:?}"))),
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Head::Constraint => "constraint",
            Head::WarmStart => "warm-start",
        })
    }
}

/// Raw (unstandardized) tokens, one row per stage `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: DMatrix<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Token `k` is `[x0 ‖ x_ref_k]`.
pub fn encode_inputs(instance: &MpcInstance) -> TokenSequence {
    encode_with_state(instance, &instance.x0)
}

/// Same encoding with `state` in place of `x0`, as used for warm starts
/// along a closed-loop run.
pub fn encode_with_state(instance: &MpcInstance, state: &DVector<f64>) -> TokenSequence {
    let n = instance.n();
    let l = instance.horizon + 1;
    let tokens = DMatrix::from_fn(l, 2 * n, |k, j| if j < n { state[j] } else { instance.x_ref[k][j - n] });
    TokenSequence { tokens }
}

/// Per-feature standardization of token columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Mean and standard deviation of each feature over all tokens; a
    /// constant feature gets scale 1.
    pub fn fit<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        let mut width = None;
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for seq in sequences {
            let w = *width.get_or_insert(seq.width());
            if w != seq.width() {
                return Err(Error::Dimension("token widths differ".into()));
            }
            if sum.is_empty() {
                sum = vec![0.0; w];
                sum_sq = vec![0.0; w];
            }
            for r in 0..seq.len() {
                for j in 0..w {
                    let v = seq.tokens[(r, j)];
                    sum[j] += v;
                    sum_sq[j] += v * v;
                }
            }
            count += seq.len();
        }
        if count == 0 {
            return Err(Error::InvalidArgument("no tokens to fit normalization".into()));
        }
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let scale = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let sd = (sq / c - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalization { mean, scale })
    }

    pub fn identity(width: usize) -> Self {
        Normalization { mean: vec![0.0; width], scale: vec![1.0; width] }
    }

    pub fn apply(&self, seq: &TokenSequence) -> Result<DMatrix<f64>> {
        if seq.width() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "token width {} but normalization has {}",
                seq.width(),
                self.mean.len()
            )));
        }
        let mut m = seq.tokens.clone();
        for j in 0..m.ncols() {
            let (mu, s) = (self.mean[j], self.scale[j]);
            m.column_mut(j).apply(|v| *v = (*v - mu) / s);
        }
        Ok(m)
    }
}

/// Bit `j` is active iff `scores[j] >= tau`.
pub fn threshold_labels(scores: &DVector<f64>, tau: f64) -> ActiveSetLabel {
    ActiveSetLabel::new(scores.iter().map(|&s| s >= tau).collect())
}

/// A trained (or freshly initialized) predictor with everything needed to
/// encode inputs for it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub arch: Arch,
    pub head: Head,
    pub hyper: Hyper,
    pub scenario: ScenarioId,
    pub catalog_digest: String,
    pub normalization: Normalization,
    net: Network,
}

impl PredictorModel {
    pub(crate) fn from_parts(
        head: Head,
        scenario: ScenarioId,
        catalog_digest: String,
        normalization: Normalization,
        net: Network,
    ) -> Self {
        PredictorModel {
            arch: net.arch,
            head,
            hyper: net.hyper.clone(),
            scenario,
            catalog_digest,
            normalization,
            net,
        }
    }

    /// Model with every parameter set to zero.
    pub fn zeroed(arch: Arch, head: Head, hyper: &Hyper, instance: &MpcInstance) -> Result<Self> {
        hyper.validate()?;
        let dims = Dims {
            seq_len: instance.horizon + 1,
            d_in: 2 * instance.n(),
            out: match head {
                Head::Constraint => instance.catalog().len(),
                Head::WarmStart => instance.horizon * instance.m(),
            },
        };
        let params = layout(arch, hyper, dims)
            .into_iter()
            .map(|(_, r, c)| DMatrix::zeros(r, c))
            .collect();
        let net = Network { arch, hyper: hyper.clone(), dims, params };
        Ok(Self::from_parts(
            head,
            instance.scenario,
            instance.catalog().digest(),
            Normalization::identity(dims.d_in),
            net,
        ))
    }

    pub fn seq_len(&self) -> usize {
        self.net.dims.seq_len
    }

    pub fn output_dim(&self) -> usize {
        self.net.dims.out
    }

    pub(crate) fn net(&self) -> &Network {
        &self.net
    }

    /// Parameter names in storage order.
    pub fn parameter_names(&self) -> Vec<String> {
        layout(self.arch, &self.hyper, self.net.dims).into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.params.iter().map(|p| p.len()).sum()
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.len() != self.net.dims.seq_len {
            return Err(Error::Dimension(format!(
                "{} tokens but the model expects {}",
                tokens.len(),
                self.net.dims.seq_len
            )));
        }
        if tokens.width() != self.net.dims.d_in {
            return Err(Error::Dimension(format!(
                "token width {} but the model expects {}",
                tokens.width(),
                self.net.dims.d_in
            )));
        }
        if tokens.tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tokens"));
        }
        Ok(())
    }

    /// Raw head output for one token sequence: sigmoid scores for the
    /// constraint head, inputs for the warm-start head.
    pub fn forward(&self, tokens: &TokenSequence) -> Result<DVector<f64>> {
        self.check_tokens(tokens)?;
        let x = self.normalization.apply(tokens)?;
        let (logits, _) = self.net.forward(&x);
        let mut out = DVector::from_iterator(logits.ncols(), logits.row(0).iter().copied());
        if self.head == Head::Constraint {
            out.apply(|v| *v = sigmoid(*v));
        }
        Ok(out)
    }

    fn check_instance(&self, instance: &MpcInstance) -> Result<()> {
        if instance.scenario != self.scenario {
            return Err(Error::InvalidArgument(format!(
                "model is for {}, instance is {}",
                self.scenario, instance.scenario
            )));
        }
        let digest = instance.catalog().digest();
        if digest != self.catalog_digest {
            return Err(Error::DigestMismatch { expected: self.catalog_digest.clone(), found: digest });
        }
        Ok(())
    }

    pub fn predict_label(&self, instance: &MpcInstance, tau: f64) -> Result<ActiveSetLabel> {
        if self.head != Head::Constraint {
            return Err(Error::HeadMismatch { expected: Head::Constraint.to_string(), found: self.head.to_string() });
        }
        self.check_instance(instance)?;
        Ok(threshold_labels(&self.forward(&encode_inputs(instance))?, tau))
    }

    /// Warm-start inputs for `instance`, encoded from `state` (normally x0).
    pub fn predict_inputs(&self, instance: &MpcInstance, state: &DVector<f64>) -> Result<DVector<f64>> {
        if self.head != Head::WarmStart {
            return Err(Error::HeadMismatch { expected: Head::WarmStart.to_string(), found: self.head.to_string() });
        }
        self.check_instance(instance)?;
        self.forward(&encode_with_state(instance, state))
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, &ModelFile::from(self))?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(input)?;
        file.try_into()
    }

    /// Fails with [`Error::DigestMismatch`] when the catalog differs.
    pub fn check_digest(&self, digest: &str) -> Result<()> {
        if digest != self.catalog_digest {
            return Err(Error::DigestMismatch { expected: self.catalog_digest.clone(), found: digest.to_string() });
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    arch: Arch,
    head: Head,
    hyper: Hyper,
    scenario: ScenarioId,
    catalog_digest: String,
    seq_len: usize,
    input_dim: usize,
    output_dim: usize,
    normalization: Normalization,
    weights: Vec<NamedTensor>,
}

impl From<&PredictorModel> for ModelFile {
    fn from(m: &PredictorModel) -> Self {
        let weights = layout(m.arch, &m.hyper, m.net.dims)
            .into_iter()
            .zip(&m.net.params)
            .map(|((name, rows, cols), p)| NamedTensor { name, rows, cols, data: p.transpose().as_slice().to_vec() })
            .collect();
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            arch: m.arch,
            head: m.head,
            hyper: m.hyper.clone(),
            scenario: m.scenario,
            catalog_digest: m.catalog_digest.clone(),
            seq_len: m.net.dims.seq_len,
            input_dim: m.net.dims.d_in,
            output_dim: m.net.dims.out,
            normalization: m.normalization.clone(),
            weights,
        }
    }
}

impl TryFrom<ModelFile> for PredictorModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let corrupt = |msg: String| Error::InvalidArgument(format!("model file: {msg}"));
        if f.format_version != MODEL_FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", f.format_version)));
        }
        f.hyper.validate()?;
        let dims = Dims { seq_len: f.seq_len, d_in: f.input_dim, out: f.output_dim };
        if f.normalization.mean.len() != dims.d_in || f.normalization.scale.len() != dims.d_in {
            return Err(corrupt("normalization width".into()));
        }
        if f.normalization.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(corrupt("normalization scale must be positive".into()));
        }
        let expected = layout(f.arch, &f.hyper, dims);
        if expected.len() != f.weights.len() {
            return Err(corrupt(format!("{} weight arrays, expected {}", f.weights.len(), expected.len())));
        }
        let mut params = Vec::with_capacity(expected.len());
        for ((name, rows, cols), t) in expected.into_iter().zip(f.weights) {
            if t.name != name || t.rows != rows || t.cols != cols || t.data.len() != rows * cols {
                return Err(corrupt(format!("weight {:?} does not match expected {name:?} {rows}x{cols}", t.name)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("model weights"));
            }
            params.push(DMatrix::from_row_slice(rows, cols, &t.data));
        }
        let net = Network { arch: f.arch, hyper: f.hyper, dims, params };
        Ok(PredictorModel::from_parts(f.head, f.scenario, f.catalog_digest, f.normalization, net))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_mpc_instance, ScenarioParams};

    fn instance() -> MpcInstance {
        build_mpc_instance(ScenarioId::DoubleIntegrator, &ScenarioParams::default(), 3).unwrap()
    }

    #[test]
    fn threshold_ties_go_active() {
        let s = DVector::from_vec(vec![0.9, 0.1, 0.5]);
        assert_eq!(threshold_labels(&s, 0.5).bits(), &[true, false, true]);
        assert_eq!(threshold_labels(&s, 0.0).count_active(), 3);
    }

    #[test]
    fn zero_models_emit_half_or_zero() {
        let inst = instance();
        for arch in [Arch::Transformer, Arch::Mlp, Arch::LogReg] {
            let m = PredictorModel::zeroed(arch, Head::Constraint, &Hyper::default(), &inst).unwrap();
            let out = m.forward(&encode_inputs(&inst)).unwrap();
            assert_eq!(out.len(), inst.catalog().len());
            assert!(out.iter().all(|&v| v == 0.5));
            let w = PredictorModel::zeroed(arch, Head::WarmStart, &Hyper::default(), &inst).unwrap();
            let out = w.forward(&encode_inputs(&inst)).unwrap();
            assert_eq!(out.len(), inst.horizon * inst.m());
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoding_layout() {
        let inst = instance();
        let t = encode_inputs(&inst);
        assert_eq!((t.len(), t.width()), (21, 4));
        assert_eq!(t.tokens[(5, 0)], inst.x0[0]);
        assert_eq!(t.tokens[(5, 2)], inst.x_ref[5][0]);
    }

    #[test]
    fn normalization_standardizes() {
        let a = TokenSequence { tokens: DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 3.0, 5.0]) };
        let norm = Normalization::fit([&a]).unwrap();
        assert_eq!(norm.mean, vec![2.0, 5.0]);
        assert_eq!(norm.scale, vec![1.0, 1.0]);
        let x = norm.apply(&a).unwrap();
        assert_eq!(x.as_slice(), &[-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_horizon_is_rejected() {
        let inst = instance();
        let m = PredictorModel::zeroed(Arch::Mlp, Head::Constraint, &Hyper::default(), &inst).unwrap();
        let short = TokenSequence { tokens: DMatrix::zeros(5, 4) };
        assert!(matches!(m.forward(&short), Err(Error::Dimension(_))));
    }

    #[test]
    fn head_mismatch_is_reported() {
        let inst = instance();
        let m = PredictorModel::zeroed(Arch::LogReg, Head::WarmStart, &Hyper::default(), &inst).unwrap();
        assert!(matches!(m.predict_label(&inst, 0.5), Err(Error::HeadMismatch { .. })));
    }

    #[test]
    fn model_file_rejects_tampered_shapes() {
        let inst = instance();
        let m = PredictorModel::zeroed(Arch::LogReg, Head::Constraint, &Hyper::default(), &inst).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("\"rows\":84", "\"rows\":83");
        assert!(PredictorModel::load(text.as_bytes()).is_err());
    }
}
