//! Network forward and backward passes on batched, row-per-token matrices.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::attention_weights_view;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Transformer,
    Mlp,
    #[serde(rename = "logreg")]
    LogReg,
}

impl std::str::FromStr for Arch {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "transformer" => Ok(Arch::Transformer),
            "mlp" => Ok(Arch::Mlp),
            "logreg" => Ok(Arch::LogReg),
            other => Err(crate::Error::InvalidArgument(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Transformer => "transformer",
            Arch::Mlp => "mlp",
            Arch::LogReg => "logreg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_width: usize,
    /// Hidden width of both MLP layers.
    pub mlp_hidden: usize,
    pub positional: PositionalEncoding,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ff_width: 128,
            mlp_hidden: 128,
            positional: PositionalEncoding::Learned,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ff_width == 0 || self.mlp_hidden == 0 {
            return Err(crate::Error::InvalidArgument("model widths must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(crate::Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Sequence length, token width and output width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub seq_len: usize,
    pub d_in: usize,
    pub out: usize,
}

// Per-layer parameter offsets inside the transformer list.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FF_W1: usize = 8;
const FF_B1: usize = 9;
const FF_W2: usize = 10;
const FF_B2: usize = 11;
const PER_LAYER: usize = 12;
const ENC_W: usize = 0;
const ENC_B: usize = 1;
const POS: usize = 2;
const FIRST_LAYER: usize = 3;

/// Ordered parameter names and shapes for an architecture.
pub(crate) fn layout(arch: Arch, hyper: &Hyper, dims: Dims) -> Vec<(String, usize, usize)> {
    let Dims { seq_len: l, d_in, out } = dims;
    let d = hyper.d_model;
    let mut v: Vec<(String, usize, usize)> = Vec::new();
    let mut push = |name: String, r: usize, c: usize| v.push((name, r, c));
    match arch {
        Arch::Transformer => {
            push("enc_w".into(), d_in, d);
            push("enc_b".into(), 1, d);
            push("pos".into(), l, d);
            for i in 0..hyper.n_layers {
                let p = format!("layers.{i}.");
                push(format!("{p}ln1_g"), 1, d);
                push(format!("{p}ln1_b"), 1, d);
                push(format!("{p}wq"), d, d);
                push(format!("{p}wk"), d, d);
                push(format!("{p}wv"), d, d);
                push(format!("{p}wo"), d, d);
                push(format!("{p}ln2_g"), 1, d);
                push(format!("{p}ln2_b"), 1, d);
                push(format!("{p}ff_w1"), d, hyper.ff_width);
                push(format!("{p}ff_b1"), 1, hyper.ff_width);
                push(format!("{p}ff_w2"), hyper.ff_width, d);
                push(format!("{p}ff_b2"), 1, d);
            }
            push("norm_g".into(), 1, d);
            push("norm_b".into(), 1, d);
            push("dec_w".into(), l * d, out);
            push("dec_b".into(), 1, out);
        }
        Arch::Mlp => {
            let h = hyper.mlp_hidden;
            push("w1".into(), l * d_in, h);
            push("b1".into(), 1, h);
            push("w2".into(), h, h);
            push("b2".into(), 1, h);
            push("w3".into(), h, out);
            push("b3".into(), 1, out);
        }
        Arch::LogReg => {
            push("w".into(), l * d_in, out);
            push("b".into(), 1, out);
        }
    }
    v
}

pub(crate) fn sinusoidal_table(len: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(len, d, |pos, j| {
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Network {
    pub arch: Arch,
    pub hyper: Hyper,
    pub dims: Dims,
    pub params: Vec<DMatrix<f64>>,
}

impl Network {
    /// Glorot-uniform weights, zero biases, unit norm gains.
    pub fn init(arch: Arch, hyper: &Hyper, dims: Dims, rng: &mut ChaCha8Rng) -> Self {
        let pos_dist = Normal::new(0.0, 0.02).expect("valid normal");
        let params = layout(arch, hyper, dims)
            .into_iter()
            .map(|(name, r, c)| {
                let leaf = name.rsplit('.').next().unwrap_or(&name);
                if leaf == "pos" {
                    match hyper.positional {
                        PositionalEncoding::Learned => DMatrix::from_fn(r, c, |_, _| pos_dist.sample(rng)),
                        PositionalEncoding::Sinusoidal => sinusoidal_table(r, c),
                    }
                } else if leaf.ends_with("_g") {
                    DMatrix::from_element(r, c, 1.0)
                } else if r == 1 {
                    DMatrix::zeros(r, c)
                } else {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    DMatrix::from_fn(r, c, |_, _| rng.random_range(-a..a))
                }
            })
            .collect();
        Network { arch, hyper: hyper.clone(), dims, params }
    }

    pub fn zeros_like(&self) -> Vec<DMatrix<f64>> {
        self.params.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect()
    }

    /// Whether parameter `idx` is trained (a sinusoidal table is not).
    pub fn trainable(&self, idx: usize) -> bool {
        !(self.arch == Arch::Transformer && idx == POS && self.hyper.positional == PositionalEncoding::Sinusoidal)
    }

    /// Logits for a batch given as stacked token rows (`B·L × d_in`).
    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        match self.arch {
            Arch::Transformer => self.forward_transformer(x),
            Arch::Mlp => {
                let flat = flatten_tokens(x, self.dims.seq_len);
                let p = &self.params;
                let mut h1 = &flat * &p[0];
                add_bias(&mut h1, &p[1]);
                h1.apply(|v| *v = v.max(0.0));
                let mut h2 = &h1 * &p[2];
                add_bias(&mut h2, &p[3]);
                h2.apply(|v| *v = v.max(0.0));
                let mut out = &h2 * &p[4];
                add_bias(&mut out, &p[5]);
                (out, Cache::Mlp { flat, h1, h2 })
            }
            Arch::LogReg => {
                let flat = flatten_tokens(x, self.dims.seq_len);
                let mut out = &flat * &self.params[0];
                add_bias(&mut out, &self.params[1]);
                (out, Cache::LogReg { flat })
            }
        }
    }

    /// Parameter gradients from the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, cache: &Cache, d_out: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let p = &self.params;
        match cache {
            Cache::Transformer(c) => self.backward_transformer(c, d_out),
            Cache::Mlp { flat, h1, h2 } => {
                let mut g = self.zeros_like();
                g[4] = h2.tr_mul(d_out);
                g[5] = col_sums(d_out);
                let mut dh2 = d_out * p[4].transpose();
                dh2.zip_apply(h2, |d, h| {
                    if h <= 0.0 {
                        *d = 0.0
                    }
                });
                g[2] = h1.tr_mul(&dh2);
                g[3] = col_sums(&dh2);
                let mut dh1 = &dh2 * p[2].transpose();
                dh1.zip_apply(h1, |d, h| {
                    if h <= 0.0 {
                        *d = 0.0
                    }
                });
                g[0] = flat.tr_mul(&dh1);
                g[1] = col_sums(&dh1);
                g
            }
            Cache::LogReg { flat } => vec![flat.tr_mul(d_out), col_sums(d_out)],
        }
    }

    fn forward_transformer(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        let p = &self.params;
        let l = self.dims.seq_len;
        let batch = x.nrows() / l;
        let (d, heads) = (self.hyper.d_model, self.hyper.n_heads);
        let dk = d / heads;

        let mut z = x * &p[ENC_W];
        add_bias(&mut z, &p[ENC_B]);
        for s in 0..batch {
            let mut block = z.rows_mut(s * l, l);
            block += &p[POS];
        }

        let mut layers = Vec::with_capacity(self.hyper.n_layers);
        for li in 0..self.hyper.n_layers {
            let o = FIRST_LAYER + li * PER_LAYER;
            let z_in = z;
            let ln1 = layer_norm(&z_in, &p[o + LN1_G], &p[o + LN1_B]);
            let q = &ln1.y * &p[o + WQ];
            let k = &ln1.y * &p[o + WK];
            let v = &ln1.y * &p[o + WV];
            let mut ctx = DMatrix::zeros(batch * l, d);
            let mut weights = Vec::with_capacity(batch * heads);
            for s in 0..batch {
                for h in 0..heads {
                    let a = attention_weights_view(q.view((s * l, h * dk), (l, dk)), k.view((s * l, h * dk), (l, dk)));
                    let c = &a * v.view((s * l, h * dk), (l, dk));
                    ctx.view_mut((s * l, h * dk), (l, dk)).copy_from(&c);
                    weights.push(a);
                }
            }
            let z_mid = &z_in + &ctx * &p[o + WO];
            let ln2 = layer_norm(&z_mid, &p[o + LN2_G], &p[o + LN2_B]);
            let mut pre = &ln2.y * &p[o + FF_W1];
            add_bias(&mut pre, &p[o + FF_B1]);
            let act = pre.map(gelu);
            let mut ff = &act * &p[o + FF_W2];
            add_bias(&mut ff, &p[o + FF_B2]);
            z = &z_mid + ff;
            layers.push(LayerCache { ln1, q, k, v, weights, ctx, ln2, pre, act });
        }

        let o = FIRST_LAYER + self.hyper.n_layers * PER_LAYER;
        let lnf = layer_norm(&z, &p[o], &p[o + 1]);
        let flat = flatten_tokens(&lnf.y, l);
        let mut out = &flat * &p[o + 2];
        add_bias(&mut out, &p[o + 3]);
        (out, Cache::Transformer(Box::new(TransformerCache { x: x.clone(), layers, lnf, flat })))
    }

    fn backward_transformer(&self, c: &TransformerCache, d_out: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let p = &self.params;
        let l = self.dims.seq_len;
        let batch = c.x.nrows() / l;
        let (d, heads) = (self.hyper.d_model, self.hyper.n_heads);
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut g = self.zeros_like();

        let o = FIRST_LAYER + self.hyper.n_layers * PER_LAYER;
        g[o + 2] = c.flat.tr_mul(d_out);
        g[o + 3] = col_sums(d_out);
        let d_flat = d_out * p[o + 2].transpose();
        let d_lnf = unflatten_tokens(&d_flat, l, d);
        let (mut dz, dg, db) = layer_norm_backward(&d_lnf, &c.lnf, &p[o]);
        g[o] = dg;
        g[o + 1] = db;

        for li in (0..self.hyper.n_layers).rev() {
            let o = FIRST_LAYER + li * PER_LAYER;
            let lc = &c.layers[li];
            // Feed-forward branch: z = z_mid + ff(ln2(z_mid)).
            g[o + FF_W2] = lc.act.tr_mul(&dz);
            g[o + FF_B2] = col_sums(&dz);
            let mut d_pre = &dz * p[o + FF_W2].transpose();
            d_pre.zip_apply(&lc.pre, |dv, x| *dv *= gelu_grad(x));
            g[o + FF_W1] = lc.ln2.y.tr_mul(&d_pre);
            g[o + FF_B1] = col_sums(&d_pre);
            let d_ln2 = &d_pre * p[o + FF_W1].transpose();
            let (d_mid, dg2, db2) = layer_norm_backward(&d_ln2, &lc.ln2, &p[o + LN2_G]);
            g[o + LN2_G] = dg2;
            g[o + LN2_B] = db2;
            let dz_mid = dz + d_mid;

            // Attention branch: z_mid = z_in + ctx·Wo.
            g[o + WO] = lc.ctx.tr_mul(&dz_mid);
            let d_ctx = &dz_mid * p[o + WO].transpose();
            let mut dq = DMatrix::zeros(batch * l, d);
            let mut dk_m = DMatrix::zeros(batch * l, d);
            let mut dv = DMatrix::zeros(batch * l, d);
            for s in 0..batch {
                for h in 0..heads {
                    let a = &lc.weights[s * heads + h];
                    let (r0, c0) = (s * l, h * dk);
                    let dc = d_ctx.view((r0, c0), (l, dk));
                    let vs = lc.v.view((r0, c0), (l, dk));
                    let da = dc * vs.transpose();
                    dv.view_mut((r0, c0), (l, dk)).copy_from(&a.tr_mul(&dc));
                    let mut ds = da;
                    for i in 0..l {
                        let dot: f64 = (0..l).map(|j| ds[(i, j)] * a[(i, j)]).sum();
                        for j in 0..l {
                            ds[(i, j)] = a[(i, j)] * (ds[(i, j)] - dot) * scale;
                        }
                    }
                    dq.view_mut((r0, c0), (l, dk))
                        .copy_from(&(&ds * lc.k.view((r0, c0), (l, dk))));
                    dk_m.view_mut((r0, c0), (l, dk))
                        .copy_from(&(ds.tr_mul(&lc.q.view((r0, c0), (l, dk)))));
                }
            }
            g[o + WQ] = lc.ln1.y.tr_mul(&dq);
            g[o + WK] = lc.ln1.y.tr_mul(&dk_m);
            g[o + WV] = lc.ln1.y.tr_mul(&dv);
            let mut d_ln1 = &dq * p[o + WQ].transpose();
            d_ln1 += &dk_m * p[o + WK].transpose();
            d_ln1 += &dv * p[o + WV].transpose();
            let (d_in, dg1, db1) = layer_norm_backward(&d_ln1, &lc.ln1, &p[o + LN1_G]);
            g[o + LN1_G] = dg1;
            g[o + LN1_B] = db1;
            dz = dz_mid + d_in;
        }

        if self.trainable(POS) {
            let mut dpos = DMatrix::zeros(l, d);
            for s in 0..batch {
                dpos += dz.rows(s * l, l);
            }
            g[POS] = dpos;
        }
        g[ENC_W] = c.x.tr_mul(&dz);
        g[ENC_B] = col_sums(&dz);
        g
    }
}

pub(crate) enum Cache {
    Transformer(Box<TransformerCache>),
    Mlp {
        flat: DMatrix<f64>,
        h1: DMatrix<f64>,
        h2: DMatrix<f64>,
    },
    LogReg {
        flat: DMatrix<f64>,
    },
}

pub(crate) struct TransformerCache {
    x: DMatrix<f64>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    flat: DMatrix<f64>,
}

struct LayerCache {
    ln1: NormCache,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    weights: Vec<DMatrix<f64>>,
    ctx: DMatrix<f64>,
    ln2: NormCache,
    pre: DMatrix<f64>,
    act: DMatrix<f64>,
}

struct NormCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
    y: DMatrix<f64>,
}

fn layer_norm(x: &DMatrix<f64>, gain: &DMatrix<f64>, bias: &DMatrix<f64>) -> NormCache {
    let (rows, cols) = x.shape();
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut row = xhat.row_mut(i);
        let mean = row.mean();
        row.add_scalar_mut(-mean);
        let var = row.norm_squared() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row *= inv;
        inv_std.push(inv);
    }
    let mut y = xhat.clone();
    for j in 0..cols {
        let (gj, bj) = (gain[(0, j)], bias[(0, j)]);
        y.column_mut(j).apply(|v| *v = *v * gj + bj);
    }
    NormCache { xhat, inv_std, y }
}

fn layer_norm_backward(
    dy: &DMatrix<f64>,
    cache: &NormCache,
    gain: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = dy.shape();
    let dgain = DMatrix::from_fn(1, cols, |_, j| dy.column(j).dot(&cache.xhat.column(j)));
    let dbias = col_sums(dy);
    let mut dx = dy.clone();
    for j in 0..cols {
        dx.column_mut(j).scale_mut(gain[(0, j)]);
    }
    let n = cols as f64;
    for i in 0..rows {
        let mean_d = dx.row(i).sum() / n;
        let mean_dx = dx.row(i).dot(&cache.xhat.row(i)) / n;
        let inv = cache.inv_std[i];
        for j in 0..cols {
            dx[(i, j)] = inv * (dx[(i, j)] - mean_d - cache.xhat[(i, j)] * mean_dx);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_bias(m: &mut DMatrix<f64>, bias: &DMatrix<f64>) {
    for j in 0..m.ncols() {
        m.column_mut(j).add_scalar_mut(bias[(0, j)]);
    }
}

fn col_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

/// `(B·L × c)` token rows to `(B × L·c)` sample rows, token-major.
pub(crate) fn flatten_tokens(x: &DMatrix<f64>, seq_len: usize) -> DMatrix<f64> {
    let c = x.ncols();
    let batch = x.nrows() / seq_len;
    DMatrix::from_fn(batch, seq_len * c, |s, f| x[(s * seq_len + f / c, f % c)])
}

fn unflatten_tokens(x: &DMatrix<f64>, seq_len: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows() * seq_len, c, |r, j| x[(r / seq_len, (r % seq_len) * c + j)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flatten_round_trip() {
        let x = DMatrix::from_fn(6, 2, |i, j| (10 * i + j) as f64);
        let f = flatten_tokens(&x, 3);
        assert_eq!(f.shape(), (2, 6));
        assert_eq!(f.row(1).iter().copied().collect::<Vec<_>>(), vec![30.0, 31.0, 40.0, 41.0, 50.0, 51.0]);
        assert_eq!(unflatten_tokens(&f, 3, 2), x);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]);
        let nc = layer_norm(&x, &DMatrix::from_element(1, 4, 1.0), &DMatrix::zeros(1, 4));
        for i in 0..2 {
            assert!(nc.y.row(i).mean().abs() < 1e-12);
            assert!((nc.y.row(i).norm_squared() / 4.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layouts_are_consistent() {
        let hyper = Hyper::default();
        let dims = Dims { seq_len: 21, d_in: 4, out: 120 };
        let net = Network::init(Arch::Transformer, &hyper, dims, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.params.len(), 3 + 2 * PER_LAYER + 4);
        assert_eq!(net.params[POS].shape(), (21, 64));
        let lay = layout(Arch::Mlp, &hyper, dims);
        assert_eq!((lay[0].1, lay[0].2), (84, 128));
    }
}
