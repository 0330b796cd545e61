//! Aggregation of many constraints `v_j ≤ 0` into one smooth constraint
//! `log Σ exp(β v_j) ≤ 0`.
//!
//! The combined set is an inner approximation: `lse ≤ 0` forces every
//! `v_j ≤ 0`, while `max v_j ≤ lse/β ≤ max v_j + log(M)/β` bounds the
//! conservatism, which vanishes as `β → ∞`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 50.0;
/// Slack used by [`sandwich_check`].
pub const SANDWICH_SLACK: f64 = 1e-9;
/// Members per leaf of the parallel reduction tree.
const LEAF: usize = 64;

fn check(values: &[f64], beta: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values to combine".into()));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("constraint values"));
    }
    Ok(())
}

/// Partial sum `Σ exp(β v - shift)` carried with its shift.
#[derive(Debug, Clone, Copy)]
struct Partial {
    shift: f64,
    sum: f64,
}

impl Partial {
    fn of(values: &[f64], beta: f64) -> Self {
        let shift = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(beta * v));
        let sum = values.iter().map(|&v| (beta * v - shift).exp()).sum();
        Partial { shift, sum }
    }

    fn merge(self, other: Partial) -> Partial {
        let shift = self.shift.max(other.shift);
        Partial {
            shift,
            sum: self.sum * (self.shift - shift).exp() + other.sum * (other.shift - shift).exp(),
        }
    }

    fn log(self) -> f64 {
        self.shift + self.sum.ln()
    }
}

/// `log Σ_j exp(β v_j)`, evaluated around the largest term so that
/// `|β v|` up to 1e6 neither overflows nor underflows to `-inf`.
pub fn lse_combine(values: &[f64], beta: f64) -> Result<f64> {
    check(values, beta)?;
    Ok(Partial::of(values, beta).log())
}

/// Same value as a fixed-shape tree reduction over leaves of 64 members.
/// Leaves are spread over `workers` threads; the tree does not depend on the
/// worker count, so the result is bit-identical for any `workers`.
pub fn lse_combine_parallel(values: &[f64], beta: f64, workers: usize) -> Result<f64> {
    check(values, beta)?;
    let leaves: Vec<&[f64]> = values.chunks(LEAF).collect();
    let workers = workers.clamp(1, leaves.len());
    let mut partials = if workers == 1 {
        leaves.iter().map(|l| Partial::of(l, beta)).collect::<Vec<_>>()
    } else {
        let per = leaves.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = leaves
                .chunks(per)
                .map(|group| scope.spawn(move || group.iter().map(|l| Partial::of(l, beta)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("reduction worker panicked"))
                .collect()
        })
    };
    while partials.len() > 1 {
        partials = partials
            .chunks(2)
            .map(|pair| if pair.len() == 2 { pair[0].merge(pair[1]) } else { pair[0] })
            .collect();
    }
    Ok(partials[0].log())
}

/// Softmax weights `exp(β v_j) / Σ exp(β v)`.
pub fn lse_weights(values: &[f64], beta: f64) -> Result<Vec<f64>> {
    check(values, beta)?;
    let p = Partial::of(values, beta);
    Ok(values.iter().map(|&v| (beta * v - p.shift).exp() / p.sum).collect())
}

/// Gradient of [`lse_combine`] given member gradients as rows of
/// `member_grads`: `β Σ_j w_j ∇v_j` with the softmax weights `w`.
pub fn lse_gradient(values: &[f64], member_grads: &DMatrix<f64>, beta: f64) -> Result<DVector<f64>> {
    if member_grads.nrows() != values.len() {
        return Err(Error::Dimension(format!(
            "{} values but {} gradient rows",
            values.len(),
            member_grads.nrows()
        )));
    }
    let w = DVector::from_vec(lse_weights(values, beta)?);
    Ok(member_grads.tr_mul(&w) * beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    /// `max v_j`.
    pub lower: f64,
    /// `max v_j + log(M)/β`.
    pub upper: f64,
    /// `lse/β`.
    pub scaled: f64,
    pub holds: bool,
}

impl Sandwich {
    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }
}

pub fn sandwich_check(values: &[f64], beta: f64) -> Result<Sandwich> {
    let scaled = lse_combine(values, beta)? / beta;
    let lower = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let upper = lower + (values.len() as f64).ln() / beta;
    let holds = lower - SANDWICH_SLACK <= scaled && scaled <= upper + SANDWICH_SLACK;
    Ok(Sandwich { lower, upper, scaled, holds })
}

/// Alternative aggregators. Only [`Aggregator::LogSumExp`] carries the
/// containment and sandwich guarantees tested for [`lse_combine`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Aggregator {
    LogSumExp { beta: f64 },
    /// `log(mean exp(ω v)) / ω`.
    Mellowmax { omega: f64 },
    /// `(Σ max(v, 0)^p)^(1/p)`: zero exactly when every member holds.
    PNorm { p: f64 },
}

impl Aggregator {
    pub fn combine(&self, values: &[f64]) -> Result<f64> {
        match *self {
            Aggregator::LogSumExp { beta } => lse_combine(values, beta),
            Aggregator::Mellowmax { omega } => {
                Ok((lse_combine(values, omega)? - (values.len() as f64).ln()) / omega)
            }
            Aggregator::PNorm { p } => {
                if !(p >= 1.0) || !p.is_finite() {
                    return Err(Error::InvalidArgument(format!("p-norm order must be at least 1, got {p}")));
                }
                check(values, 1.0)?;
                let scale = values.iter().fold(0.0f64, |m, &v| m.max(v));
                if scale == 0.0 {
                    return Ok(0.0);
                }
                let s: f64 = values.iter().map(|&v| (v.max(0.0) / scale).powf(p)).sum();
                Ok(scale * s.powf(1.0 / p))
            }
        }
    }
}

/// Ball constraints `‖x - c_j‖² - r_j² ≤ 0`; the feasible set is the
/// intersection of the balls.
#[derive(Debug, Clone, PartialEq)]
pub struct BallConstraints {
    pub centers: Vec<DVector<f64>>,
    pub radii: Vec<f64>,
}

impl BallConstraints {
    /// `count` balls in `dim` dimensions that all contain the origin.
    pub fn sample<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Self {
        let mut centers = Vec::with_capacity(count);
        let mut radii = Vec::with_capacity(count);
        for _ in 0..count {
            let c = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
            let r = c.norm() + rng.random_range(0.2..1.5);
            centers.push(c);
            radii.push(r);
        }
        BallConstraints { centers, radii }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn values(&self, x: &DVector<f64>) -> Vec<f64> {
        self.centers
            .iter()
            .zip(&self.radii)
            .map(|(c, r)| (x - c).norm_squared() - r * r)
            .collect()
    }

    /// Member gradients as rows.
    pub fn gradients(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let dim = x.len();
        DMatrix::from_fn(self.len(), dim, |j, i| 2.0 * (x[i] - self.centers[j][i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_is_scaled_value() {
        assert!((lse_combine(&[0.37], 3.0).unwrap() - 1.11).abs() < 1e-12);
    }

    #[test]
    fn two_value_reference() {
        let v = lse_combine(&[0.0, -2.0], 1.0).unwrap();
        assert!((v - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn equal_values_add_log_count() {
        let v = lse_combine(&[0.5; 8], 2.0).unwrap();
        assert!((v - (1.0 + 8f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(lse_combine(&[], 1.0).is_err());
        assert!(lse_combine(&[1.0], 0.0).is_err());
        assert!(lse_combine(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn no_overflow_at_extreme_scale() {
        let v = lse_combine(&[1e6, 1e6 - 1.0], 1.0).unwrap();
        assert!((v - (1e6 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-9);
        let v = lse_combine(&[-1e6, -1e6], 1.0).unwrap();
        assert!((v - (-1e6 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn symmetric_pair_gradient_averages() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let grad = lse_gradient(&[0.2, 0.2], &g, 4.0).unwrap();
        assert!((grad[0] - 2.0).abs() < 1e-15);
        assert!((grad[1] - 6.0).abs() < 1e-15);
    }

    #[test]
    fn sandwich_example() {
        let s = sandwich_check(&[0.0, -1.0, -2.0], 10.0).unwrap();
        assert!(s.holds);
        assert_eq!(s.lower, 0.0);
        assert!(s.scaled >= 0.0 && s.scaled <= 3f64.ln() / 10.0);
        let one = sandwich_check(&[-0.4], 7.0).unwrap();
        assert_eq!(one.gap(), 0.0);
        assert!((one.scaled + 0.4).abs() < 1e-15);
    }

    #[test]
    fn alternative_aggregators() {
        let mm = Aggregator::Mellowmax { omega: 1.0 }.combine(&[1.0, 1.0]).unwrap();
        assert!((mm - 1.0).abs() < 1e-15);
        assert_eq!(Aggregator::PNorm { p: 2.0 }.combine(&[-1.0, -3.0]).unwrap(), 0.0);
        let pn = Aggregator::PNorm { p: 2.0 }.combine(&[3.0, 4.0, -1.0]).unwrap();
        assert!((pn - 5.0).abs() < 1e-12);
        assert!(Aggregator::PNorm { p: 0.5 }.combine(&[1.0]).is_err());
    }

    #[test]
    fn ball_gradients_match_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let set = BallConstraints::sample(&mut rng, 4, 3);
        let x = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let g = set.gradients(&x);
        for i in 0..3 {
            let mut e = DVector::zeros(3);
            e[i] = 1e-6;
            let (up, down) = (set.values(&(&x + &e)), set.values(&(&x - &e)));
            for j in 0..4 {
                assert!(((up[j] - down[j]) / 2e-6 - g[(j, i)]).abs() < 1e-6);
            }
        }
    }
}
