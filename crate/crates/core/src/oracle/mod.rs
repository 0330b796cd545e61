//! Ground-truth active sets and the training/evaluation dataset.

mod dataset;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use dataset::{
    dataset_header, derive_seed, generate_dataset, generate_records, read_dataset, split_dataset, write_dataset, DatasetHeader,
    DatasetRecord, GenerationConfig, GenerationStats, SolveMeta, Split, FORMAT_VERSION,
};

use crate::error::{Error, Result};
use crate::problem::{constraint_residuals, SparseQp};
use crate::qpsolve::{QpSolution, SolveStatus};

pub const DEFAULT_EPS_PRIMAL: f64 = 1e-6;
pub const DEFAULT_EPS_DUAL: f64 = 1e-6;

/// One bit per catalog row: `true` when the row binds at the optimum.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ActiveSetLabel {
    bits: Vec<bool>,
}

impl ActiveSetLabel {
    pub fn new(bits: Vec<bool>) -> Self {
        ActiveSetLabel { bits }
    }

    pub fn all_inactive(len: usize) -> Self {
        ActiveSetLabel { bits: vec![false; len] }
    }

    pub fn all_active(len: usize) -> Self {
        ActiveSetLabel { bits: vec![true; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }

    /// Bits as 0.0/1.0 regression targets.
    pub fn as_targets(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl Serialize for ActiveSetLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw: Vec<u8> = self.bits.iter().map(|&b| u8::from(b)).collect();
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ActiveSetLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        let bits = raw
            .into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("label bit {other} is not 0 or 1"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ActiveSetLabel { bits })
    }
}

/// Labels row `j` active iff its slack is at most `eps_primal·(1 + |d_j|)` or
/// its multiplier is at least `eps_dual`. Ties (weakly active rows) are
/// therefore active.
pub fn label_active_set(qp: &SparseQp, sol: &QpSolution, eps_primal: f64, eps_dual: f64) -> Result<ActiveSetLabel> {
    if sol.status != SolveStatus::Solved {
        return Err(Error::Unsolved);
    }
    if sol.mu_ineq.len() != qp.num_ineq() {
        return Err(Error::Dimension("multiplier count".into()));
    }
    let res = constraint_residuals(qp, &sol.y)?;
    let bits = (0..qp.num_ineq())
        .map(|j| {
            let slack = res.ineq_slack[j];
            slack <= eps_primal * (1.0 + qp.ineq_rhs[j].abs()) || sol.mu_ineq[j] >= eps_dual
        })
        .collect();
    Ok(ActiveSetLabel { bits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_serializes_as_zero_one_array() {
        let l = ActiveSetLabel::new(vec![true, false, false, true]);
        assert_eq!(serde_json::to_string(&l).unwrap(), "[1,0,0,1]");
        let back: ActiveSetLabel = serde_json::from_str("[1,0,0,1]").unwrap();
        assert_eq!(back, l);
        assert!(serde_json::from_str::<ActiveSetLabel>("[2]").is_err());
    }

    #[test]
    fn indices_and_counts() {
        let l = ActiveSetLabel::new(vec![false, true, true, false, true]);
        assert_eq!(l.active_indices().collect::<Vec<_>>(), vec![1, 2, 4]);
        assert_eq!(l.count_active(), 3);
        assert_eq!(l.as_targets(), vec![0.0, 1.0, 1.0, 0.0, 1.0]);
    }
}
