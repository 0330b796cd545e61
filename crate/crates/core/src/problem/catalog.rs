use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which block of the horizon a constraint row lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    StateBound,
    InputBound,
    TerminalBound,
}

impl ConstraintKind {
    fn tag(self) -> u8 {
        match self {
            ConstraintKind::StateBound => 0,
            ConstraintKind::InputBound => 1,
            ConstraintKind::TerminalBound => 2,
        }
    }
}

/// One scalar inequality `coeff · v <= bound`, where `v` is the state or
/// input of `stage`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub kind: ConstraintKind,
    pub stage: usize,
    pub coeff: Vec<f64>,
    pub bound: f64,
}

/// Box bounds for states, inputs and the terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub state_lb: Vec<f64>,
    pub state_ub: Vec<f64>,
    pub input_lb: Vec<f64>,
    pub input_ub: Vec<f64>,
    pub terminal_lb: Vec<f64>,
    pub terminal_ub: Vec<f64>,
}

impl Bounds {
    /// Same box on every state (stage and terminal) and on every input.
    pub fn symmetric(state: &[f64], input: &[f64]) -> Self {
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        Bounds {
            state_lb: neg(state),
            state_ub: state.to_vec(),
            input_lb: neg(input),
            input_ub: input.to_vec(),
            terminal_lb: neg(state),
            terminal_ub: state.to_vec(),
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let pairs = [
            ("state", &self.state_lb, &self.state_ub, n),
            ("input", &self.input_lb, &self.input_ub, m),
            ("terminal", &self.terminal_lb, &self.terminal_ub, n),
        ];
        for (name, lb, ub, len) in pairs {
            if lb.len() != len || ub.len() != len {
                return Err(Error::Dimension(format!(
                    "{name} bounds have lengths {}/{}, expected {len}",
                    lb.len(),
                    ub.len()
                )));
            }
            for (i, (l, u)) in lb.iter().zip(ub).enumerate() {
                if !l.is_finite() || !u.is_finite() {
                    return Err(Error::InvalidInstance(format!("{name} bound {i} is not finite")));
                }
                if l >= u {
                    return Err(Error::InfeasibleParams(format!(
                        "{name} bound {i} is empty ({l} >= {u})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordered list of every inequality row of an instance.
///
/// Rows are sorted by kind, then stage, then component; each component
/// contributes its upper row followed by its lower row. Active-set labels
/// index into this order, so it must never change for a given layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintCatalog {
    rows: Vec<ConstraintRow>,
}

impl ConstraintCatalog {
    pub(crate) fn empty() -> Self {
        ConstraintCatalog { rows: Vec::new() }
    }

    pub fn from_bounds(n: usize, m: usize, horizon: usize, bounds: &Bounds) -> Result<Self> {
        bounds.validate(n, m)?;
        let mut rows = Vec::with_capacity(2 * (n * horizon + m * horizon));
        let mut push_box = |kind, stage, lb: &[f64], ub: &[f64]| {
            let dim = lb.len();
            for i in 0..dim {
                let mut up = vec![0.0; dim];
                up[i] = 1.0;
                rows.push(ConstraintRow { kind, stage, coeff: up, bound: ub[i] });
                let mut lo = vec![0.0; dim];
                lo[i] = -1.0;
                rows.push(ConstraintRow { kind, stage, coeff: lo, bound: -lb[i] });
            }
        };
        // x_0 is a parameter, so state rows start at stage 1.
        for stage in 1..horizon {
            push_box(ConstraintKind::StateBound, stage, &bounds.state_lb, &bounds.state_ub);
        }
        for stage in 0..horizon {
            push_box(ConstraintKind::InputBound, stage, &bounds.input_lb, &bounds.input_ub);
        }
        push_box(ConstraintKind::TerminalBound, horizon, &bounds.terminal_lb, &bounds.terminal_ub);
        let catalog = ConstraintCatalog { rows };
        catalog.validate(n, m, horizon)?;
        Ok(catalog)
    }

    /// Builds a catalog from explicit rows, sorting them into canonical order.
    /// The sort is stable, so rows sharing kind and stage keep their order.
    pub fn from_rows(mut rows: Vec<ConstraintRow>, n: usize, m: usize, horizon: usize) -> Result<Self> {
        rows.sort_by_key(|r| (r.kind, r.stage));
        let catalog = ConstraintCatalog { rows };
        catalog.validate(n, m, horizon)?;
        Ok(catalog)
    }

    fn validate(&self, n: usize, m: usize, horizon: usize) -> Result<()> {
        for (j, row) in self.rows.iter().enumerate() {
            let (ok_stage, width) = match row.kind {
                ConstraintKind::StateBound => (row.stage >= 1 && row.stage < horizon, n),
                ConstraintKind::InputBound => (row.stage < horizon, m),
                ConstraintKind::TerminalBound => (row.stage == horizon, n),
            };
            if !ok_stage {
                return Err(Error::InvalidInstance(format!(
                    "row {j} ({:?}) references stage {} outside the horizon {horizon}",
                    row.kind, row.stage
                )));
            }
            if row.coeff.len() != width {
                return Err(Error::Dimension(format!(
                    "row {j} has {} coefficients, expected {width}",
                    row.coeff.len()
                )));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// 64-bit FNV-1a over the row layout (kind, stage and coefficients, not
    /// the bound values), rendered as 16 hex digits.
    pub fn digest(&self) -> String {
        let mut h = Fnv1a::new();
        h.write(&(self.rows.len() as u64).to_le_bytes());
        for row in &self.rows {
            h.write(&[row.kind.tag()]);
            h.write(&(row.stage as u64).to_le_bytes());
            h.write(&(row.coeff.len() as u64).to_le_bytes());
            for c in &row.coeff {
                h.write(&c.to_bits().to_le_bytes());
            }
        }
        format!("{:016x}", h.finish())
    }
}

struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// FNV-1a of an arbitrary byte string, exposed for callers that fingerprint
/// files the same way catalogs are fingerprinted.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a_64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a_64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a_64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn canonical_layout() {
        let b = Bounds::symmetric(&[5.0, 1.0], &[2.0]);
        let cat = ConstraintCatalog::from_bounds(2, 1, 3, &b).unwrap();
        // 2 state stages * 4 + 3 input stages * 2 + terminal 4
        assert_eq!(cat.len(), 8 + 6 + 4);
        let kinds: Vec<_> = cat.rows().iter().map(|r| (r.kind, r.stage)).collect();
        let mut sorted = kinds.clone();
        sorted.sort();
        assert_eq!(kinds, sorted);
        assert_eq!(cat.rows()[0].coeff, vec![1.0, 0.0]);
        assert_eq!(cat.rows()[0].bound, 5.0);
        assert_eq!(cat.rows()[1].coeff, vec![-1.0, 0.0]);
        assert_eq!(cat.rows()[1].bound, 5.0);
    }

    #[test]
    fn digest_ignores_bound_values() {
        let a = ConstraintCatalog::from_bounds(2, 1, 4, &Bounds::symmetric(&[5.0, 1.0], &[2.0])).unwrap();
        let b = ConstraintCatalog::from_bounds(2, 1, 4, &Bounds::symmetric(&[3.0, 9.0], &[1.0])).unwrap();
        let c = ConstraintCatalog::from_bounds(2, 1, 5, &Bounds::symmetric(&[5.0, 1.0], &[2.0])).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 16);
    }

    #[test]
    fn empty_box_is_infeasible() {
        let mut b = Bounds::symmetric(&[5.0, 1.0], &[2.0]);
        b.input_lb[0] = 3.0;
        assert!(matches!(
            ConstraintCatalog::from_bounds(2, 1, 4, &b),
            Err(Error::InfeasibleParams(_))
        ));
    }

    #[test]
    fn input_row_past_horizon_rejected() {
        let rows = vec![ConstraintRow {
            kind: ConstraintKind::InputBound,
            stage: 3,
            coeff: vec![1.0],
            bound: 1.0,
        }];
        assert!(ConstraintCatalog::from_rows(rows, 2, 1, 3).is_err());
    }
}
