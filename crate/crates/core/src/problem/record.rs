use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Bounds, LinearSystem, MpcInstance, ScenarioId};
use crate::error::{Error, Result};

/// Wire form of an [`MpcInstance`]. Matrices are flat row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub x_ref: Vec<Vec<f64>>,
    pub bounds: Bounds,
    pub a_dyn: Vec<f64>,
    pub b_dyn: Vec<f64>,
    pub q_stage: Vec<f64>,
    pub r_stage: Vec<f64>,
    pub q_term: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(data: &[f64], rows: usize, cols: usize, name: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{name} has {} entries, expected {rows}x{cols}",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl From<&MpcInstance> for InstanceRecord {
    fn from(inst: &MpcInstance) -> Self {
        InstanceRecord {
            scenario: inst.scenario,
            seed: inst.seed,
            n: inst.n(),
            m: inst.m(),
            horizon: inst.horizon,
            x0: inst.x0.as_slice().to_vec(),
            x_ref: inst.x_ref.iter().map(|r| r.as_slice().to_vec()).collect(),
            bounds: inst.bounds.clone(),
            a_dyn: row_major(&inst.system.a),
            b_dyn: row_major(&inst.system.b),
            q_stage: row_major(&inst.q_stage),
            r_stage: row_major(&inst.r_stage),
            q_term: row_major(&inst.q_term),
        }
    }
}

impl TryFrom<InstanceRecord> for MpcInstance {
    type Error = Error;

    fn try_from(rec: InstanceRecord) -> Result<Self> {
        let (n, m) = (rec.n, rec.m);
        let system = LinearSystem::new(
            from_row_major(&rec.a_dyn, n, n, "a_dyn")?,
            from_row_major(&rec.b_dyn, n, m, "b_dyn")?,
        )?;
        MpcInstance::new(
            rec.scenario,
            rec.seed,
            system,
            rec.horizon,
            from_row_major(&rec.q_stage, n, n, "q_stage")?,
            from_row_major(&rec.r_stage, m, m, "r_stage")?,
            from_row_major(&rec.q_term, n, n, "q_term")?,
            DVector::from_vec(rec.x0),
            rec.x_ref.into_iter().map(DVector::from_vec).collect(),
            rec.bounds,
        )
    }
}

impl Serialize for MpcInstance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        InstanceRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for MpcInstance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = InstanceRecord::deserialize(d)?;
        MpcInstance::try_from(rec).map_err(serde::de::Error::custom)
    }
}
