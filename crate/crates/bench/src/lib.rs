//! Fixtures shared by the benchmarks.

use mpcx::oracle::{generate_dataset, split_dataset, GenerationConfig};
use mpcx::predictor::{train, TrainConfig};
use mpcx::{Arch, DatasetRecord, Head, PredictorModel, ScenarioId};

/// Labelled records for `scenario`, generated with default settings.
pub fn records(scenario: ScenarioId, count: usize, seed: u64) -> Vec<DatasetRecord> {
    generate_dataset(scenario, count, seed, &GenerationConfig::default())
        .expect("dataset generation")
        .1
}

/// A small constraint model trained for a few epochs; accurate enough to
/// exercise both the verified and the fallback path.
pub fn quick_model(records: Vec<DatasetRecord>, arch: Arch, head: Head, epochs: usize) -> PredictorModel {
    let split = split_dataset(records, 0.8, 1).expect("split");
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    train(&split.train, &split.test, arch, head, &cfg).expect("training").model
}
