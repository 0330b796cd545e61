use std::io::{BufRead, Write};

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{label_active_set, ActiveSetLabel, DEFAULT_EPS_DUAL, DEFAULT_EPS_PRIMAL};
use crate::error::{Error, Result};
use crate::problem::{assemble_sparse_qp, build_mpc_instance, reduce_qp, MpcInstance, ScenarioId, ScenarioParams};
use crate::qpsolve::{solve_full, solve_kkt_equality, SolveStatus, SolverConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Attempts per record before generation gives up on that index.
const MAX_ATTEMPTS_PER_RECORD: usize = 50;
/// Generation aborts once more than this fraction of solves has failed.
const MAX_FAILURE_RATE: f64 = 0.2;
/// Tolerance of the reduced-solve label check.
const SOUNDNESS_TOL: f64 = 1e-6;

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub scenario: ScenarioId,
    pub seed: u64,
    pub count: usize,
    pub catalog_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveMeta {
    pub iterations: usize,
    /// Omitted unless timings were requested, which keeps files reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub instance: MpcInstance,
    pub label: ActiveSetLabel,
    /// Optimal stacked input sequence `u_0..u_{N-1}`.
    pub u_star: Vec<f64>,
    pub solve_meta: SolveMeta,
}

impl DatasetRecord {
    pub fn u_star_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u_star)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub solver: SolverConfig,
    pub params: ScenarioParams,
    pub eps_primal: f64,
    pub eps_dual: f64,
    /// Fraction of records whose label is re-checked by a reduced solve.
    pub check_fraction: f64,
    /// Worker count; records are emitted in index order regardless.
    pub threads: usize,
    /// Store wall-clock solve times in the records (breaks byte-identity).
    pub record_timings: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            solver: SolverConfig::default(),
            params: ScenarioParams::default(),
            eps_primal: DEFAULT_EPS_PRIMAL,
            eps_dual: DEFAULT_EPS_DUAL,
            check_fraction: 1.0,
            threads: 1,
            record_timings: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub records: usize,
    pub attempts: usize,
    /// Instances discarded and regenerated: failed solves plus failed checks.
    pub skipped_instances: usize,
    pub failed_solves: usize,
    pub failed_checks: usize,
    pub checked_records: usize,
    /// Mean over records of the fraction of rows labeled inactive.
    pub mean_inactive_fraction: f64,
    pub mean_solve_time: f64,
    pub mean_iterations: f64,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of attempt `attempt` for record `index`; depends on nothing else, so
/// records can be produced in any order.
pub fn derive_seed(base: u64, index: usize, attempt: usize) -> u64 {
    mix(mix(base ^ mix(index as u64)) ^ (attempt as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

struct Produced {
    record: DatasetRecord,
    attempts: usize,
    failed_solves: usize,
    failed_checks: usize,
    checked: bool,
    solve_time: f64,
}

fn produce_record(scenario: ScenarioId, seed: u64, index: usize, cfg: &GenerationConfig) -> Result<Produced> {
    let check = mix(seed ^ mix(index as u64 ^ 0x5eed)) as f64 / u64::MAX as f64 <= cfg.check_fraction;
    let (mut failed_solves, mut failed_checks) = (0, 0);
    for attempt in 0..MAX_ATTEMPTS_PER_RECORD {
        let inst_seed = derive_seed(seed, index, attempt);
        let instance = build_mpc_instance(scenario, &cfg.params, inst_seed)?;
        let qp = assemble_sparse_qp(&instance)?;
        let sol = solve_full(&qp, None, &cfg.solver)?;
        if sol.status != SolveStatus::Solved {
            failed_solves += 1;
            continue;
        }
        let label = label_active_set(&qp, &sol, cfg.eps_primal, cfg.eps_dual)?;
        let u_star = qp.inputs_of(&sol.y);
        if check {
            let reduced = reduce_qp(&qp, &label)?;
            let sound = match solve_kkt_equality(
                reduced.cost_matrix,
                reduced.cost_vector,
                &reduced.constraint_matrix,
                &reduced.constraint_rhs,
            ) {
                Ok(kkt) => (qp.inputs_of(&kkt.y) - &u_star).amax() <= SOUNDNESS_TOL,
                Err(_) => false,
            };
            if !sound {
                failed_checks += 1;
                continue;
            }
        }
        return Ok(Produced {
            record: DatasetRecord {
                instance,
                label,
                u_star: u_star.as_slice().to_vec(),
                solve_meta: SolveMeta {
                    iterations: sol.iterations,
                    solve_time: cfg.record_timings.then_some(sol.solve_time),
                },
            },
            attempts: attempt + 1,
            failed_solves,
            failed_checks,
            checked: check,
            solve_time: sol.solve_time,
        });
    }
    Err(Error::GenerationAborted {
        failed: failed_solves + failed_checks,
        attempts: MAX_ATTEMPTS_PER_RECORD,
    })
}

fn produce_chunk(
    scenario: ScenarioId,
    seed: u64,
    range: std::ops::Range<usize>,
    cfg: &GenerationConfig,
) -> Vec<Result<Produced>> {
    let threads = cfg.threads.max(1).min(range.len().max(1));
    if threads == 1 {
        return range.map(|i| produce_record(scenario, seed, i, cfg)).collect();
    }
    let indices: Vec<usize> = range.collect();
    let per = indices.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(per)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&i| produce_record(scenario, seed, i, cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generation worker panicked"))
            .collect()
    })
}

/// Header describing a dataset of `count` records for `scenario`.
pub fn dataset_header(scenario: ScenarioId, count: usize, seed: u64, cfg: &GenerationConfig) -> Result<DatasetHeader> {
    let probe = build_mpc_instance(scenario, &cfg.params, derive_seed(seed, 0, 0))?;
    Ok(DatasetHeader {
        format_version: FORMAT_VERSION,
        scenario,
        seed,
        count,
        catalog_digest: probe.catalog().digest(),
    })
}

/// Generates `count` labeled records and hands them to `sink` in index order.
///
/// Each record index draws instances from [`derive_seed`] until one solves
/// (and, if sampled, passes the reduced-solve label check). Generation aborts
/// when more than 20% of all attempts fail.
pub fn generate_records<F>(
    scenario: ScenarioId,
    count: usize,
    seed: u64,
    cfg: &GenerationConfig,
    mut sink: F,
) -> Result<GenerationStats>
where
    F: FnMut(DatasetRecord) -> Result<()>,
{
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be at least 1".into()));
    }
    cfg.solver.validate()?;
    let chunk = 64 * cfg.threads.max(1);
    let mut stats = GenerationStats::default();
    let (mut inactive_sum, mut time_sum, mut iter_sum) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < count {
        let end = (start + chunk).min(count);
        for produced in produce_chunk(scenario, seed, start..end, cfg) {
            let p = match produced {
                Ok(p) => p,
                Err(Error::GenerationAborted { failed, attempts }) => {
                    return Err(Error::GenerationAborted {
                        failed: stats.failed_solves + stats.failed_checks + failed,
                        attempts: stats.attempts + attempts,
                    })
                }
                Err(e) => return Err(e),
            };
            stats.records += 1;
            stats.attempts += p.attempts;
            stats.failed_solves += p.failed_solves;
            stats.failed_checks += p.failed_checks;
            stats.skipped_instances += p.failed_solves + p.failed_checks;
            stats.checked_records += usize::from(p.checked);
            let label = &p.record.label;
            inactive_sum += (label.len() - label.count_active()) as f64 / label.len().max(1) as f64;
            time_sum += p.solve_time;
            iter_sum += p.record.solve_meta.iterations as f64;
            sink(p.record)?;
        }
        let failed = stats.failed_solves + stats.failed_checks;
        if failed as f64 > MAX_FAILURE_RATE * stats.attempts as f64 && stats.attempts >= 10 {
            return Err(Error::GenerationAborted { failed, attempts: stats.attempts });
        }
        start = end;
    }
    let k = stats.records as f64;
    stats.mean_inactive_fraction = inactive_sum / k;
    stats.mean_solve_time = time_sum / k;
    stats.mean_iterations = iter_sum / k;
    Ok(stats)
}

/// In-memory variant of [`generate_records`].
pub fn generate_dataset(
    scenario: ScenarioId,
    count: usize,
    seed: u64,
    cfg: &GenerationConfig,
) -> Result<(DatasetHeader, Vec<DatasetRecord>, GenerationStats)> {
    let header = dataset_header(scenario, count, seed, cfg)?;
    let mut records = Vec::with_capacity(count);
    let stats = generate_records(scenario, count, seed, cfg, |r| {
        records.push(r);
        Ok(())
    })?;
    Ok((header, records, stats))
}

/// Writes a header line followed by one record per line.
pub fn write_dataset<W: Write>(mut out: W, header: &DatasetHeader, records: &[DatasetRecord]) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset file, checking the format version, the record count and
/// that every record's catalog matches the header digest.
pub fn read_dataset<R: BufRead>(input: R) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported dataset format version {}",
            header.format_version
        )));
    }
    let mut records = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        let digest = rec.instance.catalog().digest();
        if digest != header.catalog_digest {
            return Err(Error::DigestMismatch { expected: header.catalog_digest.clone(), found: digest });
        }
        if rec.label.len() != rec.instance.catalog().len() {
            return Err(Error::Dimension("label length differs from catalog".into()));
        }
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(Error::InvalidArgument(format!(
            "header announces {} records, file has {}",
            header.count,
            records.len()
        )));
    }
    Ok((header, records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then `floor(train_fraction · len)` items to train and the
/// rest to test.
pub fn split_dataset<T>(records: Vec<T>, train_fraction: f64, seed: u64) -> Result<Split<T>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let total = records.len();
    let n_train = (train_fraction * total as f64).floor() as usize;
    if n_train == 0 || n_train == total {
        return Err(Error::InvalidArgument(format!(
            "split of {total} records at {train_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = records.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("index used once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let test = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok(Split { train, test })
}
