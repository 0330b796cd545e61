//! Timing study and offline verification over sets of labelled instances.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{ActiveSetLabel, DatasetRecord};
use crate::pipeline::{
    aggregate_timings, pipeline_average, solve_assembled, verify_solution, LabelSource, PipelineConfig,
    PipelineResult, ReducedOutcome, Timings,
};
use crate::predictor::{evaluate_predictions, PredictorModel};
use crate::problem::{assemble_sparse_qp, ScenarioId, SparseQp};
use crate::qpsolve::{solve_full, SolveStatus};

pub const DEFAULT_INSTANCES: usize = 500;
/// Fewer instances than this give meaningless averages.
pub const MIN_INSTANCES: usize = 30;
pub const DEFAULT_REPEATS: usize = 3;

/// Labels for one benchmark row.
#[derive(Debug, Clone, Copy)]
pub enum CandidateSource<'a> {
    Model(&'a PredictorModel),
    /// The stored oracle label of each record.
    Oracle,
    AllInactive,
    AllActive,
}

#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub name: String,
    pub source: CandidateSource<'a>,
    pub warm_model: Option<&'a PredictorModel>,
}

impl<'a> Candidate<'a> {
    pub fn new(name: impl Into<String>, source: CandidateSource<'a>) -> Self {
        Candidate { name: name.into(), source, warm_model: None }
    }

    pub fn with_warm_start(mut self, model: &'a PredictorModel) -> Self {
        self.warm_model = Some(model);
        self
    }

    fn label_source(&self, record: &DatasetRecord) -> LabelSource<'a> {
        match self.source {
            CandidateSource::Model(m) => LabelSource::Model(m),
            CandidateSource::Oracle => LabelSource::Fixed(record.label.clone()),
            CandidateSource::AllInactive => LabelSource::AllInactive,
            CandidateSource::AllActive => LabelSource::AllActive,
        }
    }

    fn check(&self, scenario: ScenarioId, digest: &str) -> Result<()> {
        let models = [
            match self.source {
                CandidateSource::Model(m) => Some(m),
                _ => None,
            },
            self.warm_model,
        ];
        for m in models.into_iter().flatten() {
            if m.scenario != scenario {
                return Err(Error::InvalidArgument(format!(
                    "model for {} used on {} instances",
                    m.scenario.as_str(),
                    scenario.as_str()
                )));
            }
            m.check_digest(digest)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub repeats: usize,
    pub pipeline: PipelineConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { repeats: DEFAULT_REPEATS, pipeline: PipelineConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    /// Smallest nonzero step observed on the monotonic clock, in seconds.
    pub clock_resolution: f64,
    pub build_profile: String,
    pub threads: usize,
    pub os: String,
    pub arch: String,
}

impl Environment {
    pub fn detect() -> Self {
        Environment {
            clock_resolution: clock_resolution(),
            build_profile: if cfg!(debug_assertions) { "debug" } else { "release" }.to_string(),
            threads: 1,
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
        }
    }
}

fn clock_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..200 {
        let t = Instant::now();
        let mut e = t.elapsed();
        while e.is_zero() {
            e = t.elapsed();
        }
        best = best.min(e.as_secs_f64());
    }
    best
}

/// Per-instance measurements behind one report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub record: usize,
    pub fell_back: bool,
    pub timings: Timings,
    pub baseline_time: f64,
    pub baseline_iterations: usize,
    pub fallback_iterations: Option<usize>,
    /// The emitted solution, kept so it can be re-verified.
    pub final_y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config_name: String,
    pub instances: usize,
    pub fallbacks: usize,
    pub alpha: f64,
    pub t_rmpc: f64,
    pub t_mpc: f64,
    pub t_predict: f64,
    pub baseline_avg_time: f64,
    pub pipeline_avg_time: f64,
    pub speedup: f64,
    pub exact_set_accuracy: f64,
    pub mean_inactive_removed_fraction: f64,
    pub false_inactive_rate: f64,
    /// Mean fallback iterations over mean cold iterations on the same
    /// instances; absent without fallbacks.
    pub warm_start_iteration_ratio: Option<f64>,
    pub worst_final_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: ScenarioId,
    pub instances: usize,
    pub repeats: usize,
    pub mean_assembly_time: f64,
    pub rows: Vec<BenchRow>,
    pub samples: Vec<Vec<Sample>>,
    pub environment: Environment,
}

fn timed_baseline(qp: &SparseQp, cfg: &PipelineConfig) -> Result<(f64, usize)> {
    let t = Instant::now();
    let sol = solve_full(qp, None, &cfg.solver)?;
    let elapsed = t.elapsed().as_secs_f64();
    if sol.status != SolveStatus::Solved {
        return Err(Error::MaxIterations(sol.iterations));
    }
    Ok((elapsed, sol.iterations))
}

fn measured_cost(t: &Timings) -> f64 {
    t.t_rmpc() + t.t_fallback
}

/// Times the full solve and every candidate on each record, sequentially on
/// the calling thread. One untimed pass over the first record precedes the
/// measurements; each timing is the best of `cfg.repeats` runs.
pub fn run_benchmark(records: &[DatasetRecord], candidates: &[Candidate<'_>], cfg: &BenchConfig) -> Result<BenchReport> {
    if records.len() < MIN_INSTANCES {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs at least {MIN_INSTANCES} instances, got {}",
            records.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no benchmark candidates".into()));
    }
    if cfg.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let scenario = records[0].instance.scenario;
    let digest = records[0].instance.catalog().digest();
    for r in records {
        if r.instance.scenario != scenario || r.instance.catalog().digest() != digest {
            return Err(Error::InvalidArgument("benchmark records mix scenarios or catalogs".into()));
        }
    }
    for c in candidates {
        c.check(scenario, &digest)?;
    }

    let mut assembly = 0.0;
    let mut qps = Vec::with_capacity(records.len());
    for r in records {
        let t = Instant::now();
        let qp = assemble_sparse_qp(&r.instance)?;
        assembly += t.elapsed().as_secs_f64();
        qps.push(qp);
    }

    timed_baseline(&qps[0], &cfg.pipeline)?;
    for c in candidates {
        solve_assembled(&records[0].instance, &qps[0], &c.label_source(&records[0]), c.warm_model, &cfg.pipeline)?;
    }

    let mut baseline = Vec::with_capacity(records.len());
    for qp in &qps {
        let mut best = f64::INFINITY;
        let mut iterations = 0;
        for _ in 0..cfg.repeats {
            let (t, it) = timed_baseline(qp, &cfg.pipeline)?;
            best = best.min(t);
            iterations = it;
        }
        baseline.push((best, iterations));
    }

    let mut rows = Vec::with_capacity(candidates.len());
    let mut samples = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut row_samples = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for (i, (r, qp)) in records.iter().zip(&qps).enumerate() {
            let source = c.label_source(r);
            let mut best: Option<PipelineResult> = None;
            for _ in 0..cfg.repeats {
                let res = solve_assembled(&r.instance, qp, &source, c.warm_model, &cfg.pipeline)?;
                if best.as_ref().is_none_or(|b| measured_cost(&res.timings) < measured_cost(&b.timings)) {
                    best = Some(res);
                }
            }
            let res = best.expect("repeats is positive");
            labels.push(res.predicted_label.clone());
            row_samples.push(Sample {
                record: i,
                fell_back: res.fell_back,
                timings: res.timings,
                baseline_time: baseline[i].0,
                baseline_iterations: baseline[i].1,
                fallback_iterations: res.fallback_iterations,
                final_y: res.final_y.as_slice().to_vec(),
            });
        }
        rows.push(summarize(&c.name, &row_samples, &labels, records, &qps, cfg.pipeline.verify_tol)?);
        samples.push(row_samples);
    }

    Ok(BenchReport {
        scenario,
        instances: records.len(),
        repeats: cfg.repeats,
        mean_assembly_time: assembly / records.len() as f64,
        rows,
        samples,
        environment: Environment::detect(),
    })
}

fn summarize(
    name: &str,
    samples: &[Sample],
    labels: &[ActiveSetLabel],
    records: &[DatasetRecord],
    qps: &[SparseQp],
    tol: f64,
) -> Result<BenchRow> {
    let pairs: Vec<(bool, Timings)> = samples.iter().map(|s| (s.fell_back, s.timings)).collect();
    let baseline: Vec<f64> = samples.iter().map(|s| s.baseline_time).collect();
    let timing = aggregate_timings(&pairs, &baseline)?;
    let truths: Vec<&ActiveSetLabel> = records.iter().map(|r| &r.label).collect();
    let metrics = evaluate_predictions(labels, &truths)?;
    let (warm, cold) = samples
        .iter()
        .filter_map(|s| s.fallback_iterations.map(|w| (w as f64, s.baseline_iterations as f64)))
        .fold((0.0, 0.0), |(a, b), (w, c)| (a + w, b + c));
    let mut worst = 0.0f64;
    for (s, qp) in samples.iter().zip(qps) {
        let check = verify_solution(qp, &DVector::from_column_slice(&s.final_y), tol)?;
        worst = worst.max(check.worst_violation);
    }
    Ok(BenchRow {
        config_name: name.to_string(),
        instances: timing.instances,
        fallbacks: timing.fallbacks,
        alpha: timing.alpha,
        t_rmpc: timing.t_rmpc,
        t_mpc: timing.t_mpc,
        t_predict: timing.t_predict,
        baseline_avg_time: timing.baseline_avg,
        pipeline_avg_time: timing.pipeline_avg,
        speedup: timing.speedup,
        exact_set_accuracy: metrics.exact_set_accuracy,
        mean_inactive_removed_fraction: metrics.mean_inactive_removed_fraction,
        false_inactive_rate: metrics.false_inactive_rate,
        warm_start_iteration_ratio: (cold > 0.0).then(|| warm / cold),
        worst_final_violation: worst,
    })
}

impl BenchReport {
    /// Recomputes each row's average from the stored samples.
    pub fn recomputed_pipeline_avg(&self, row: usize) -> f64 {
        let s = &self.samples[row];
        let k = s.len() as f64;
        let fallbacks: Vec<&Sample> = s.iter().filter(|x| x.fell_back).collect();
        let alpha = (s.len() - fallbacks.len()) as f64 / k;
        let t_rmpc = s.iter().map(|x| x.timings.t_rmpc()).sum::<f64>() / k;
        let t_mpc = if fallbacks.is_empty() {
            0.0
        } else {
            fallbacks.iter().map(|x| x.timings.t_fallback).sum::<f64>() / fallbacks.len() as f64
        };
        pipeline_average(alpha, t_rmpc, t_mpc)
    }

    /// Re-verifies every stored output against freshly assembled problems.
    /// Returns the worst violation seen.
    pub fn reverify(&self, records: &[DatasetRecord], tol: f64) -> Result<f64> {
        let mut worst = 0.0f64;
        for row in &self.samples {
            for s in row {
                let record = records
                    .get(s.record)
                    .ok_or_else(|| Error::InvalidArgument(format!("sample refers to missing record {}", s.record)))?;
                let qp = assemble_sparse_qp(&record.instance)?;
                let check = verify_solution(&qp, &DVector::from_column_slice(&s.final_y), tol)?;
                worst = worst.max(check.worst_violation);
            }
        }
        Ok(worst)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// One line per row, same fields and values as [`BenchRow`] in JSON.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub records: usize,
    pub fallbacks: usize,
    pub alpha: f64,
    pub exact_set_accuracy: f64,
    pub false_inactive_rate: f64,
    pub mean_inactive_removed_fraction: f64,
    /// Worst violation of a reduced solution that was rejected.
    pub worst_rejected_violation: f64,
    pub rank_deficient: usize,
    pub all_verified: bool,
    pub worst_final_violation: f64,
}

/// Runs the pipeline on every record, spread over `threads` workers. Results
/// are combined in record order, so the report does not depend on `threads`.
pub fn offline_verify(
    records: &[DatasetRecord],
    candidate: &Candidate<'_>,
    cfg: &PipelineConfig,
    threads: usize,
) -> Result<VerifyReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to verify".into()));
    }
    let scenario = records[0].instance.scenario;
    for r in records {
        if r.instance.scenario != scenario {
            return Err(Error::InvalidArgument("verification records mix scenarios".into()));
        }
        candidate.check(scenario, &r.instance.catalog().digest())?;
    }
    let run = |r: &DatasetRecord| -> Result<PipelineResult> {
        let res = crate::pipeline::solve_with_prediction(&r.instance, &candidate.label_source(r), candidate.warm_model, cfg)?;
        Ok(res)
    };
    let threads = threads.clamp(1, records.len());
    let results: Vec<Result<PipelineResult>> = if threads == 1 {
        records.iter().map(run).collect()
    } else {
        let per = records.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = records
                .chunks(per)
                .map(|chunk| scope.spawn(move || chunk.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("verification worker panicked")).collect()
        })
    };
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let labels: Vec<ActiveSetLabel> = results.iter().map(|r| r.predicted_label.clone()).collect();
    let truths: Vec<&ActiveSetLabel> = records.iter().map(|r| &r.label).collect();
    let metrics = evaluate_predictions(&labels, &truths)?;
    let fallbacks = results.iter().filter(|r| r.fell_back).count();
    let worst_rejected = results
        .iter()
        .filter(|r| r.fell_back)
        .filter_map(|r| r.reduced_check.as_ref().map(|c| c.worst_violation))
        .fold(0.0f64, f64::max);
    let worst_final = results.iter().map(|r| r.final_check.worst_violation).fold(0.0f64, f64::max);
    Ok(VerifyReport {
        records: records.len(),
        fallbacks,
        alpha: (records.len() - fallbacks) as f64 / records.len() as f64,
        exact_set_accuracy: metrics.exact_set_accuracy,
        false_inactive_rate: metrics.false_inactive_rate,
        mean_inactive_removed_fraction: metrics.mean_inactive_removed_fraction,
        worst_rejected_violation: worst_rejected,
        rank_deficient: results.iter().filter(|r| r.reduced_outcome == ReducedOutcome::RankDeficient).count(),
        all_verified: results.iter().all(|r| r.final_check.ok),
        worst_final_violation: worst_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_resolution_is_positive() {
        let r = clock_resolution();
        assert!(r > 0.0 && r < 1e-2);
    }
}
