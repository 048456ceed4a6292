//! Concurrent tests to several destinations, aggregated over the window in
//! which all of them were running.

use std::collections::BTreeSet;
use std::thread;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{CoordinatorError, Result};
use crate::engine::{Direction, Engine, Flag, RawTestRecord, TestSpec};
use crate::flowmodel::{simulate_paths, FlowParams, PathLoad};
use crate::metrics::{estimate_throughput, EstimationMethod, MetricReport};
use crate::trace::{Sample, ThroughputTrace, TraceSource};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiDestConfig {
    pub max_destinations: usize,
    pub method: EstimationMethod,
}

impl Default for MultiDestConfig {
    fn default() -> Self {
        Self {
            max_destinations: 4,
            method: EstimationMethod::steady_state(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DestinationOutcome {
    pub server_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<RawTestRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDestResult {
    pub per_destination: Vec<DestinationOutcome>,
    pub aggregate_bps: f64,
    /// Start and end of the overlap, in ms after the earliest test start.
    pub overlap_window: (f64, f64),
    pub aggregate_trace: ThroughputTrace,
    pub flags: BTreeSet<Flag>,
}

impl MultiDestResult {
    /// Best per-destination estimate, for comparison with the aggregate.
    pub fn best_single_bps(&self) -> Option<f64> {
        self.per_destination
            .iter()
            .filter_map(|d| d.report.as_ref())
            .filter_map(|r| r.download_bps.or(r.upload_bps))
            .reduce(f64::max)
    }
}

/// Throughput and latency summary of one record under `method`.
pub fn build_report(record: &RawTestRecord, method: &EstimationMethod) -> Result<MetricReport> {
    let bps = estimate_throughput(&record.aggregate_trace, method)?;
    let mut report = MetricReport::new(*method);
    if let Some(latency) = &record.latency {
        report = report.with_latency(latency);
    }
    match record.spec.direction {
        Direction::Download => report.download_bps = Some(bps),
        Direction::Upload => report.upload_bps = Some(bps),
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapAggregate {
    pub window: (f64, f64),
    /// Summed trace, with time measured from the window start.
    pub trace: ThroughputTrace,
    pub bps: f64,
}

/// Sums traces that started `offset_ms` apart over the interval where all
/// of them were running, resampled every `interval_ms`, and estimates the
/// summed rate.
pub fn aggregate_over_overlap(
    traces: &[(f64, &ThroughputTrace)],
    interval_ms: f64,
    method: &EstimationMethod,
) -> Result<OverlapAggregate> {
    if traces.is_empty() {
        return Err(CoordinatorError::InvalidArgument("no traces to aggregate".into()));
    }
    if !(interval_ms > 0.0 && interval_ms.is_finite()) {
        return Err(CoordinatorError::InvalidArgument("interval must be positive".into()));
    }
    let start_of = |(o, t): &(f64, &ThroughputTrace)| o + t.samples.first().map_or(0.0, |s| s.t_ms());
    let end_of = |(o, t): &(f64, &ThroughputTrace)| o + t.samples.last().map_or(0.0, |s| s.t_ms());
    let start = traces.iter().map(start_of).fold(f64::NEG_INFINITY, f64::max);
    let end = traces.iter().map(end_of).fold(f64::INFINITY, f64::min);
    if !(end > start) {
        return Err(CoordinatorError::InvalidArgument(format!(
            "tests never ran simultaneously (overlap {start}..{end} ms)"
        )));
    }
    let mut times = Vec::new();
    let mut k = 0u32;
    loop {
        let t = start + f64::from(k) * interval_ms;
        if t >= end - 1e-9 {
            break;
        }
        times.push(t);
        k += 1;
    }
    times.push(end);
    let bytes_at = |t: f64| -> f64 {
        traces
            .iter()
            .map(|(o, tr)| {
                let base = tr.bytes_at(start - o).unwrap_or(0.0);
                tr.bytes_at(t - o).unwrap_or(base) - base
            })
            .sum()
    };
    let samples: Vec<Sample> = times.iter().map(|&t| Sample(t - start, bytes_at(t).max(0.0))).collect();
    // Interpolation can wobble by an ulp; keep the sum non-decreasing.
    let samples = samples
        .into_iter()
        .scan(0.0f64, |hi, s| {
            *hi = hi.max(s.bytes());
            Some(Sample(s.t_ms(), *hi))
        })
        .collect();
    let trace = ThroughputTrace::new(interval_ms, TraceSource::Measured, None, samples)
        .map_err(|e| CoordinatorError::InvalidArgument(e.to_string()))?;
    let bps = estimate_throughput(&trace, method)?;
    Ok(OverlapAggregate {
        window: (start, end),
        trace,
        bps,
    })
}

fn check_count(n: usize, config: &MultiDestConfig) -> Result<()> {
    if n < 2 || n > config.max_destinations {
        return Err(CoordinatorError::InvalidArgument(format!(
            "multi-destination runs take 2 to {} destinations, got {n}",
            config.max_destinations
        )));
    }
    Ok(())
}

/// Combines finished per-destination records into one result. Runs with at
/// least one success proceed, flagged partial when anything failed.
fn assemble(
    outcomes: Vec<(String, std::result::Result<RawTestRecord, String>)>,
    config: &MultiDestConfig,
) -> Result<MultiDestResult> {
    let mut per_destination = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (server_id, outcome) in outcomes {
        match outcome {
            Ok(record) => {
                let report = build_report(&record, &config.method)?;
                per_destination.push(DestinationOutcome {
                    server_id,
                    report: Some(report),
                    record: Some(record),
                    error: None,
                });
            }
            Err(e) => {
                failures.push((server_id.clone(), e.clone()));
                per_destination.push(DestinationOutcome {
                    server_id,
                    report: None,
                    record: None,
                    error: Some(e),
                });
            }
        }
    }
    let records: Vec<&RawTestRecord> = per_destination.iter().filter_map(|d| d.record.as_ref()).collect();
    if records.is_empty() {
        return Err(CoordinatorError::MultiDestFailed(failures));
    }
    let t0: DateTime<Utc> = records.iter().map(|r| r.started_at).min().expect("non-empty");
    let offset = |r: &RawTestRecord| (r.started_at - t0).num_microseconds().unwrap_or(0) as f64 / 1e3;
    let traces: Vec<(f64, &ThroughputTrace)> = records.iter().map(|r| (offset(r), &r.aggregate_trace)).collect();
    let interval = records.iter().map(|r| r.aggregate_trace.sample_interval_ms).fold(f64::INFINITY, f64::min);
    let agg = aggregate_over_overlap(&traces, interval, &config.method)?;

    let mut flags = BTreeSet::new();
    if !failures.is_empty() {
        flags.insert(Flag::Partial);
    }
    for r in &records {
        flags.extend(r.flags.iter().copied());
    }
    Ok(MultiDestResult {
        per_destination,
        aggregate_bps: agg.bps,
        overlap_window: agg.window,
        aggregate_trace: agg.trace,
        flags,
    })
}

/// Runs every spec concurrently, one engine per destination.
pub fn run_multi_destination(specs: &[TestSpec], engine: &Engine, config: &MultiDestConfig) -> Result<MultiDestResult> {
    check_count(specs.len(), config)?;
    let outcomes = thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| {
                let mut e = engine.sibling();
                scope.spawn(move || e.run_test(spec).map_err(|err| err.to_string()))
            })
            .collect();
        specs
            .iter()
            .zip(handles)
            .map(|(spec, h)| {
                let r = h.join().unwrap_or_else(|_| Err("test thread panicked".into()));
                (spec.target.server_id.clone(), r)
            })
            .collect::<Vec<_>>()
    });
    assemble(outcomes, config)
}

/// Model of a multi-destination run: each destination path has its own
/// bottleneck and all share one access link.
pub fn simulate_multi_destination(
    specs: &[TestSpec],
    paths: &[PathLoad],
    access_capacity_bps: Option<f64>,
    params: FlowParams,
    config: &MultiDestConfig,
) -> Result<MultiDestResult> {
    check_count(specs.len(), config)?;
    if specs.len() != paths.len() {
        return Err(CoordinatorError::InvalidArgument("one path per spec required".into()));
    }
    let duration_s = specs[0].duration_ms as f64 / 1000.0;
    let interval = specs[0].sample_interval_ms as f64;
    if specs.iter().any(|s| s.duration_ms != specs[0].duration_ms || s.sample_interval_ms != specs[0].sample_interval_ms) {
        return Err(CoordinatorError::InvalidArgument("simulated destinations must share duration and sampling".into()));
    }
    let started_at = Utc::now();
    let sims = simulate_paths(paths, access_capacity_bps, duration_s, interval, params)?;
    let outcomes = specs
        .iter()
        .zip(sims)
        .map(|(spec, sim)| {
            let record = RawTestRecord::simulated(spec.clone(), started_at, sim.per_connection, sim.aggregate);
            (spec.target.server_id.clone(), Ok(record))
        })
        .collect();
    assemble(outcomes, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rate_bytes_per_ms: f64, duration_ms: f64) -> ThroughputTrace {
        let samples = (0..=(duration_ms / 100.0) as u32)
            .map(|k| Sample(100.0 * f64::from(k), rate_bytes_per_ms * 100.0 * f64::from(k)))
            .collect();
        ThroughputTrace::new(100.0, TraceSource::Measured, None, samples).unwrap()
    }

    #[test]
    fn overlap_excludes_start_skew() {
        let a = ramp(1000.0, 5000.0);
        let b = ramp(2000.0, 5000.0);
        let agg = aggregate_over_overlap(&[(0.0, &a), (1000.0, &b)], 100.0, &EstimationMethod::FullAverage).unwrap();
        assert_eq!(agg.window, (1000.0, 5000.0));
        assert!((agg.bps - 3000.0 * 8000.0).abs() < 1e-6);
        assert_eq!(agg.trace.duration_ms(), 4000.0);
    }

    #[test]
    fn disjoint_tests_have_no_overlap() {
        let a = ramp(1000.0, 1000.0);
        assert!(aggregate_over_overlap(&[(0.0, &a), (2000.0, &a)], 100.0, &EstimationMethod::FullAverage).is_err());
    }

    #[test]
    fn all_failures_fail_the_run() {
        let outcomes = vec![("a".to_string(), Err("refused".to_string())), ("b".to_string(), Err("refused".to_string()))];
        assert!(matches!(
            assemble(outcomes, &MultiDestConfig::default()),
            Err(CoordinatorError::MultiDestFailed(r)) if r.len() == 2
        ));
    }
}
