//! Aggregate statistics over stored results.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use speedlab_core::engine::{Direction, Flag};
use speedlab_core::metrics::EstimationMethod;

use crate::record::{MeasurementResult, Origin};

/// Flags that keep a result out of throughput summaries, in the order used
/// to attribute a result carrying several of them.
pub const EXCLUDING_FLAGS: [Flag; 2] = [Flag::CrossTrafficDetected, Flag::DegenerateTrace];

#[derive(Debug, Clone, Default)]
pub struct Filters {
    pub origin: Option<Origin>,
    pub server_id: Option<String>,
    pub direction: Option<Direction>,
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
}

impl Filters {
    pub fn matches(&self, r: &MeasurementResult) -> bool {
        self.origin.is_none_or(|o| r.origin == o)
            && self.server_id.as_ref().is_none_or(|id| &r.server.id == id)
            && self.direction.is_none_or(|d| r.spec.direction == d)
            && self.since.is_none_or(|t| r.timestamp >= t)
            && self.until.is_none_or(|t| r.timestamp < t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub p5: f64,
    pub p95: f64,
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        // Mean as offset from the first value: exact for constant input.
        let base = sorted[0];
        let mean = base + sorted.iter().map(|v| v - base).sum::<f64>() / sorted.len() as f64;
        Some(Self {
            count: sorted.len(),
            median: percentile(&sorted, 50.0),
            mean,
            p5: percentile(&sorted, 5.0),
            p95: percentile(&sorted, 95.0),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub download_bps: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upload_bps: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter_ms: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_rate: Option<Summary>,
}

/// What the numbers in a block mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDisclosure {
    pub method: EstimationMethod,
    pub excluded_flags: Vec<Flag>,
    pub connection_counts: Vec<u16>,
    pub durations_ms: Vec<u64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBlock {
    pub origin: Origin,
    pub population: usize,
    pub included: usize,
    pub excluded: usize,
    /// Excluded results by the first excluding flag they carry.
    pub exclusions: BTreeMap<Flag, usize>,
    pub metrics: MetricSummaries,
    pub disclosure: MethodDisclosure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub population: usize,
    pub blocks: Vec<ReportBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

fn exclusion(r: &MeasurementResult) -> Option<Flag> {
    EXCLUDING_FLAGS.into_iter().find(|f| r.flags.contains(f))
}

fn block(origin: Origin, method: EstimationMethod, results: &[&MeasurementResult]) -> ReportBlock {
    let mut exclusions = BTreeMap::new();
    let mut included = Vec::new();
    for r in results {
        match exclusion(r) {
            Some(f) => *exclusions.entry(f).or_insert(0) += 1,
            None => included.push(*r),
        }
    }
    let collect = |f: &dyn Fn(&MeasurementResult) -> Option<f64>, pool: &[&MeasurementResult]| {
        Summary::of(&pool.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
    };
    let metrics = MetricSummaries {
        download_bps: collect(&|r| r.report.download_bps, &included),
        upload_bps: collect(&|r| r.report.upload_bps, &included),
        latency_ms: collect(&|r| r.report.latency_ms, results),
        jitter_ms: collect(&|r| r.report.jitter_ms, results),
        loss_rate: collect(&|r| r.report.loss_rate, results),
    };
    let mut connection_counts: Vec<u16> = results.iter().map(|r| r.spec.n_connections).collect();
    connection_counts.sort_unstable();
    connection_counts.dedup();
    let mut durations_ms: Vec<u64> = results.iter().map(|r| r.spec.duration_ms).collect();
    durations_ms.sort_unstable();
    durations_ms.dedup();
    let excluded = results.len() - included.len();
    ReportBlock {
        origin,
        population: results.len(),
        included: included.len(),
        excluded,
        exclusions,
        metrics,
        disclosure: MethodDisclosure {
            method,
            excluded_flags: EXCLUDING_FLAGS.to_vec(),
            connection_counts,
            durations_ms,
            note: "throughput summaries exclude flagged results; latency summaries cover the whole block; \
                   percentiles interpolate linearly between ranks"
                .into(),
        },
    }
}

/// Summarizes matching results, one block per origin and headline method.
/// Scheduled and user-initiated results are never pooled.
pub fn aggregate(records: &[MeasurementResult], filters: &Filters) -> AggregateReport {
    let selected: Vec<&MeasurementResult> = records.iter().filter(|r| filters.matches(r)).collect();
    let mut groups: BTreeMap<(Origin, String), (EstimationMethod, Vec<&MeasurementResult>)> = BTreeMap::new();
    for r in &selected {
        let key = serde_json::to_string(&r.report.method).expect("methods serialize");
        groups
            .entry((r.origin, key))
            .or_insert_with(|| (r.report.method, Vec::new()))
            .1
            .push(r);
    }
    let blocks: Vec<ReportBlock> = groups
        .into_iter()
        .map(|((origin, _), (method, rs))| block(origin, method, &rs))
        .collect();
    AggregateReport {
        population: selected.len(),
        notice: blocks.is_empty().then(|| "no results match; nothing to report".to_string()),
        blocks,
    }
}

fn fmt_bps(v: f64) -> String {
    format!("{:.2} Mbps", v / 1e6)
}

impl AggregateReport {
    pub fn render_human(&self) -> String {
        let mut out = String::new();
        if let Some(n) = &self.notice {
            out.push_str(n);
            out.push('\n');
            return out;
        }
        for b in &self.blocks {
            out.push_str(&format!(
                "[{}] method {}: {} results, {} included, {} excluded\n",
                b.origin, b.disclosure.method, b.population, b.included, b.excluded
            ));
            for (flag, n) in &b.exclusions {
                out.push_str(&format!("  excluded {n} for {flag}\n"));
            }
            let line = |name: &str, s: &Option<Summary>, f: &dyn Fn(f64) -> String| match s {
                Some(s) => format!(
                    "  {name:<9} median {} mean {} p5 {} p95 {} (n={})\n",
                    f(s.median), f(s.mean), f(s.p5), f(s.p95), s.count
                ),
                None => String::new(),
            };
            let ms = |v: f64| format!("{v:.2} ms");
            out.push_str(&line("download", &b.metrics.download_bps, &fmt_bps));
            out.push_str(&line("upload", &b.metrics.upload_bps, &fmt_bps));
            out.push_str(&line("latency", &b.metrics.latency_ms, &ms));
            out.push_str(&line("jitter", &b.metrics.jitter_ms, &ms));
            out.push_str(&line("loss", &b.metrics.loss_rate, &|v| format!("{:.2}%", v * 100.0)));
            out.push_str(&format!(
                "  connections {:?}, durations {:?} ms; {}\n",
                b.disclosure.connection_counts, b.disclosure.durations_ms, b.disclosure.note
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_interpolate() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!(s.mean, 3.0);
        assert!((s.p5 - 1.2).abs() < 1e-12);
        assert!((s.p95 - 4.8).abs() < 1e-12);
    }

    #[test]
    fn constant_values_summarize_exactly() {
        let s = Summary::of(&[0.1; 7]).unwrap();
        assert_eq!((s.median, s.mean, s.p5, s.p95), (0.1, 0.1, 0.1, 0.1));
    }

    #[test]
    fn empty_input_has_no_summary() {
        assert!(Summary::of(&[]).is_none());
    }
}
