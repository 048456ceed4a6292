//! Derived performance metrics: loss rate, jitter, and the throughput
//! estimators a speed test has to disclose alongside its numbers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::ThroughputTrace;

/// Fraction of the peak interval rate at which a transfer counts as steady.
pub const DEFAULT_STEADY_THRESHOLD: f64 = 0.9;
pub const DEFAULT_TRIM_LOW: f64 = 0.3;
pub const DEFAULT_TRIM_HIGH: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("loss rate needs at least one transmitted probe")]
    NothingSent,
    #[error("received count {received} exceeds sent count {sent}")]
    ReceivedExceedsSent { sent: u64, received: u64 },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("rtt samples must be positive and finite")]
    InvalidRtt,
    #[error("invalid estimation method: {0}")]
    InvalidMethod(String),
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

/// `(sent - received) / sent`.
pub fn loss_rate(sent: u64, received: u64) -> Result<f64, MetricsError> {
    if sent == 0 {
        return Err(MetricsError::NothingSent);
    }
    if received > sent {
        return Err(MetricsError::ReceivedExceedsSent { sent, received });
    }
    Ok((sent - received) as f64 / sent as f64)
}

/// Mean absolute difference between consecutive RTT samples.
pub fn jitter(rtts_ms: &[f64]) -> Result<f64, MetricsError> {
    if rtts_ms.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            needed: 2,
            got: rtts_ms.len(),
        });
    }
    let total: f64 = rtts_ms.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Ok(total / (rtts_ms.len() - 1) as f64)
}

/// Median of an unsorted slice, averaging the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    })
}

/// Round-trip probe results from one latency measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub rtts_ms: Vec<f64>,
    pub sent: u64,
    pub received: u64,
}

impl LatencyStats {
    pub fn new(rtts_ms: Vec<f64>, sent: u64) -> Result<Self, MetricsError> {
        let stats = Self {
            received: rtts_ms.len() as u64,
            rtts_ms,
            sent,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.received != self.rtts_ms.len() as u64 {
            return Err(MetricsError::InvalidReport(format!(
                "received {} but {} rtts recorded",
                self.received,
                self.rtts_ms.len()
            )));
        }
        if self.received > self.sent {
            return Err(MetricsError::ReceivedExceedsSent {
                sent: self.sent,
                received: self.received,
            });
        }
        if self.rtts_ms.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(MetricsError::InvalidRtt);
        }
        Ok(())
    }

    pub fn median_ms(&self) -> Option<f64> {
        median(&self.rtts_ms)
    }

    pub fn jitter_ms(&self) -> Option<f64> {
        jitter(&self.rtts_ms).ok()
    }

    pub fn loss_rate(&self) -> Option<f64> {
        loss_rate(self.sent, self.received).ok()
    }
}

/// Rate over one sampling interval, stamped with the interval's end time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalRate {
    pub t_ms: f64,
    pub duration_ms: f64,
    pub bps: f64,
}

pub fn interval_rates(trace: &ThroughputTrace) -> Result<Vec<IntervalRate>, MetricsError> {
    if trace.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            needed: 2,
            got: trace.len(),
        });
    }
    Ok(trace
        .samples
        .windows(2)
        .map(|w| {
            let duration_ms = w[1].t_ms() - w[0].t_ms();
            IntervalRate {
                t_ms: w[1].t_ms(),
                duration_ms,
                bps: 8.0 * (w[1].bytes() - w[0].bytes()) / (duration_ms / 1000.0),
            }
        })
        .collect())
}

/// Where the steady part of a transfer begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SteadyRegion {
    pub start: usize,
    /// Only the final interval qualified: the transfer never settled.
    pub degenerate: bool,
}

/// First interval whose rate reaches `threshold` times the peak interval rate.
///
/// Constant traces start at 0, and so do traces that only slow down, since
/// their first interval is the peak. Returns 0 for an empty slice.
pub fn detect_steady_start(rates: &[IntervalRate], threshold: f64) -> usize {
    steady_region(rates, threshold).start
}

pub fn steady_region(rates: &[IntervalRate], threshold: f64) -> SteadyRegion {
    let peak = rates.iter().map(|r| r.bps).fold(f64::NEG_INFINITY, f64::max);
    let last = rates.len().saturating_sub(1);
    let start = rates
        .iter()
        .position(|r| r.bps >= threshold * peak)
        .unwrap_or(last);
    SteadyRegion {
        start,
        degenerate: rates.len() > 1 && start == last,
    }
}

/// How interval rates are reduced to one throughput number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimationMethod {
    /// Total bytes over total elapsed time.
    FullAverage,
    /// Duration-weighted mean of the rates from the steady start onward.
    SteadyState { threshold: f64 },
    /// Mean of sorted rates after discarding the lowest and highest fractions.
    Trimmed { low: f64, high: f64 },
    Median,
    Peak,
}

impl EstimationMethod {
    pub fn steady_state() -> Self {
        Self::SteadyState {
            threshold: DEFAULT_STEADY_THRESHOLD,
        }
    }

    pub fn trimmed() -> Self {
        Self::Trimmed {
            low: DEFAULT_TRIM_LOW,
            high: DEFAULT_TRIM_HIGH,
        }
    }

    /// Every method with its default parameters, headline first.
    pub fn all_defaults() -> Vec<Self> {
        vec![
            Self::steady_state(),
            Self::FullAverage,
            Self::trimmed(),
            Self::Median,
            Self::Peak,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::FullAverage => "full_average",
            Self::SteadyState { .. } => "steady_state",
            Self::Trimmed { .. } => "trimmed",
            Self::Median => "median",
            Self::Peak => "peak",
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        match *self {
            Self::SteadyState { threshold } if !(threshold > 0.0 && threshold <= 1.0) => Err(
                MetricsError::InvalidMethod(format!("steady threshold {threshold} outside (0, 1]")),
            ),
            Self::Trimmed { low, high } => {
                if !(0.0..0.5).contains(&low) || !(0.0..0.5).contains(&high) {
                    Err(MetricsError::InvalidMethod(format!(
                        "trim fractions {low}/{high} must each lie in [0, 0.5)"
                    )))
                } else if low + high >= 1.0 {
                    Err(MetricsError::InvalidMethod("trim fractions sum to 1 or more".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for EstimationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::SteadyState { threshold } => write!(f, "steady_state(threshold={threshold})"),
            Self::Trimmed { low, high } => write!(f, "trimmed(low={low},high={high})"),
            other => f.write_str(other.label()),
        }
    }
}

pub fn estimate_throughput(trace: &ThroughputTrace, method: &EstimationMethod) -> Result<f64, MetricsError> {
    method.validate()?;
    let rates = interval_rates(trace)?;
    Ok(match *method {
        EstimationMethod::FullAverage => 8.0 * trace.total_bytes() / (trace.duration_ms() / 1000.0),
        EstimationMethod::SteadyState { threshold } => {
            let region = &rates[detect_steady_start(&rates, threshold)..];
            let weighted: f64 = region.iter().map(|r| r.bps * r.duration_ms).sum();
            let span: f64 = region.iter().map(|r| r.duration_ms).sum();
            weighted / span
        }
        EstimationMethod::Trimmed { low, high } => {
            let mut sorted: Vec<f64> = rates.iter().map(|r| r.bps).collect();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len() as f64;
            // Guard against 0.3 * 10 evaluating to 2.9999...
            let drop_low = (low * n + 1e-9).floor() as usize;
            let drop_high = (high * n + 1e-9).floor() as usize;
            let kept = &sorted[drop_low..sorted.len() - drop_high];
            kept.iter().sum::<f64>() / kept.len() as f64
        }
        EstimationMethod::Median => {
            let values: Vec<f64> = rates.iter().map(|r| r.bps).collect();
            median(&values).expect("at least one interval")
        }
        EstimationMethod::Peak => rates.iter().map(|r| r.bps).fold(f64::NEG_INFINITY, f64::max),
    })
}

/// The metric set reported for one test, always bound to its estimation method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub download_bps: Option<f64>,
    pub upload_bps: Option<f64>,
    /// Median probe RTT.
    pub latency_ms: Option<f64>,
    pub jitter_ms: Option<f64>,
    pub loss_rate: Option<f64>,
    pub method: EstimationMethod,
}

impl MetricReport {
    pub fn new(method: EstimationMethod) -> Self {
        Self {
            download_bps: None,
            upload_bps: None,
            latency_ms: None,
            jitter_ms: None,
            loss_rate: None,
            method,
        }
    }

    pub fn with_latency(mut self, latency: &LatencyStats) -> Self {
        self.latency_ms = latency.median_ms();
        self.jitter_ms = latency.jitter_ms();
        self.loss_rate = latency.loss_rate();
        self
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        self.method.validate()?;
        let nonneg = |v: Option<f64>| v.is_none_or(|x| x >= 0.0 && x.is_finite());
        if !nonneg(self.download_bps) || !nonneg(self.upload_bps) {
            return Err(MetricsError::InvalidReport("negative throughput".into()));
        }
        if !nonneg(self.jitter_ms) || !nonneg(self.latency_ms) {
            return Err(MetricsError::InvalidReport("negative latency or jitter".into()));
        }
        if let Some(loss) = self.loss_rate {
            if !(0.0..=1.0).contains(&loss) {
                return Err(MetricsError::InvalidReport(format!("loss rate {loss} outside [0, 1]")));
            }
        }
        Ok(())
    }
}
