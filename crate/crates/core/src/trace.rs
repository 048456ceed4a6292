//! Timestamped cumulative byte samples: the single input format for every
//! throughput estimator, whether the bytes came from a socket or the model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack allowed when checking a trace against its rate cap.
/// Sharing a round among flows sums several products, which can land one
/// ulp above the exact capacity.
const CAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("sample {index}: time {t_ms} ms does not advance past {prev_ms} ms")]
    NonIncreasingTime { index: usize, t_ms: f64, prev_ms: f64 },
    #[error("sample {index}: cumulative bytes decrease from {prev} to {bytes}")]
    DecreasingBytes { index: usize, bytes: f64, prev: f64 },
    #[error("sample {index}: non-finite or negative value")]
    InvalidValue { index: usize },
    #[error("interval ending at sample {index} runs at {rate_bps} bps, above the {cap_bps} bps cap")]
    RateAboveCap { index: usize, rate_bps: f64, cap_bps: f64 },
    #[error("sample interval must be positive, got {0} ms")]
    BadInterval(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Simulated,
    Measured,
}

/// One `(t_ms, cumulative_bytes)` pair. Serialized as a two-element array to
/// keep stored records compact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample(pub f64, pub f64);

impl Sample {
    pub fn t_ms(&self) -> f64 {
        self.0
    }

    pub fn bytes(&self) -> f64 {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputTrace {
    pub sample_interval_ms: f64,
    pub source: TraceSource,
    /// Physical upper bound on the rate between any two consecutive samples,
    /// when one is known (the bottleneck capacity for simulated traces).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_cap_bps: Option<f64>,
    pub samples: Vec<Sample>,
}

impl ThroughputTrace {
    pub fn new(
        sample_interval_ms: f64,
        source: TraceSource,
        rate_cap_bps: Option<f64>,
        samples: Vec<Sample>,
    ) -> Result<Self, TraceError> {
        let trace = Self {
            sample_interval_ms,
            source,
            rate_cap_bps,
            samples,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Checks ordering, monotonicity and the optional rate cap.
    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.sample_interval_ms > 0.0 && self.sample_interval_ms.is_finite()) {
            return Err(TraceError::BadInterval(self.sample_interval_ms));
        }
        for (index, s) in self.samples.iter().enumerate() {
            if !(s.0.is_finite() && s.1.is_finite()) || s.0 < 0.0 || s.1 < 0.0 {
                return Err(TraceError::InvalidValue { index });
            }
            if index == 0 {
                continue;
            }
            let prev = self.samples[index - 1];
            if s.0 <= prev.0 {
                return Err(TraceError::NonIncreasingTime {
                    index,
                    t_ms: s.0,
                    prev_ms: prev.0,
                });
            }
            if s.1 < prev.1 {
                return Err(TraceError::DecreasingBytes {
                    index,
                    bytes: s.1,
                    prev: prev.1,
                });
            }
            if let Some(cap_bps) = self.rate_cap_bps {
                let rate_bps = 8.0 * (s.1 - prev.1) / ((s.0 - prev.0) / 1000.0);
                if rate_bps > cap_bps * (1.0 + CAP_TOLERANCE) {
                    return Err(TraceError::RateAboveCap {
                        index,
                        rate_bps,
                        cap_bps,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_bytes(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.1 - a.1,
            _ => 0.0,
        }
    }

    pub fn duration_ms(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.0 - a.0,
            _ => 0.0,
        }
    }

    /// Cumulative bytes at time `t_ms`, linearly interpolated between
    /// samples. `None` outside the sampled span.
    pub fn bytes_at(&self, t_ms: f64) -> Option<f64> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        if t_ms < first.0 || t_ms > last.0 {
            return None;
        }
        let hi = self.samples.partition_point(|s| s.0 < t_ms);
        let b = self.samples[hi];
        if b.0 == t_ms || hi == 0 {
            return Some(b.1);
        }
        let a = self.samples[hi - 1];
        let frac = (t_ms - a.0) / (b.0 - a.0);
        Some(a.1 + frac * (b.1 - a.1))
    }

    /// Returns a copy with every cumulative byte count multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.1 *= factor;
        }
        out.rate_cap_bps = out.rate_cap_bps.map(|c| c * factor);
        out
    }
}
