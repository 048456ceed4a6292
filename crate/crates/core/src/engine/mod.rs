//! Active measurement client.
//!
//! An [`Engine`] probes latency with echo exchanges, samples interface
//! counters for cross traffic, and runs time-bounded parallel-connection
//! transfers against a responder. It records raw traces only; estimation is
//! left to [`crate::metrics`].

pub mod counters;

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::LatencyStats;
use crate::responder::wire::{
    ControlMessage, FrameReader, HelloParams, LoadReport, Nonce, RefuseReason, TransferSummary,
    WireError, PROTOCOL_VERSION,
};
use crate::responder::PayloadSource;
use crate::trace::{Sample, ThroughputTrace, TraceError, TraceSource};

pub use self::counters::{ByteCounterSource, CounterDirection, InterfaceCounters, SharedCounter};
pub use crate::responder::wire::Direction;

pub const DEFAULT_DURATION_MS: u64 = 10_000;
pub const DEFAULT_CONNECTIONS: u16 = 4;
pub const DEFAULT_SAMPLE_INTERVAL_MS: u64 = 100;
/// Fewer parallel connections than this under-read most links.
pub const RECOMMENDED_MIN_CONNECTIONS: u16 = 4;
pub const MIN_PROBES: u32 = 5;

const IO_CHUNK: usize = 64 * 1024;
const WORKER_POLL: Duration = Duration::from_millis(50);
/// Stream ids for upload payloads, kept apart from the responder's.
const UPLOAD_STREAM_BASE: u16 = 0x8000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid test spec: {0}")]
    InvalidSpec(String),
    #[error("target {target} unreachable: {source}")]
    Unreachable {
        target: String,
        #[source]
        source: io::Error,
    },
    #[error("target {target} refused the test: {reason}")]
    Refused { target: String, reason: RefuseReason },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Which server a test runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRef {
    pub server_id: String,
    pub address: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_hint_bps: Option<f64>,
}

impl TargetRef {
    pub fn new(server_id: impl Into<String>, address: impl Into<String>) -> Self {
        Self {
            server_id: server_id.into(),
            address: address.into(),
            capacity_hint_bps: None,
        }
    }
}

/// Complete description of one test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub direction: Direction,
    pub duration_ms: u64,
    pub n_connections: u16,
    pub sample_interval_ms: u64,
    /// Whether the headline estimate should skip the ramp-up.
    pub warmup_excluded: bool,
    pub target: TargetRef,
    pub nonce: Nonce,
}

impl TestSpec {
    pub fn new(direction: Direction, target: TargetRef) -> Self {
        Self {
            direction,
            duration_ms: DEFAULT_DURATION_MS,
            n_connections: DEFAULT_CONNECTIONS,
            sample_interval_ms: DEFAULT_SAMPLE_INTERVAL_MS,
            warmup_excluded: true,
            target,
            nonce: Nonce::random(),
        }
    }

    pub fn duration(&self) -> Duration {
        Duration::from_millis(self.duration_ms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_connections == 0 {
            return Err(EngineError::InvalidSpec("n_connections must be at least 1".into()));
        }
        if self.sample_interval_ms == 0 {
            return Err(EngineError::InvalidSpec("sample_interval_ms must be positive".into()));
        }
        if self.duration_ms < self.sample_interval_ms {
            return Err(EngineError::InvalidSpec(format!(
                "duration {} ms is shorter than one sample interval",
                self.duration_ms
            )));
        }
        if self.duration_ms > u64::from(u32::MAX) {
            return Err(EngineError::InvalidSpec("duration too long".into()));
        }
        if let Some(c) = self.target.capacity_hint_bps {
            if !(c > 0.0 && c.is_finite()) {
                return Err(EngineError::InvalidSpec("capacity hint must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    CrossTrafficDetected,
    CrossTrafficUnknown,
    DegenerateTrace,
    ServerLoadReported,
    BelowRecommendedConnections,
    /// Only some destinations of a multi-destination run completed.
    Partial,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::CrossTrafficDetected => "cross_traffic_detected",
            Flag::CrossTrafficUnknown => "cross_traffic_unknown",
            Flag::DegenerateTrace => "degenerate_trace",
            Flag::ServerLoadReported => "server_load_reported",
            Flag::BelowRecommendedConnections => "below_recommended_connections",
            Flag::Partial => "partial",
        }
    }
}

impl std::fmt::Display for Flag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Background traffic observed just before a test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum CrossTraffic {
    Measured { bps: f64 },
    Unknown { reason: String },
    /// Simulated runs have no host to observe.
    NotApplicable,
}

impl CrossTraffic {
    pub fn bps(&self) -> Option<f64> {
        match self {
            CrossTraffic::Measured { bps } => Some(*bps),
            _ => None,
        }
    }
}

/// Flags cross traffic above a fraction of the target's capacity, or above a
/// fixed rate when the capacity is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossTrafficGate {
    pub capacity_fraction: f64,
    pub fallback_bps: f64,
}

impl Default for CrossTrafficGate {
    fn default() -> Self {
        Self {
            capacity_fraction: 0.05,
            fallback_bps: 5e6,
        }
    }
}

impl CrossTrafficGate {
    pub fn threshold_bps(&self, capacity_hint_bps: Option<f64>) -> f64 {
        match capacity_hint_bps {
            Some(c) => self.capacity_fraction * c,
            None => self.fallback_bps,
        }
    }

    /// The flag this observation earns, if any.
    pub fn classify(&self, observed: &CrossTraffic, capacity_hint_bps: Option<f64>) -> Option<Flag> {
        match observed {
            CrossTraffic::Measured { bps } if *bps > self.threshold_bps(capacity_hint_bps) => {
                Some(Flag::CrossTrafficDetected)
            }
            CrossTraffic::Unknown { .. } => Some(Flag::CrossTrafficUnknown),
            _ => None,
        }
    }
}

/// Everything one test observed, before any estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTestRecord {
    pub spec: TestSpec,
    /// Wall-clock time of the first sample. Sample times are offsets from
    /// here on a monotonic clock.
    pub started_at: DateTime<Utc>,
    pub per_connection_traces: Vec<ThroughputTrace>,
    pub aggregate_trace: ThroughputTrace,
    pub latency: Option<LatencyStats>,
    pub cross_traffic: CrossTraffic,
    pub flags: BTreeSet<Flag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_load: Option<LoadReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_summary: Option<TransferSummary>,
    pub surviving_connections: u16,
}

impl RawTestRecord {
    /// Wraps model output in a record. Simulated records carry no latency,
    /// server or cross-traffic observations.
    pub fn simulated(
        spec: TestSpec,
        started_at: DateTime<Utc>,
        per_connection_traces: Vec<ThroughputTrace>,
        aggregate_trace: ThroughputTrace,
    ) -> Self {
        let mut flags = BTreeSet::new();
        if spec.n_connections < RECOMMENDED_MIN_CONNECTIONS {
            flags.insert(Flag::BelowRecommendedConnections);
        }
        Self {
            surviving_connections: per_connection_traces.len() as u16,
            spec,
            started_at,
            per_connection_traces,
            aggregate_trace,
            latency: None,
            cross_traffic: CrossTraffic::NotApplicable,
            flags,
            server_load: None,
            server_summary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub probe_count: u32,
    pub probe_interval_ms: u64,
    pub probe_timeout_ms: u64,
    pub cross_traffic_window_ms: u64,
    pub connect_timeout_ms: u64,
    /// How long to wait for the responder's closing summary.
    pub done_timeout_ms: u64,
    pub gate: CrossTrafficGate,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            probe_count: 10,
            probe_interval_ms: 20,
            probe_timeout_ms: 1000,
            cross_traffic_window_ms: 2000,
            connect_timeout_ms: 3000,
            done_timeout_ms: 10_000,
            gate: CrossTrafficGate::default(),
        }
    }
}

fn ms(v: u64) -> Duration {
    Duration::from_millis(v)
}

pub struct Engine {
    pub config: EngineConfig,
    counters: Option<Arc<dyn ByteCounterSource>>,
    /// Bytes moved by this engine's own transfers, subtracted from counters.
    own_bytes: Arc<AtomicU64>,
}

impl Engine {
    /// An engine reading the host's interface counters.
    pub fn new(config: EngineConfig) -> Self {
        Self::with_counters(config, Some(Arc::new(InterfaceCounters::host_default())))
    }

    pub fn with_counters(config: EngineConfig, counters: Option<Arc<dyn ByteCounterSource>>) -> Self {
        Self {
            config,
            counters,
            own_bytes: Arc::new(AtomicU64::new(0)),
        }
    }

    /// A second engine for a concurrent test. Both share counters and treat
    /// each other's traffic as their own rather than as cross traffic.
    pub fn sibling(&self) -> Self {
        Self {
            config: self.config.clone(),
            counters: self.counters.clone(),
            own_bytes: Arc::clone(&self.own_bytes),
        }
    }

    pub fn set_counters(&mut self, counters: Option<Arc<dyn ByteCounterSource>>) {
        self.counters = counters;
    }

    fn connect(&self, target: &str) -> Result<TcpStream> {
        let unreachable = |source| EngineError::Unreachable {
            target: target.to_string(),
            source,
        };
        let addrs: Vec<SocketAddr> = target.to_socket_addrs().map_err(unreachable)?.collect();
        let mut last = io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, ms(self.config.connect_timeout_ms)) {
                Ok(s) => {
                    s.set_nodelay(true).map_err(unreachable)?;
                    return Ok(s);
                }
                Err(e) => last = e,
            }
        }
        Err(unreachable(last))
    }

    /// Sends `count` echo requests on a fresh connection and times each
    /// reply. Probes that time out count as lost.
    pub fn probe_latency(&mut self, target: &str, count: u32, interval: Duration) -> Result<LatencyStats> {
        if count < MIN_PROBES {
            return Err(EngineError::InvalidSpec(format!("at least {MIN_PROBES} probes required")));
        }
        let stream = self.connect(target)?;
        let mut writer = stream.try_clone().map_err(WireError::from)?;
        let mut reader = FrameReader::new(stream);
        let nonce = Nonce::random();
        let timeout = ms(self.config.probe_timeout_ms);
        let mut rtts = Vec::with_capacity(count as usize);
        let mut sent = 0u64;
        let mut closed = false;
        for seq in 0..count {
            if seq > 0 {
                thread::sleep(interval);
            }
            sent += 1;
            if closed {
                continue;
            }
            let payload = seq.to_be_bytes().to_vec();
            let start = Instant::now();
            let echo = ControlMessage::Echo { nonce, payload: payload.clone() };
            if echo.write_to(&mut writer).is_err() {
                closed = true;
                continue;
            }
            loop {
                let left = timeout.saturating_sub(start.elapsed());
                if left.is_zero() {
                    break;
                }
                reader.get_mut().set_read_timeout(Some(left)).map_err(WireError::from)?;
                match reader.read_message() {
                    Ok(ControlMessage::EchoReply { nonce: n, payload: p }) if n == nonce && p == payload => {
                        rtts.push(start.elapsed().as_secs_f64() * 1e3);
                        break;
                    }
                    // Late reply to an earlier probe.
                    Ok(ControlMessage::EchoReply { .. }) => {}
                    Ok(other) => {
                        return Err(EngineError::Protocol(format!("unexpected reply to echo: {other:?}")))
                    }
                    Err(e) if e.is_timeout() => break,
                    Err(e) => {
                        debug!("probe connection ended: {e}");
                        closed = true;
                        break;
                    }
                }
            }
        }
        LatencyStats::new(rtts, sent).map_err(|e| EngineError::Protocol(e.to_string()))
    }

    /// Mean rate of traffic not caused by this engine over `window`.
    pub fn measure_cross_traffic(&mut self, window: Duration) -> CrossTraffic {
        let Some(source) = self.counters.clone() else {
            return CrossTraffic::Unknown {
                reason: "no byte counter source configured".into(),
            };
        };
        if window.is_zero() {
            return CrossTraffic::Unknown {
                reason: "empty measurement window".into(),
            };
        }
        let own_start = self.own_bytes.load(Ordering::SeqCst);
        let start = match source.total_bytes() {
            Ok(v) => v,
            Err(e) => return CrossTraffic::Unknown { reason: e.to_string() },
        };
        let t0 = Instant::now();
        thread::sleep(window);
        let end = match source.total_bytes() {
            Ok(v) => v,
            Err(e) => return CrossTraffic::Unknown { reason: e.to_string() },
        };
        let elapsed = t0.elapsed().as_secs_f64();
        let own = self.own_bytes.load(Ordering::SeqCst) - own_start;
        let foreign = end.saturating_sub(start).saturating_sub(own);
        CrossTraffic::Measured {
            bps: foreign as f64 * 8.0 / elapsed,
        }
    }

    pub fn run_test(&mut self, spec: &TestSpec) -> Result<RawTestRecord> {
        self.run_test_timed(spec).map(|(record, _)| record)
    }

    /// Like [`Engine::run_test`], also returning how long the transfer
    /// phase took on the sampling clock.
    pub fn run_test_timed(&mut self, spec: &TestSpec) -> Result<(RawTestRecord, Duration)> {
        spec.validate()?;
        let target = spec.target.address.as_str();
        let mut flags = BTreeSet::new();
        if spec.n_connections < RECOMMENDED_MIN_CONNECTIONS {
            flags.insert(Flag::BelowRecommendedConnections);
        }

        let latency = self.probe_latency(target, self.config.probe_count.max(MIN_PROBES), ms(self.config.probe_interval_ms))?;
        let cross_traffic = self.measure_cross_traffic(ms(self.config.cross_traffic_window_ms));
        if let Some(flag) = self.config.gate.classify(&cross_traffic, spec.target.capacity_hint_bps) {
            flags.insert(flag);
        }

        // Control handshake.
        let control = self.connect(target)?;
        let mut control_writer = control.try_clone().map_err(WireError::from)?;
        let mut control_reader = FrameReader::new(control);
        let hello = HelloParams {
            version: PROTOCOL_VERSION,
            direction: spec.direction,
            duration_ms: spec.duration_ms as u32,
            n_connections: spec.n_connections,
        };
        ControlMessage::hello(spec.nonce, hello).write_to(&mut control_writer)?;
        control_reader
            .get_mut()
            .set_read_timeout(Some(ms(self.config.connect_timeout_ms)))
            .map_err(WireError::from)?;
        let server_load = match control_reader.read_message()? {
            ControlMessage::HelloAck { nonce, load } if nonce == spec.nonce => load,
            ControlMessage::HelloAck { nonce, .. } => {
                return Err(EngineError::Protocol(format!("ack for foreign nonce {nonce}")))
            }
            ControlMessage::Refuse { reason, .. } => {
                return Err(EngineError::Refused {
                    target: target.to_string(),
                    reason,
                })
            }
            other => return Err(EngineError::Protocol(format!("unexpected handshake reply: {other:?}"))),
        };
        flags.insert(Flag::ServerLoadReported);

        // Data connections.
        let mut data = Vec::with_capacity(spec.n_connections as usize);
        for _ in 0..spec.n_connections {
            let mut stream = self.connect(target)?;
            ControlMessage::StartData { nonce: spec.nonce }.write_to(&mut stream)?;
            stream
                .set_read_timeout(Some(ms(self.config.connect_timeout_ms)))
                .map_err(WireError::from)?;
            let mut reader = FrameReader::new(stream);
            match reader.read_message()? {
                ControlMessage::StartData { nonce } if nonce == spec.nonce => {}
                ControlMessage::Refuse { reason, .. } => {
                    return Err(EngineError::Refused {
                        target: target.to_string(),
                        reason,
                    })
                }
                other => return Err(EngineError::Protocol(format!("unexpected data reply: {other:?}"))),
            }
            data.push(reader.into_parts());
        }

        let n = data.len();
        let counters: Vec<Arc<AtomicU64>> = (0..n).map(|_| Arc::new(AtomicU64::new(0))).collect();
        let stop = Arc::new(AtomicBool::new(false));
        let mut sockets = Vec::with_capacity(n);
        let mut workers = Vec::with_capacity(n);
        for (i, (stream, leftover)) in data.into_iter().enumerate() {
            sockets.push(stream.try_clone().map_err(WireError::from)?);
            let worker = Worker {
                stream,
                counter: Arc::clone(&counters[i]),
                own: Arc::clone(&self.own_bytes),
                stop: Arc::clone(&stop),
            };
            let direction = spec.direction;
            let nonce = spec.nonce;
            workers.push(thread::spawn(move || match direction {
                Direction::Download => worker.receive(leftover.len() as u64),
                Direction::Upload => worker.send(PayloadSource::new(nonce, UPLOAD_STREAM_BASE + i as u16)),
            }));
        }

        // One sampler, one monotonic clock, all counters read per instant.
        let interval = ms(spec.sample_interval_ms);
        let duration = spec.duration();
        let mut per_conn: Vec<Vec<Sample>> = vec![Vec::new(); n];
        let mut aggregate = Vec::new();
        let clock = Instant::now();
        let started_at = Utc::now();
        let mut take_sample = |t: Duration| {
            let snapshot: Vec<u64> = counters.iter().map(|c| c.load(Ordering::SeqCst)).collect();
            let t_ms = t.as_secs_f64() * 1e3;
            for (trace, bytes) in per_conn.iter_mut().zip(&snapshot) {
                trace.push(Sample(t_ms, *bytes as f64));
            }
            aggregate.push(Sample(t_ms, snapshot.iter().sum::<u64>() as f64));
        };
        take_sample(Duration::ZERO);
        let mut k = 1u32;
        let surviving = loop {
            let next = (interval * k).min(duration);
            if let Some(wait) = next.checked_sub(clock.elapsed()) {
                thread::sleep(wait);
            }
            if next >= duration {
                // Stop every worker before the last sample so it holds each
                // connection's final count.
                stop.store(true, Ordering::SeqCst);
                for s in &sockets {
                    let _ = s.shutdown(Shutdown::Both);
                }
                let surviving = workers
                    .drain(..)
                    .map(|w| w.join().unwrap_or(false))
                    .filter(|alive| *alive)
                    .count() as u16;
                take_sample(clock.elapsed());
                break surviving;
            }
            take_sample(clock.elapsed());
            k += 1;
        };
        let elapsed = clock.elapsed();
        if usize::from(surviving) * 2 < n {
            flags.insert(Flag::DegenerateTrace);
        }

        let server_summary = self.finish(&mut control_writer, &mut control_reader, spec.nonce);

        let interval_ms = spec.sample_interval_ms as f64;
        let per_connection_traces = per_conn
            .into_iter()
            .map(|s| ThroughputTrace::new(interval_ms, TraceSource::Measured, None, s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let aggregate_trace = ThroughputTrace::new(interval_ms, TraceSource::Measured, None, aggregate)?;
        let record = RawTestRecord {
            spec: spec.clone(),
            started_at,
            per_connection_traces,
            aggregate_trace,
            latency: Some(latency),
            cross_traffic,
            flags,
            server_load: Some(server_load),
            server_summary,
            surviving_connections: surviving,
        };
        Ok((record, elapsed))
    }

    fn finish(
        &self,
        writer: &mut TcpStream,
        reader: &mut FrameReader<TcpStream>,
        nonce: Nonce,
    ) -> Option<TransferSummary> {
        let done = ControlMessage::Done { nonce, summary: None };
        if let Err(e) = done.write_to(writer) {
            warn!("could not send done: {e}");
            return None;
        }
        let _ = reader.get_mut().set_read_timeout(Some(ms(self.config.done_timeout_ms)));
        match reader.read_message() {
            Ok(ControlMessage::Done { nonce: n, summary }) if n == nonce => summary,
            Ok(other) => {
                warn!("unexpected reply to done: {other:?}");
                None
            }
            Err(e) => {
                warn!("no summary from responder: {e}");
                None
            }
        }
    }
}

struct Worker {
    stream: TcpStream,
    counter: Arc<AtomicU64>,
    own: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
}

impl Worker {
    fn count(&self, n: u64) {
        self.counter.fetch_add(n, Ordering::SeqCst);
        self.own.fetch_add(n, Ordering::SeqCst);
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Returns whether the connection lasted until the stop signal.
    fn receive(mut self, leftover: u64) -> bool {
        self.count(leftover);
        if self.stream.set_read_timeout(Some(WORKER_POLL)).is_err() {
            return false;
        }
        let mut buf = vec![0u8; IO_CHUNK];
        loop {
            match self.stream.read(&mut buf) {
                Ok(0) => return self.stopped(),
                Ok(k) => self.count(k as u64),
                Err(e) if is_transient(&e) => {}
                Err(_) => return self.stopped(),
            }
            if self.stopped() {
                return true;
            }
        }
    }

    fn send(mut self, mut source: PayloadSource) -> bool {
        if self.stream.set_write_timeout(Some(WORKER_POLL)).is_err() {
            return false;
        }
        let mut buf = vec![0u8; IO_CHUNK];
        while !self.stopped() {
            source.fill(&mut buf);
            let mut off = 0;
            while off < buf.len() {
                if self.stopped() {
                    return true;
                }
                match self.stream.write(&buf[off..]) {
                    Ok(0) => return self.stopped(),
                    Ok(k) => {
                        off += k;
                        self.count(k as u64);
                    }
                    Err(e) if is_transient(&e) => {}
                    Err(_) => return self.stopped(),
                }
            }
        }
        true
    }
}

fn is_transient(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TestSpec {
        TestSpec::new(Direction::Download, TargetRef::new("s1", "127.0.0.1:1"))
    }

    #[test]
    fn defaults_use_four_connections() {
        let s = spec();
        assert_eq!(s.n_connections, 4);
        assert_eq!(s.duration_ms, 10_000);
        assert_eq!(s.sample_interval_ms, 100);
        s.validate().unwrap();
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec();
        s.n_connections = 0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.sample_interval_ms = 0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.duration_ms = 50;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let s = spec();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<TestSpec>(&text).unwrap(), s);
    }

    #[test]
    fn gate_thresholds() {
        let g = CrossTrafficGate::default();
        assert_eq!(g.threshold_bps(Some(1e9)), 5e7);
        assert_eq!(g.threshold_bps(None), 5e6);
        assert_eq!(g.classify(&CrossTraffic::Measured { bps: 6e6 }, None), Some(Flag::CrossTrafficDetected));
        assert_eq!(g.classify(&CrossTraffic::Measured { bps: 6e6 }, Some(1e9)), None);
        let unknown = CrossTraffic::Unknown { reason: "x".into() };
        assert_eq!(g.classify(&unknown, None), Some(Flag::CrossTrafficUnknown));
        assert_eq!(g.classify(&CrossTraffic::NotApplicable, None), None);
    }

    #[test]
    fn missing_counters_read_as_unknown() {
        let mut e = Engine::with_counters(EngineConfig::default(), None);
        assert!(matches!(e.measure_cross_traffic(ms(10)), CrossTraffic::Unknown { .. }));
    }

    #[test]
    fn own_bytes_are_subtracted() {
        let counter = SharedCounter::default();
        let mut e = Engine::with_counters(EngineConfig::default(), Some(Arc::new(counter.clone())));
        let own = Arc::clone(&e.own_bytes);
        let c2 = counter.clone();
        let h = thread::spawn(move || {
            thread::sleep(ms(20));
            c2.add(1_000_000);
            own.fetch_add(1_000_000, Ordering::SeqCst);
        });
        let got = e.measure_cross_traffic(ms(100));
        h.join().unwrap();
        assert_eq!(got, CrossTraffic::Measured { bps: 0.0 });
    }

    #[test]
    fn flags_serialize_in_snake_case() {
        let flags: BTreeSet<Flag> = [Flag::CrossTrafficDetected, Flag::DegenerateTrace].into();
        assert_eq!(
            serde_json::to_string(&flags).unwrap(),
            r#"["cross_traffic_detected","degenerate_trace"]"#
        );
        for f in [
            Flag::CrossTrafficDetected,
            Flag::CrossTrafficUnknown,
            Flag::DegenerateTrace,
            Flag::ServerLoadReported,
            Flag::BelowRecommendedConnections,
            Flag::Partial,
        ] {
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{f}\""));
        }
    }
}
