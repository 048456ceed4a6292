//! Deterministic per-RTT fluid model of TCP slow start and AIMD over a single
//! bottleneck link.
//!
//! Every flow advances in whole round trips. A round sends
//! `min(cwnd, bdp) * share` segments, where `share` scales all flows on the
//! link down proportionally to their windows whenever their sum exceeds the
//! bandwidth-delay product. Loss is a fixed schedule: every `floor(1 / p)`-th
//! segment a flow sends is dropped. Within a round delivery is spread evenly,
//! so sampled traces interpolate linearly between round boundaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::trace::{Sample, ThroughputTrace, TraceError, TraceSource};

pub const DEFAULT_MSS: u32 = 1500;
pub const DEFAULT_INITIAL_CWND: f64 = 10.0;
pub const DEFAULT_INITIAL_SSTHRESH: f64 = 64.0;

/// Consecutive lossy rounds that stand in for a retransmission timeout.
const TIMEOUT_LOSS_ROUNDS: u32 = 3;

/// Loss events skipped before `loss_limited_throughput` starts averaging,
/// and loss events averaged over afterwards.
const LIMIT_CYCLE_WARMUP_EVENTS: u32 = 20;
const LIMIT_CYCLE_MEASURED_EVENTS: u32 = 200;
const LIMIT_CYCLE_MAX_ROUNDS: u64 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("initial congestion window must be >= 1 segment, got {0}")]
    InvalidInitialWindow(f64),
    #[error("at least one connection is required")]
    NoConnections,
    #[error("test duration must be at least 1 s, got {0} s")]
    DurationTooShort(f64),
    #[error("sample interval {interval_ms} ms must be positive and no longer than the {duration_ms} ms test")]
    BadSampleInterval { interval_ms: f64, duration_ms: f64 },
    #[error("link is loss-free, so its throughput is capacity-limited rather than loss-limited")]
    LossFree,
    #[error("paths sharing an access link must have the same rtt ({0} ms vs {1} ms)")]
    MismatchedRtt(f64, f64),
    #[error("access capacity must be positive, got {0} bps")]
    InvalidAccessCapacity(f64),
    #[error("no limit cycle reached within {0} rounds")]
    NoLimitCycle(u64),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Capacity, propagation RTT and deterministic loss of a bottleneck path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub capacity_bps: f64,
    pub rtt_ms: f64,
    #[serde(default)]
    pub loss_rate: f64,
    #[serde(default = "default_mss")]
    pub mss: u32,
}

fn default_mss() -> u32 {
    DEFAULT_MSS
}

impl LinkModel {
    pub fn new(capacity_bps: f64, rtt_ms: f64, loss_rate: f64) -> Result<Self, ModelError> {
        let link = Self {
            capacity_bps,
            rtt_ms,
            loss_rate,
            mss: DEFAULT_MSS,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn with_mss(mut self, mss: u32) -> Result<Self, ModelError> {
        self.mss = mss;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.capacity_bps > 0.0 && self.capacity_bps.is_finite()) {
            return Err(ModelError::InvalidLink(format!(
                "capacity must be positive, got {}",
                self.capacity_bps
            )));
        }
        if !(self.rtt_ms > 0.0 && self.rtt_ms.is_finite()) {
            return Err(ModelError::InvalidLink(format!(
                "rtt must be positive, got {}",
                self.rtt_ms
            )));
        }
        if !(0.0..1.0).contains(&self.loss_rate) {
            return Err(ModelError::InvalidLink(format!(
                "loss rate must lie in [0, 1), got {}",
                self.loss_rate
            )));
        }
        if self.mss == 0 {
            return Err(ModelError::InvalidLink("mss must be positive".into()));
        }
        Ok(())
    }

    pub fn rtt_secs(&self) -> f64 {
        self.rtt_ms / 1000.0
    }

    /// Segments in flight needed to fill the path.
    pub fn bdp_segments(&self) -> f64 {
        self.capacity_bps * self.rtt_secs() / (f64::from(self.mss) * 8.0)
    }

    /// Every `loss_period()`-th segment is dropped; `None` on a clean link.
    pub fn loss_period(&self) -> Option<f64> {
        if self.loss_rate > 0.0 {
            // 1 / 0.01 lands a hair under 100 in binary floating point.
            Some((1.0 / self.loss_rate + 1e-9).floor())
        } else {
            None
        }
    }

    fn segment_bytes(&self) -> f64 {
        f64::from(self.mss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SlowStart,
    CongestionAvoidance,
    /// Re-entered slow start after a run of lossy rounds; grows like slow start.
    TimeoutRecovery,
}

/// Starting congestion state for new flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub initial_cwnd: f64,
    pub initial_ssthresh: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            initial_cwnd: DEFAULT_INITIAL_CWND,
            initial_ssthresh: DEFAULT_INITIAL_SSTHRESH,
        }
    }
}

impl FlowParams {
    fn validate(&self) -> Result<(), ModelError> {
        if !(self.initial_cwnd >= 1.0 && self.initial_cwnd.is_finite()) {
            return Err(ModelError::InvalidInitialWindow(self.initial_cwnd));
        }
        if !(self.initial_ssthresh >= 1.0 && self.initial_ssthresh.is_finite()) {
            return Err(ModelError::InvalidInitialWindow(self.initial_ssthresh));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// Congestion window in segments.
    pub cwnd: f64,
    pub ssthresh: f64,
    pub phase: Phase,
    /// Cumulative segments that reached the receiver.
    pub delivered: f64,
    /// Cumulative segments put on the wire; drives the loss schedule.
    pub sent: f64,
    /// Window restored after a timeout.
    pub initial_cwnd: f64,
    loss_streak: u32,
}

impl FlowState {
    pub fn new(params: FlowParams) -> Self {
        let phase = if params.initial_cwnd < params.initial_ssthresh {
            Phase::SlowStart
        } else {
            Phase::CongestionAvoidance
        };
        Self {
            cwnd: params.initial_cwnd,
            ssthresh: params.initial_ssthresh,
            phase,
            delivered: 0.0,
            sent: 0.0,
            initial_cwnd: params.initial_cwnd,
            loss_streak: 0,
        }
    }

    /// A flow already in a given phase, as if it had just arrived there.
    pub fn in_phase(cwnd: f64, ssthresh: f64, phase: Phase) -> Self {
        Self {
            cwnd: cwnd.max(1.0),
            ssthresh,
            phase,
            delivered: 0.0,
            sent: 0.0,
            initial_cwnd: DEFAULT_INITIAL_CWND,
            loss_streak: 0,
        }
    }

    /// Simulates one round trip in place and reports what it carried.
    fn step(&mut self, link: &LinkModel, share: f64) -> Round {
        let bdp = link.bdp_segments();
        let sent = self.cwnd.min(bdp) * share;
        let dropped = match link.loss_period() {
            Some(period) => ((self.sent + sent) / period).floor() - (self.sent / period).floor(),
            None => 0.0,
        };
        self.sent += sent;
        let delivered = (sent - dropped).max(0.0);
        self.delivered += delivered;

        if dropped > 0.0 {
            self.loss_streak += 1;
            let halved = (self.cwnd / 2.0).max(1.0);
            self.ssthresh = halved;
            if self.loss_streak >= TIMEOUT_LOSS_ROUNDS {
                self.loss_streak = 0;
                self.cwnd = self.initial_cwnd;
                self.phase = if self.cwnd < self.ssthresh {
                    Phase::TimeoutRecovery
                } else {
                    Phase::CongestionAvoidance
                };
            } else {
                self.cwnd = halved;
                self.phase = Phase::CongestionAvoidance;
            }
        } else {
            self.loss_streak = 0;
            match self.phase {
                Phase::SlowStart | Phase::TimeoutRecovery => {
                    let doubled = self.cwnd * 2.0;
                    if doubled >= self.ssthresh {
                        self.cwnd = self.ssthresh;
                        self.phase = Phase::CongestionAvoidance;
                    } else {
                        self.cwnd = doubled;
                    }
                }
                Phase::CongestionAvoidance => self.cwnd += 1.0,
            }
        }
        self.cwnd = self.cwnd.min(bdp).max(1.0);
        Round { delivered, dropped }
    }
}

#[derive(Debug, Clone, Copy)]
struct Round {
    delivered: f64,
    dropped: f64,
}

/// One RTT of a lone flow on `link`.
pub fn advance_round(state: &FlowState, link: &LinkModel) -> FlowState {
    advance_round_shared(state, link, 1.0)
}

/// One RTT for a flow receiving `share` (in `(0, 1]`) of its window's worth
/// of link capacity.
pub fn advance_round_shared(state: &FlowState, link: &LinkModel, share: f64) -> FlowState {
    let mut next = state.clone();
    next.step(link, share.clamp(0.0, 1.0));
    next
}

/// Doubling rounds until a loss-free window starting at `initial_cwnd`
/// covers the bandwidth-delay product.
pub fn slow_start_rounds(link: &LinkModel, initial_cwnd: f64) -> Result<u32, ModelError> {
    link.validate()?;
    if !(initial_cwnd >= 1.0 && initial_cwnd.is_finite()) {
        return Err(ModelError::InvalidInitialWindow(initial_cwnd));
    }
    let bdp = link.bdp_segments();
    let mut cwnd = initial_cwnd;
    let mut rounds = 0;
    while cwnd < bdp {
        cwnd *= 2.0;
        rounds += 1;
    }
    Ok(rounds)
}

/// Long-run rate of one flow whose window is governed by periodic loss.
///
/// Runs rounds until the sawtooth settles, then averages delivery between
/// two loss events many cycles apart so the window covers whole cycles.
pub fn loss_limited_throughput(link: &LinkModel) -> Result<f64, ModelError> {
    loss_limited_throughput_with(link, FlowParams::default())
}

pub fn loss_limited_throughput_with(link: &LinkModel, params: FlowParams) -> Result<f64, ModelError> {
    link.validate()?;
    params.validate()?;
    if link.loss_rate == 0.0 {
        return Err(ModelError::LossFree);
    }
    let mut flow = FlowState::new(params);
    let mut events = 0u32;
    let mut mark: Option<(u64, f64)> = None;
    for round in 1..=LIMIT_CYCLE_MAX_ROUNDS {
        let r = flow.step(link, 1.0);
        if r.dropped == 0.0 {
            continue;
        }
        events += 1;
        if events == LIMIT_CYCLE_WARMUP_EVENTS {
            mark = Some((round, flow.delivered));
        } else if events == LIMIT_CYCLE_WARMUP_EVENTS + LIMIT_CYCLE_MEASURED_EVENTS {
            let (start_round, start_delivered) = mark.expect("warm-up mark recorded");
            let segments_per_round = (flow.delivered - start_delivered) / (round - start_round) as f64;
            return Ok(segments_per_round * link.segment_bytes() * 8.0 / link.rtt_secs());
        }
    }
    Err(ModelError::NoLimitCycle(LIMIT_CYCLE_MAX_ROUNDS))
}

/// A link carrying `n_connections` parallel flows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLoad {
    pub link: LinkModel,
    pub n_connections: u16,
}

/// Traces for one path: one per connection plus their per-instant sum.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTransfer {
    pub per_connection: Vec<ThroughputTrace>,
    pub aggregate: ThroughputTrace,
}

/// Parallel flows on a single bottleneck, sampled every `sample_interval_ms`.
pub fn simulate_transfer(
    link: &LinkModel,
    n_connections: u16,
    duration_s: f64,
    sample_interval_ms: f64,
) -> Result<ThroughputTrace, ModelError> {
    simulate_connections(link, n_connections, duration_s, sample_interval_ms, FlowParams::default())
        .map(|t| t.aggregate)
}

pub fn simulate_connections(
    link: &LinkModel,
    n_connections: u16,
    duration_s: f64,
    sample_interval_ms: f64,
    params: FlowParams,
) -> Result<SimulatedTransfer, ModelError> {
    let path = PathLoad {
        link: *link,
        n_connections,
    };
    let mut out = simulate_paths(&[path], None, duration_s, sample_interval_ms, params)?;
    Ok(out.remove(0))
}

/// Several paths, each with its own bottleneck, optionally funnelled through
/// one shared access link.
///
/// Each round every path first scales its flows to fit its own capacity;
/// if the combined demand then exceeds the access link, all flows are scaled
/// again by the same factor. All paths must share one RTT so that rounds
/// line up.
pub fn simulate_paths(
    paths: &[PathLoad],
    access_capacity_bps: Option<f64>,
    duration_s: f64,
    sample_interval_ms: f64,
    params: FlowParams,
) -> Result<Vec<SimulatedTransfer>, ModelError> {
    params.validate()?;
    if paths.is_empty() {
        return Err(ModelError::NoConnections);
    }
    for p in paths {
        p.link.validate()?;
        if p.n_connections == 0 {
            return Err(ModelError::NoConnections);
        }
        if p.link.rtt_ms != paths[0].link.rtt_ms {
            return Err(ModelError::MismatchedRtt(paths[0].link.rtt_ms, p.link.rtt_ms));
        }
    }
    if let Some(access) = access_capacity_bps {
        if !(access > 0.0 && access.is_finite()) {
            return Err(ModelError::InvalidAccessCapacity(access));
        }
    }
    if !(duration_s >= 1.0 && duration_s.is_finite()) {
        return Err(ModelError::DurationTooShort(duration_s));
    }
    let duration_ms = duration_s * 1000.0;
    if !(sample_interval_ms > 0.0 && sample_interval_ms <= duration_ms) {
        return Err(ModelError::BadSampleInterval {
            interval_ms: sample_interval_ms,
            duration_ms,
        });
    }

    let rtt_ms = paths[0].link.rtt_ms;
    let rounds = (duration_ms / rtt_ms).ceil() as usize;
    let access_bytes_per_round = access_capacity_bps.map(|c| c * rtt_ms / 1000.0 / 8.0);

    let mut flows: Vec<Vec<FlowState>> = paths
        .iter()
        .map(|p| vec![FlowState::new(params); usize::from(p.n_connections)])
        .collect();
    // Cumulative delivered bytes of every flow at each round boundary.
    let mut boundaries: Vec<Vec<Vec<f64>>> = flows
        .iter()
        .map(|fs| fs.iter().map(|_| vec![0.0]).collect())
        .collect();
    let mut shares: Vec<Vec<f64>> = flows.iter().map(|fs| vec![0.0; fs.len()]).collect();

    for _ in 0..rounds {
        let mut total_bytes = 0.0;
        for (p, path) in paths.iter().enumerate() {
            let bdp = path.link.bdp_segments();
            let windows: f64 = flows[p].iter().map(|f| f.cwnd.min(bdp)).sum();
            let share = (bdp / windows).min(1.0);
            for (i, f) in flows[p].iter().enumerate() {
                shares[p][i] = share;
                total_bytes += f.cwnd.min(bdp) * share * path.link.segment_bytes();
            }
        }
        let access_share = match access_bytes_per_round {
            Some(cap) if total_bytes > cap => cap / total_bytes,
            _ => 1.0,
        };
        for (p, path) in paths.iter().enumerate() {
            for (i, f) in flows[p].iter_mut().enumerate() {
                let r = f.step(&path.link, shares[p][i] * access_share);
                let prev = *boundaries[p][i].last().expect("seeded with zero");
                boundaries[p][i].push(prev + r.delivered * path.link.segment_bytes());
            }
        }
    }

    let times = sample_times(duration_ms, sample_interval_ms);
    let mut out = Vec::with_capacity(paths.len());
    for (p, path) in paths.iter().enumerate() {
        let per_flow: Vec<Vec<f64>> = boundaries[p]
            .iter()
            .map(|b| times.iter().map(|&t| interpolate_rounds(b, rtt_ms, t)).collect())
            .collect();
        let cap = Some(path.link.capacity_bps);
        let mut per_connection = Vec::with_capacity(per_flow.len());
        for values in &per_flow {
            per_connection.push(build_trace(&times, values, sample_interval_ms, cap)?);
        }
        let sums: Vec<f64> = (0..times.len())
            .map(|k| per_flow.iter().map(|v| v[k]).sum())
            .collect();
        let aggregate = build_trace(&times, &sums, sample_interval_ms, cap)?;
        out.push(SimulatedTransfer {
            per_connection,
            aggregate,
        });
    }
    Ok(out)
}

fn sample_times(duration_ms: f64, interval_ms: f64) -> Vec<f64> {
    let mut times = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 * interval_ms;
        if t > duration_ms * (1.0 + 1e-12) {
            break;
        }
        times.push(t.min(duration_ms));
        k += 1;
    }
    if let Some(&last) = times.last() {
        if last < duration_ms {
            times.push(duration_ms);
        }
    }
    times
}

fn interpolate_rounds(boundaries: &[f64], rtt_ms: f64, t_ms: f64) -> f64 {
    let pos = t_ms / rtt_ms;
    let round = pos.floor() as usize;
    if round + 1 >= boundaries.len() {
        return *boundaries.last().expect("non-empty");
    }
    let frac = pos - round as f64;
    let a = boundaries[round];
    a + frac * (boundaries[round + 1] - a)
}

fn build_trace(
    times: &[f64],
    values: &[f64],
    interval_ms: f64,
    cap: Option<f64>,
) -> Result<ThroughputTrace, TraceError> {
    let samples = times.iter().zip(values).map(|(&t, &b)| Sample(t, b)).collect();
    ThroughputTrace::new(interval_ms, TraceSource::Simulated, cap, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(mbps: f64, rtt_ms: f64, loss: f64) -> LinkModel {
        LinkModel::new(mbps * 1e6, rtt_ms, loss).unwrap()
    }

    #[test]
    fn slow_start_doubles() {
        // 200 Mbps at 60 ms: bdp = 1000 segments.
        let l = link(200.0, 60.0, 0.0);
        let s = FlowState::in_phase(10.0, 64.0, Phase::SlowStart);
        let next = advance_round(&s, &l);
        assert_eq!(next.cwnd, 20.0);
        assert_eq!(next.phase, Phase::SlowStart);
        assert_eq!(next.delivered, 10.0);
    }

    #[test]
    fn slow_start_caps_at_ssthresh() {
        let l = link(200.0, 60.0, 0.0);
        let s = FlowState::in_phase(40.0, 64.0, Phase::SlowStart);
        let next = advance_round(&s, &l);
        assert_eq!(next.cwnd, 64.0);
        assert_eq!(next.phase, Phase::CongestionAvoidance);
    }

    #[test]
    fn congestion_avoidance_adds_one() {
        let l = link(200.0, 60.0, 0.0);
        let s = FlowState::in_phase(64.0, 64.0, Phase::CongestionAvoidance);
        assert_eq!(advance_round(&s, &l).cwnd, 65.0);
    }

    #[test]
    fn loss_halves_window() {
        // 1% loss drops the 100th segment, which this 100-segment round sends.
        let l = link(200.0, 60.0, 0.01);
        let s = FlowState::in_phase(100.0, 200.0, Phase::CongestionAvoidance);
        let next = advance_round(&s, &l);
        assert_eq!(next.cwnd, 50.0);
        assert_eq!(next.ssthresh, 50.0);
        assert_eq!(next.phase, Phase::CongestionAvoidance);
        assert_eq!(next.delivered, 99.0);
    }

    #[test]
    fn window_never_exceeds_bdp() {
        // 12 Mbps at 10 ms is exactly 10 segments.
        let l = link(12.0, 10.0, 0.0);
        let s = FlowState::in_phase(8.0, 64.0, Phase::SlowStart);
        let next = advance_round(&s, &l);
        assert_eq!(next.cwnd, 10.0);
        let next = advance_round(&next, &l);
        assert_eq!(next.cwnd, 10.0);
        assert_eq!(next.delivered, 18.0);
    }

    #[test]
    fn three_lossy_rounds_restart_slow_start() {
        // Period 2 means every round with >= 2 segments loses one.
        let l = link(1000.0, 20.0, 0.5);
        let mut s = FlowState::in_phase(64.0, 128.0, Phase::CongestionAvoidance);
        s = advance_round(&s, &l);
        assert_eq!(s.cwnd, 32.0);
        s = advance_round(&s, &l);
        assert_eq!(s.cwnd, 16.0);
        s = advance_round(&s, &l);
        assert_eq!(s.cwnd, DEFAULT_INITIAL_CWND);
        assert_eq!(s.ssthresh, 8.0);
        assert_eq!(s.phase, Phase::CongestionAvoidance);
    }

    #[test]
    fn window_floor_is_one_segment() {
        let l = link(1000.0, 20.0, 0.9);
        let mut s = FlowState::in_phase(1.0, 1.0, Phase::CongestionAvoidance);
        for _ in 0..10 {
            s = advance_round(&s, &l);
            assert!(s.cwnd >= 1.0);
        }
    }

    #[test]
    fn slow_start_round_counts() {
        assert_eq!(slow_start_rounds(&link(100.0, 20.0, 0.0), 10.0).unwrap(), 5);
        assert_eq!(slow_start_rounds(&link(1000.0, 20.0, 0.0), 10.0).unwrap(), 8);
        // bdp = 1.67 segments, already covered.
        assert_eq!(slow_start_rounds(&link(1.0, 20.0, 0.0), 10.0).unwrap(), 0);
        assert!(slow_start_rounds(&link(1.0, 20.0, 0.0), 0.5).is_err());
    }

    #[test]
    fn loss_limited_requires_loss() {
        assert_eq!(loss_limited_throughput(&link(100.0, 40.0, 0.0)), Err(ModelError::LossFree));
    }

    #[test]
    fn rejects_bad_link_and_timing() {
        assert!(LinkModel::new(0.0, 20.0, 0.0).is_err());
        assert!(LinkModel::new(1e6, 0.0, 0.0).is_err());
        assert!(LinkModel::new(1e6, 20.0, 1.0).is_err());
        assert!(LinkModel::new(1e6, 20.0, -0.1).is_err());
        let l = link(100.0, 20.0, 0.0);
        assert!(matches!(simulate_transfer(&l, 4, 0.5, 100.0), Err(ModelError::DurationTooShort(_))));
        assert!(matches!(simulate_transfer(&l, 0, 5.0, 100.0), Err(ModelError::NoConnections)));
        assert!(matches!(
            simulate_transfer(&l, 4, 2.0, 2500.0),
            Err(ModelError::BadSampleInterval { .. })
        ));
    }

    #[test]
    fn trace_covers_whole_duration() {
        let t = simulate_transfer(&link(100.0, 40.0, 0.0), 2, 1.05, 100.0).unwrap();
        assert_eq!(t.samples.first().unwrap().t_ms(), 0.0);
        assert_eq!(t.samples.last().unwrap().t_ms(), 1050.0);
        assert_eq!(t.len(), 12);
    }

    #[test]
    fn shared_paths_need_common_rtt() {
        let a = PathLoad { link: link(100.0, 20.0, 0.0), n_connections: 1 };
        let b = PathLoad { link: link(100.0, 30.0, 0.0), n_connections: 1 };
        assert!(matches!(
            simulate_paths(&[a, b], None, 1.0, 100.0, FlowParams::default()),
            Err(ModelError::MismatchedRtt(..))
        ));
    }
}
