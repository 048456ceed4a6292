//! Server registry, RTT-based server selection with health tracking,
//! randomized test scheduling and multi-destination runs.

pub mod multidest;
pub mod schedule;

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::fmt;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineError, MIN_PROBES};
use crate::flowmodel::ModelError;
use crate::metrics::{LatencyStats, MetricsError};

pub use self::multidest::{
    aggregate_over_overlap, build_report, run_multi_destination, simulate_multi_destination,
    DestinationOutcome, MultiDestConfig, MultiDestResult, OverlapAggregate,
};
pub use self::schedule::{generate_schedule, Schedule, ScheduledTest};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("no usable servers{}", format_reasons(.0))]
    NoServers(Vec<(String, String)>),
    #[error("unknown server {0}")]
    UnknownServer(String),
    #[error("server {0} already registered")]
    DuplicateServer(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),
    #[error("multi-destination run failed{}", format_reasons(.0))]
    MultiDestFailed(Vec<(String, String)>),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn format_reasons(reasons: &[(String, String)]) -> String {
    if reasons.is_empty() {
        return String::new();
    }
    let parts: Vec<String> = reasons.iter().map(|(id, why)| format!("{id}: {why}")).collect();
    format!(" ({})", parts.join("; "))
}

pub type Result<T> = std::result::Result<T, CoordinatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Underperformed,
    Unreachable,
}

impl Outcome {
    pub fn is_bad(self) -> bool {
        self != Outcome::Ok
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Ok => "ok",
            Outcome::Underperformed => "underperformed",
            Outcome::Unreachable => "unreachable",
        })
    }
}

/// Removal after `removal_threshold` bad outcomes among the last `window`;
/// restoration after `restore_after` consecutive ok outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthPolicy {
    pub window: usize,
    pub removal_threshold: usize,
    pub restore_after: usize,
}

impl Default for HealthPolicy {
    fn default() -> Self {
        Self {
            window: 20,
            removal_threshold: 5,
            restore_after: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthWindow {
    pub outcomes: VecDeque<Outcome>,
    pub removed: bool,
    pub ok_streak: u32,
}

impl HealthWindow {
    pub fn record(&mut self, outcome: Outcome, policy: &HealthPolicy) {
        self.outcomes.push_back(outcome);
        while self.outcomes.len() > policy.window {
            self.outcomes.pop_front();
        }
        self.ok_streak = if outcome.is_bad() { 0 } else { self.ok_streak + 1 };
        if self.removed {
            if self.ok_streak as usize >= policy.restore_after {
                // Start afresh, or the old failures would remove it again.
                self.removed = false;
                self.outcomes.clear();
                self.ok_streak = 0;
            }
        } else if self.bad_count() >= policy.removal_threshold {
            self.removed = true;
            self.ok_streak = 0;
        }
    }

    pub fn bad_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_bad()).count()
    }

    /// Fraction of ok outcomes in the window; 1 for an empty window.
    pub fn score(&self) -> f64 {
        if self.outcomes.is_empty() {
            1.0
        } else {
            1.0 - self.bad_count() as f64 / self.outcomes.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerDescriptor {
    pub id: String,
    pub address: String,
    pub declared_location: String,
    #[serde(default)]
    pub network: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_hint_bps: Option<f64>,
    #[serde(default)]
    pub health: HealthWindow,
}

impl ServerDescriptor {
    pub fn new(id: impl Into<String>, address: impl Into<String>, declared_location: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            address: address.into(),
            declared_location: declared_location.into(),
            network: String::new(),
            capacity_hint_bps: None,
            health: HealthWindow::default(),
        }
    }

    /// Whether the location label names `region`: the whole label or any
    /// comma-separated part of it, ignoring case.
    pub fn in_region(&self, region: &str) -> bool {
        let region = region.trim();
        if region.is_empty() {
            return false;
        }
        let label = self.declared_location.trim();
        label.eq_ignore_ascii_case(region)
            || label.split(',').any(|part| part.trim().eq_ignore_ascii_case(region))
    }
}

/// One health observation, as appended to the outcome log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthEvent {
    pub at: DateTime<Utc>,
    pub server_id: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    #[serde(default)]
    pub policy: HealthPolicy,
    pub servers: Vec<ServerDescriptor>,
}

impl Registry {
    pub fn new(policy: HealthPolicy) -> Self {
        Self {
            policy,
            servers: Vec::new(),
        }
    }

    pub fn add(&mut self, server: ServerDescriptor) -> Result<()> {
        if self.get(&server.id).is_some() {
            return Err(CoordinatorError::DuplicateServer(server.id));
        }
        self.servers.push(server);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Result<ServerDescriptor> {
        let i = self
            .servers
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| CoordinatorError::UnknownServer(id.to_string()))?;
        Ok(self.servers.remove(i))
    }

    pub fn get(&self, id: &str) -> Option<&ServerDescriptor> {
        self.servers.iter().find(|s| s.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.servers.is_empty()
    }

    /// Records an outcome and returns whether the server is now removed.
    pub fn update_health(&mut self, id: &str, outcome: Outcome) -> Result<bool> {
        let policy = self.policy;
        let server = self
            .servers
            .iter_mut()
            .find(|s| s.id == id)
            .ok_or_else(|| CoordinatorError::UnknownServer(id.to_string()))?;
        server.health.record(outcome, &policy);
        Ok(server.health.removed)
    }

    /// Applies logged outcomes in order.
    pub fn replay<'a>(&mut self, events: impl IntoIterator<Item = &'a HealthEvent>) -> Result<()> {
        for e in events {
            self.update_health(&e.server_id, e.outcome)?;
        }
        Ok(())
    }

    /// Up to `k` healthy servers in the hinted region, or up to `k` healthy
    /// servers from anywhere when the region has none.
    pub fn candidate_pool(&self, region_hint: &str, k: usize) -> Result<Vec<ServerDescriptor>> {
        if self.servers.is_empty() {
            return Err(CoordinatorError::NoServers(Vec::new()));
        }
        let healthy: Vec<&ServerDescriptor> = self.servers.iter().filter(|s| !s.health.removed).collect();
        if healthy.is_empty() {
            let reasons = self
                .servers
                .iter()
                .map(|s| (s.id.clone(), "removed by health policy".to_string()))
                .collect();
            return Err(CoordinatorError::NoServers(reasons));
        }
        let local: Vec<&ServerDescriptor> = healthy.iter().copied().filter(|s| s.in_region(region_hint)).collect();
        let pool = if local.is_empty() { healthy } else { local };
        Ok(pool.into_iter().take(k).cloned().collect())
    }
}

/// Anything that can measure round trips to a server.
pub trait Prober {
    fn probe(&mut self, server: &ServerDescriptor, count: u32) -> std::result::Result<LatencyStats, String>;
}

impl Prober for Engine {
    fn probe(&mut self, server: &ServerDescriptor, count: u32) -> std::result::Result<LatencyStats, String> {
        let interval = Duration::from_millis(self.config.probe_interval_ms);
        self.probe_latency(&server.address, count.max(MIN_PROBES), interval)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub server: ServerDescriptor,
    pub median_rtt_ms: f64,
    /// Every candidate's probe result, in candidate order.
    pub probes: Vec<(String, std::result::Result<LatencyStats, String>)>,
}

pub const MIN_PROBES_PER_CANDIDATE: u32 = 3;

/// Picks the candidate with the lowest median RTT. Ties go to the healthier
/// server, then the smaller id.
pub fn select_server(
    candidates: &[ServerDescriptor],
    probes_per_candidate: u32,
    prober: &mut dyn Prober,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(CoordinatorError::NoServers(Vec::new()));
    }
    if probes_per_candidate < MIN_PROBES_PER_CANDIDATE {
        return Err(CoordinatorError::InvalidArgument(format!(
            "need at least {MIN_PROBES_PER_CANDIDATE} probes per candidate"
        )));
    }
    let mut probes = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, &ServerDescriptor)> = None;
    for c in candidates {
        let result = prober.probe(c, probes_per_candidate);
        if let Ok(stats) = &result {
            if let Some(m) = stats.median_ms() {
                let better = match best {
                    None => true,
                    Some((bm, b)) => rank(m, c, bm, b) == Ordering::Less,
                };
                if better {
                    best = Some((m, c));
                }
            }
        }
        probes.push((c.id.clone(), result));
    }
    match best {
        Some((median_rtt_ms, server)) => Ok(Selection {
            server: server.clone(),
            median_rtt_ms,
            probes,
        }),
        None => {
            let reasons = probes
                .into_iter()
                .map(|(id, r)| (id, r.err().unwrap_or_else(|| "no probe answered".into())))
                .collect();
            Err(CoordinatorError::NoServers(reasons))
        }
    }
}

fn rank(m: f64, s: &ServerDescriptor, other_m: f64, other: &ServerDescriptor) -> Ordering {
    m.total_cmp(&other_m)
        .then_with(|| other.health.score().total_cmp(&s.health.score()))
        .then_with(|| s.id.cmp(&other.id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn server(id: &str, loc: &str) -> ServerDescriptor {
        ServerDescriptor::new(id, format!("{id}.example:7777"), loc)
    }

    fn registry() -> Registry {
        let mut r = Registry::default();
        for (id, loc) in [("nj1", "NJ"), ("nj2", "Newark, NJ"), ("ny1", "NY"), ("nj3", "nj"), ("ny2", "New York, NY")] {
            r.add(server(id, loc)).unwrap();
        }
        r
    }

    struct Table(HashMap<String, Vec<f64>>);

    impl Prober for Table {
        fn probe(&mut self, s: &ServerDescriptor, count: u32) -> std::result::Result<LatencyStats, String> {
            match self.0.get(&s.id) {
                Some(rtts) => LatencyStats::new(rtts.clone(), u64::from(count).max(rtts.len() as u64))
                    .map_err(|e| e.to_string()),
                None => Err("connection refused".into()),
            }
        }
    }

    fn table(entries: &[(&str, f64)]) -> Table {
        Table(entries.iter().map(|(id, m)| (id.to_string(), vec![*m; 3])).collect())
    }

    #[test]
    fn region_match_takes_precedence() {
        let pool = registry().candidate_pool("NJ", 3).unwrap();
        let ids: Vec<_> = pool.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["nj1", "nj2", "nj3"]);
    }

    #[test]
    fn unknown_region_falls_back_to_everything() {
        assert_eq!(registry().candidate_pool("TX", 10).unwrap().len(), 5);
        assert_eq!(registry().candidate_pool("TX", 2).unwrap().len(), 2);
    }

    #[test]
    fn removed_servers_leave_the_pool() {
        let mut r = registry();
        for _ in 0..5 {
            r.update_health("nj2", Outcome::Unreachable).unwrap();
        }
        let ids: Vec<_> = r.candidate_pool("NJ", 3).unwrap().into_iter().map(|s| s.id).collect();
        assert_eq!(ids, ["nj1", "nj3"]);
    }

    #[test]
    fn empty_registry_has_no_servers() {
        assert!(matches!(Registry::default().candidate_pool("NJ", 3), Err(CoordinatorError::NoServers(_))));
    }

    #[test]
    fn duplicate_and_unknown_ids() {
        let mut r = registry();
        assert!(matches!(r.add(server("nj1", "x")), Err(CoordinatorError::DuplicateServer(_))));
        assert!(matches!(r.update_health("zz", Outcome::Ok), Err(CoordinatorError::UnknownServer(_))));
        assert!(r.remove("zz").is_err());
        assert_eq!(r.remove("ny1").unwrap().id, "ny1");
    }

    #[test]
    fn lowest_rtt_wins() {
        let c = vec![server("A", "x"), server("B", "x"), server("C", "x")];
        let sel = select_server(&c, 5, &mut table(&[("A", 12.0), ("B", 5.0), ("C", 30.0)])).unwrap();
        assert_eq!(sel.server.id, "B");
        assert_eq!(sel.median_rtt_ms, 5.0);
    }

    #[test]
    fn nearer_label_does_not_beat_lower_rtt() {
        let c = vec![server("near", "Newark, NJ"), server("far", "Chicago, IL")];
        let sel = select_server(&c, 5, &mut table(&[("near", 40.0), ("far", 9.0)])).unwrap();
        assert_eq!(sel.server.id, "far");
    }

    #[test]
    fn ties_go_to_health_then_id() {
        let mut sick = server("a", "x");
        let policy = HealthPolicy::default();
        sick.health.record(Outcome::Underperformed, &policy);
        let c = vec![sick, server("c", "x"), server("b", "x")];
        let sel = select_server(&c, 5, &mut table(&[("a", 7.0), ("b", 7.0), ("c", 7.0)])).unwrap();
        assert_eq!(sel.server.id, "b");
    }

    #[test]
    fn all_unreachable_lists_reasons() {
        let c = vec![server("a", "x"), server("b", "x")];
        match select_server(&c, 5, &mut table(&[])) {
            Err(CoordinatorError::NoServers(r)) => assert_eq!(r.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_probes_rejected() {
        let c = vec![server("a", "x")];
        assert!(select_server(&c, 2, &mut table(&[("a", 1.0)])).is_err());
    }

    #[test]
    fn five_failures_remove() {
        let mut h = HealthWindow::default();
        let p = HealthPolicy::default();
        for i in 0..5 {
            assert!(!h.removed, "removed after {i}");
            h.record(Outcome::Unreachable, &p);
        }
        assert!(h.removed);
    }

    #[test]
    fn four_failures_then_oks_stay() {
        let mut h = HealthWindow::default();
        let p = HealthPolicy::default();
        for _ in 0..4 {
            h.record(Outcome::Underperformed, &p);
        }
        for _ in 0..16 {
            h.record(Outcome::Ok, &p);
        }
        assert!(!h.removed);
        assert_eq!(h.outcomes.len(), 20);
    }

    #[test]
    fn ten_oks_restore() {
        let mut h = HealthWindow::default();
        let p = HealthPolicy::default();
        for _ in 0..5 {
            h.record(Outcome::Unreachable, &p);
        }
        for i in 0..10 {
            assert!(h.removed, "restored after {i}");
            h.record(Outcome::Ok, &p);
        }
        assert!(!h.removed);
        // A single later failure does not remove it again.
        h.record(Outcome::Unreachable, &p);
        assert!(!h.removed);
    }

    #[test]
    fn window_is_bounded() {
        let mut h = HealthWindow::default();
        let p = HealthPolicy::default();
        for _ in 0..100 {
            h.record(Outcome::Ok, &p);
        }
        assert_eq!(h.outcomes.len(), p.window);
    }
}
