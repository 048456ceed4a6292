#![allow(dead_code)]

use std::collections::BTreeSet;

use chrono::{DateTime, TimeZone, Utc};
use proptest::prelude::*;
use speedlab::record::{MeasurementResult, Methodology, Origin, SimulationSetup};
use speedlab_core::coordinator::{Outcome, ServerDescriptor};
use speedlab_core::engine::{
    CrossTraffic, Direction, EngineConfig, Flag, RawTestRecord, TargetRef, TestSpec,
};
use speedlab_core::flowmodel::{FlowParams, LinkModel};
use speedlab_core::metrics::LatencyStats;
use speedlab_core::responder::wire::{LoadReport, Nonce, TransferSummary};
use speedlab_core::trace::{Sample, ThroughputTrace, TraceSource};

pub const ALL_FLAGS: [Flag; 6] = [
    Flag::CrossTrafficDetected,
    Flag::CrossTrafficUnknown,
    Flag::DegenerateTrace,
    Flag::ServerLoadReported,
    Flag::BelowRecommendedConnections,
    Flag::Partial,
];

fn arb_trace() -> impl Strategy<Value = ThroughputTrace> {
    (1u64..500, prop::collection::vec((0.0f64..1.0, 1.0f64..5e7), 2..40), any::<bool>()).prop_map(
        |(interval, steps, measured)| {
            let mut t = 0.0;
            let mut bytes = 0.0;
            let mut samples = vec![Sample(0.0, 0.0)];
            for (jitter, add) in steps {
                t += interval as f64 * (0.5 + jitter);
                bytes += add;
                samples.push(Sample(t, bytes));
            }
            let source = if measured { TraceSource::Measured } else { TraceSource::Simulated };
            ThroughputTrace::new(interval as f64, source, None, samples).expect("valid trace")
        },
    )
}

fn arb_latency() -> impl Strategy<Value = Option<LatencyStats>> {
    prop::option::of((prop::collection::vec(0.01f64..800.0, 0..20), 0u64..5))
        .prop_map(|o| o.map(|(rtts, lost)| LatencyStats::new(rtts.clone(), rtts.len() as u64 + lost).unwrap()))
}

fn arb_cross() -> impl Strategy<Value = CrossTraffic> {
    prop_oneof![
        (0.0f64..1e9).prop_map(|bps| CrossTraffic::Measured { bps }),
        "[a-z ]{0,20}".prop_map(|reason| CrossTraffic::Unknown { reason }),
        Just(CrossTraffic::NotApplicable),
    ]
}

fn arb_server() -> impl Strategy<Value = ServerDescriptor> {
    (
        "[a-z0-9-]{1,12}",
        "[a-z0-9.:]{1,20}",
        "[A-Za-z, ]{0,16}",
        "[a-z]{0,8}",
        prop::option::of(1e6f64..1e11),
        prop::collection::vec(0u8..3, 0..20),
    )
        .prop_map(|(id, addr, loc, net, cap, outcomes)| {
            let mut s = ServerDescriptor::new(id, addr, loc);
            s.network = net;
            s.capacity_hint_bps = cap;
            for o in outcomes {
                let o = [Outcome::Ok, Outcome::Underperformed, Outcome::Unreachable][o as usize];
                s.health.record(o, &Default::default());
            }
            s
        })
}

fn arb_time() -> impl Strategy<Value = DateTime<Utc>> {
    (1_500_000_000i64..2_000_000_000, 0u32..1_000_000_000)
        .prop_map(|(s, ns)| Utc.timestamp_opt(s, ns).single().unwrap())
}

/// Records shaped like real output but with randomized contents in every
/// field the schema carries.
pub fn arb_record() -> impl Strategy<Value = MeasurementResult> {
    let spec_parts = (any::<bool>(), 1u16..32, 1u64..100_000, any::<bool>(), any::<[u8; 16]>());
    let extras = (
        arb_latency(),
        arb_cross(),
        prop::collection::btree_set(0usize..6, 0..4),
        prop::option::of((0u32..10, 1u32..10)),
        prop::option::of((any::<u64>(), any::<u32>(), any::<u16>())),
    );
    (spec_parts, arb_trace(), extras, arb_server(), arb_time(), arb_time(), any::<bool>(), 0u8..3).prop_map(
        |((upload, n, duration, warm, nonce), trace, (latency, cross, flags, load, summary), server, ts, started, scheduled, meth)| {
            let spec = TestSpec {
                direction: if upload { Direction::Upload } else { Direction::Download },
                duration_ms: duration,
                n_connections: n,
                sample_interval_ms: trace.sample_interval_ms as u64,
                warmup_excluded: warm,
                target: TargetRef {
                    server_id: server.id.clone(),
                    address: server.address.clone(),
                    capacity_hint_bps: server.capacity_hint_bps,
                },
                nonce: Nonce(nonce),
            };
            let per_conn: Vec<ThroughputTrace> = (0..n).map(|_| trace.scaled(1.0 / f64::from(n))).collect();
            let mut raw = RawTestRecord::simulated(spec, started, per_conn, trace);
            raw.latency = latency;
            raw.cross_traffic = cross;
            raw.flags = flags.into_iter().map(|i| ALL_FLAGS[i]).collect::<BTreeSet<_>>();
            raw.server_load = load.map(|(active, max)| LoadReport { active_tests: active, max_tests: max });
            raw.server_summary = summary.map(|(bytes, duration_ms, connections)| TransferSummary {
                bytes,
                duration_ms,
                connections,
            });
            let methodology = match meth {
                0 => Methodology::standard(),
                1 => Methodology { engine: Some(EngineConfig::default()), ..Methodology::standard() },
                _ => Methodology {
                    simulation: Some(SimulationSetup {
                        link: LinkModel::new(2e8, 20.0, 0.001).unwrap(),
                        flow: FlowParams::default(),
                    }),
                    ..Methodology::standard()
                },
            };
            let origin = if scheduled { Origin::Scheduled } else { Origin::User };
            MeasurementResult::build(ts, origin, raw, server, methodology).expect("record builds")
        },
    )
}

/// Serialize, parse, serialize. Returns an error message on any mismatch.
pub fn round_trip(r: &MeasurementResult) -> Result<(), String> {
    let first = r.to_line().map_err(|e| e.to_string())?;
    let parsed = MeasurementResult::from_line(&first).map_err(|e| e.to_string())?;
    let second = parsed.to_line().map_err(|e| e.to_string())?;
    if first != second {
        return Err(format!("serialization differs:\n{first}\n{second}"));
    }
    if &parsed != r {
        return Err("parsed record differs from original".into());
    }
    parsed.verify().map_err(|e| e.to_string())
}
