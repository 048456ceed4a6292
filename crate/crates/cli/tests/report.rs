use chrono::{Duration, TimeZone, Utc};
use proptest::prelude::*;
use speedlab::record::{MeasurementResult, Methodology, Origin};
use speedlab::report::{aggregate, Filters};
use speedlab_core::coordinator::ServerDescriptor;
use speedlab_core::engine::{Direction, Flag, RawTestRecord, TargetRef, TestSpec};
use speedlab_core::trace::{Sample, ThroughputTrace, TraceSource};

/// A record whose aggregate trace runs at a constant `mbps`.
fn record(mbps: f64, origin: Origin, server: &str, flags: &[Flag], minute: i64) -> MeasurementResult {
    let spec = TestSpec::new(Direction::Download, TargetRef::new(server, "127.0.0.1:7777"));
    let per_sample = mbps * 1e6 / 8.0 / 10.0;
    let samples = (0..=20).map(|i| Sample(i as f64 * 100.0, i as f64 * per_sample)).collect();
    let trace = ThroughputTrace::new(100.0, TraceSource::Measured, None, samples).unwrap();
    let t0 = Utc.with_ymd_and_hms(2026, 3, 1, 12, 0, 0).unwrap() + Duration::minutes(minute);
    let mut raw = RawTestRecord::simulated(spec, t0, vec![trace.clone()], trace);
    raw.flags.extend(flags.iter().copied());
    MeasurementResult::build(t0, origin, raw, ServerDescriptor::new(server, "127.0.0.1:7777", "Lab"), Methodology::standard())
        .unwrap()
}

#[test]
fn flagged_results_are_partitioned_out() {
    let mut rs: Vec<MeasurementResult> = (0..10).map(|i| record(100.0 + i as f64, Origin::User, "a", &[], i)).collect();
    rs.push(record(5.0, Origin::User, "a", &[Flag::CrossTrafficDetected], 20));
    rs.push(record(1.0, Origin::User, "a", &[Flag::DegenerateTrace, Flag::CrossTrafficDetected], 21));
    let report = aggregate(&rs, &Filters::default());
    assert_eq!(report.population, 12);
    assert_eq!(report.blocks.len(), 1);
    let b = &report.blocks[0];
    assert_eq!((b.population, b.included, b.excluded), (12, 10, 2));
    assert_eq!(b.exclusions.get(&Flag::CrossTrafficDetected), Some(&2));
    let dl = b.metrics.download_bps.as_ref().unwrap();
    assert_eq!(dl.count, 10);
    assert!(dl.p5 > 99e6, "flagged values leaked into the summary: {dl:?}");
}

#[test]
fn constant_population_has_collapsed_summary() {
    let rs: Vec<MeasurementResult> = (0..9).map(|i| record(250.0, Origin::User, "a", &[], i)).collect();
    let v = rs[0].report.download_bps.unwrap();
    let s = aggregate(&rs, &Filters::default()).blocks[0].metrics.download_bps.clone().unwrap();
    assert_eq!((s.median, s.mean, s.p5, s.p95), (v, v, v, v));
}

#[test]
fn scheduled_and_user_results_stay_separate() {
    let rs = vec![
        record(100.0, Origin::Scheduled, "a", &[], 0),
        record(100.0, Origin::Scheduled, "a", &[], 1),
        record(900.0, Origin::User, "a", &[], 2),
    ];
    let report = aggregate(&rs, &Filters::default());
    assert_eq!(report.blocks.len(), 2);
    let sched = report.blocks.iter().find(|b| b.origin == Origin::Scheduled).unwrap();
    let user = report.blocks.iter().find(|b| b.origin == Origin::User).unwrap();
    assert_eq!((sched.population, user.population), (2, 1));
    assert!(sched.metrics.download_bps.as_ref().unwrap().p95 < 101e6);
    assert!(user.metrics.download_bps.as_ref().unwrap().p5 > 899e6);
}

#[test]
fn filters_narrow_the_population() {
    let rs = vec![
        record(100.0, Origin::User, "a", &[], 0),
        record(200.0, Origin::User, "b", &[], 10),
        record(300.0, Origin::Scheduled, "b", &[], 20),
    ];
    let by_server = Filters { server_id: Some("b".into()), ..Filters::default() };
    assert_eq!(aggregate(&rs, &by_server).population, 2);
    let by_origin = Filters { origin: Some(Origin::Scheduled), ..Filters::default() };
    assert_eq!(aggregate(&rs, &by_origin).population, 1);
    let since = Filters { since: Some(rs[1].timestamp), ..Filters::default() };
    assert_eq!(aggregate(&rs, &since).population, 2);
    let upload = Filters { direction: Some(Direction::Upload), ..Filters::default() };
    let empty = aggregate(&rs, &upload);
    assert_eq!(empty.population, 0);
    assert!(empty.notice.is_some());
    assert!(empty.render_human().contains("no results"));
}

#[test]
fn disclosure_names_method_and_exclusions() {
    let rs = vec![record(100.0, Origin::User, "a", &[], 0)];
    let b = &aggregate(&rs, &Filters::default()).blocks[0];
    assert_eq!(b.disclosure.method, rs[0].report.method);
    assert!(b.disclosure.excluded_flags.contains(&Flag::CrossTrafficDetected));
    assert_eq!(b.disclosure.connection_counts, vec![rs[0].spec.n_connections]);
    let text = aggregate(&rs, &Filters::default()).render_human();
    assert!(text.contains("steady_state"), "{text}");
}

proptest! {
    #[test]
    fn partition_always_adds_up(rows in prop::collection::vec((1.0f64..1000.0, 0u8..4, any::<bool>()), 0..40)) {
        let rs: Vec<MeasurementResult> = rows
            .iter()
            .enumerate()
            .map(|(i, &(mbps, f, sched))| {
                let flags: &[Flag] = match f {
                    0 => &[],
                    1 => &[Flag::CrossTrafficDetected],
                    2 => &[Flag::DegenerateTrace],
                    _ => &[Flag::BelowRecommendedConnections],
                };
                let origin = if sched { Origin::Scheduled } else { Origin::User };
                record(mbps, origin, "a", flags, i as i64)
            })
            .collect();
        let report = aggregate(&rs, &Filters::default());
        prop_assert_eq!(report.population, rs.len());
        prop_assert_eq!(report.blocks.iter().map(|b| b.population).sum::<usize>(), rs.len());
        for b in &report.blocks {
            prop_assert_eq!(b.included + b.excluded, b.population);
            prop_assert_eq!(b.exclusions.values().sum::<usize>(), b.excluded);
            if let Some(s) = &b.metrics.download_bps {
                prop_assert!(s.p5 <= s.median && s.median <= s.p95);
                prop_assert!(s.p5 <= s.mean && s.mean <= s.p95);
            }
        }
    }
}
