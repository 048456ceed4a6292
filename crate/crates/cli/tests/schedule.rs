use std::cell::RefCell;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use speedlab::commands::{cmd_schedule, Context, Format, RunOptions};
use speedlab::error::CliError;
use speedlab::record::Origin;
use speedlab::registry::RegistryFile;
use speedlab::scheduler::{run_schedule, Clock, MISS_TOLERANCE};
use speedlab::store::Store;
use speedlab_core::coordinator::{generate_schedule, Schedule};

/// Jumps straight to each requested time. Optionally "sleeps through" an
/// interval: any wait that ends inside it wakes at its end instead.
struct FakeClock {
    now: NaiveDateTime,
    asleep: Option<(NaiveDateTime, NaiveDateTime)>,
}

impl FakeClock {
    fn at(now: NaiveDateTime) -> Self {
        Self { now, asleep: None }
    }
}

impl Clock for FakeClock {
    fn now(&self) -> NaiveDateTime {
        self.now
    }

    fn sleep_until(&mut self, t: NaiveDateTime) {
        let mut wake = t.max(self.now);
        if let Some((from, to)) = self.asleep {
            if wake >= from && wake < to {
                wake = to;
            }
        }
        self.now = wake;
    }
}

fn day() -> NaiveDate {
    NaiveDate::from_ymd_opt(2026, 5, 4).unwrap()
}

fn midnight(d: NaiveDate) -> NaiveDateTime {
    d.and_time(NaiveTime::MIN)
}

fn schedule(seed: u64) -> Schedule {
    Schedule {
        seed,
        ..Schedule::default()
    }
}

#[test]
fn fires_every_slot_at_its_time() {
    let mut clock = FakeClock::at(midnight(day()));
    let mut fired = Vec::new();
    let log = run_schedule(&schedule(7), Some(3), &mut clock, &mut |slot| {
        fired.push(slot.at);
        Ok(())
    })
    .unwrap();
    assert_eq!(log.fired.len(), 12);
    assert!(log.missed.is_empty() && log.failed.is_empty());
    let mut expected = Vec::new();
    for i in 0..3 {
        let d = day() + Duration::days(i);
        expected.extend(generate_schedule(&schedule(7), d).unwrap().into_iter().map(|s| s.at));
    }
    assert_eq!(fired, expected);
    assert_eq!(log.fired, expected);
}

#[test]
fn same_seed_same_times_different_seed_different_times() {
    let times = |seed| {
        let mut clock = FakeClock::at(midnight(day()));
        run_schedule(&schedule(seed), Some(2), &mut clock, &mut |_| Ok(())).unwrap().fired
    };
    assert_eq!(times(11), times(11));
    assert_ne!(times(11), times(12));
}

#[test]
fn slots_before_start_up_are_not_run_or_missed() {
    let slots = generate_schedule(&schedule(3), day()).unwrap();
    let start = slots[1].at + Duration::seconds(1);
    let mut clock = FakeClock::at(start);
    let log = run_schedule(&schedule(3), Some(1), &mut clock, &mut |_| Ok(())).unwrap();
    assert_eq!(log.fired, slots[2..].iter().map(|s| s.at).collect::<Vec<_>>());
    assert!(log.missed.is_empty());
}

#[test]
fn asleep_gap_is_logged_and_not_back_filled() {
    let slots = generate_schedule(&schedule(5), day()).unwrap();
    // Asleep from just before the second slot until just after the third.
    let from = slots[1].at - Duration::seconds(1);
    let to = slots[2].at + MISS_TOLERANCE + Duration::seconds(1);
    let mut clock = FakeClock {
        now: midnight(day()),
        asleep: Some((from, to)),
    };
    let calls = RefCell::new(Vec::new());
    let log = run_schedule(&schedule(5), Some(1), &mut clock, &mut |slot| {
        calls.borrow_mut().push(slot.at);
        Ok(())
    })
    .unwrap();
    assert_eq!(log.missed, vec![slots[1].at, slots[2].at]);
    assert_eq!(log.fired, vec![slots[0].at, slots[3].at]);
    assert_eq!(*calls.borrow(), log.fired);
}

#[test]
fn failures_are_logged_and_the_schedule_continues() {
    let mut clock = FakeClock::at(midnight(day()));
    let mut n = 0;
    let log = run_schedule(&schedule(1), Some(1), &mut clock, &mut |_| {
        n += 1;
        if n == 2 {
            Err(CliError::Config("boom".into()))
        } else {
            Ok(())
        }
    })
    .unwrap();
    assert_eq!(log.fired.len(), 3);
    assert_eq!(log.failed.len(), 1);
    assert!(log.failed[0].1.contains("boom"));
}

#[test]
fn infeasible_schedule_refuses_to_start() {
    let mut clock = FakeClock::at(midnight(day()));
    let s = Schedule {
        tests_per_day: 10_000,
        ..Schedule::default()
    };
    let mut called = false;
    assert!(run_schedule(&s, Some(1), &mut clock, &mut |_| {
        called = true;
        Ok(())
    })
    .is_err());
    assert!(!called);
}

#[test]
fn simulated_schedule_stores_four_scheduled_results_per_day() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context {
        store: Store::new(dir.path().join("results.jsonl")),
        registry: RegistryFile::new(dir.path().join("servers.json")),
        format: Format::Human,
    };
    let opts = RunOptions {
        simulate: Some("link=100mbps,rtt=20ms,loss=0".into()),
        duration_s: 2.0,
        ..RunOptions::default()
    };
    let mut clock = FakeClock::at(midnight(day()));
    let mut out = Vec::new();
    let log = cmd_schedule(&ctx, &schedule(9), &opts, Some(2), &mut clock, &mut out).unwrap();
    assert_eq!(log.fired.len(), 8);
    let stored = ctx.store.read().unwrap().records;
    assert_eq!(stored.len(), 8);
    assert!(stored.iter().all(|r| r.origin == Origin::Scheduled));
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 8);
}
