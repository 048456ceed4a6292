//! Runs a schedule day after day against an injectable clock.

use std::thread;

use chrono::{Duration, Local, NaiveDateTime};
use log::{debug, info, warn};
use speedlab_core::coordinator::{generate_schedule, Schedule, ScheduledTest};

use crate::error::Result;

/// How late a firing may start before it counts as missed.
pub const MISS_TOLERANCE: Duration = Duration::seconds(60);

pub trait Clock {
    fn now(&self) -> NaiveDateTime;
    fn sleep_until(&mut self, t: NaiveDateTime);
}

/// Local wall-clock time.
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> NaiveDateTime {
        Local::now().naive_local()
    }

    fn sleep_until(&mut self, t: NaiveDateTime) {
        // Sleep in short steps so a suspended host is noticed on wake-up.
        loop {
            let left = t - self.now();
            if left <= Duration::zero() {
                return;
            }
            let step = left.min(Duration::seconds(30)).to_std().unwrap_or_default();
            thread::sleep(step);
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ScheduleLog {
    pub fired: Vec<NaiveDateTime>,
    /// Firings whose time passed while the host was busy or asleep.
    pub missed: Vec<NaiveDateTime>,
    pub failed: Vec<(NaiveDateTime, String)>,
}

/// Fires every scheduled test from now on, for `days` days or forever.
/// Missed firings are logged and never made up later; failed firings are
/// logged and do not stop the schedule.
pub fn run_schedule(
    schedule: &Schedule,
    days: Option<u32>,
    clock: &mut dyn Clock,
    fire: &mut dyn FnMut(&ScheduledTest) -> Result<()>,
) -> Result<ScheduleLog> {
    let start = clock.now();
    // Refuse to start on an infeasible schedule.
    generate_schedule(schedule, start.date())?;
    let mut log = ScheduleLog::default();
    let mut day = start.date();
    let mut done = 0u32;
    while days.is_none_or(|d| done < d) {
        for slot in generate_schedule(schedule, day)? {
            if slot.at < start {
                debug!("{} precedes start-up; not run", slot.at);
                continue;
            }
            if clock.now() - slot.at > MISS_TOLERANCE {
                warn!("missed scheduled test at {}", slot.at);
                log.missed.push(slot.at);
                continue;
            }
            clock.sleep_until(slot.at);
            let late = clock.now() - slot.at;
            if late > MISS_TOLERANCE {
                warn!("missed scheduled test at {} (woke {} s late)", slot.at, late.num_seconds());
                log.missed.push(slot.at);
                continue;
            }
            info!("running scheduled test for {}", slot.at);
            match fire(&slot) {
                Ok(()) => log.fired.push(slot.at),
                Err(e) => {
                    warn!("scheduled test at {} failed: {e}", slot.at);
                    log.failed.push((slot.at, e.to_string()));
                }
            }
        }
        day = day.succ_opt().expect("date in range");
        done += 1;
    }
    Ok(log)
}
