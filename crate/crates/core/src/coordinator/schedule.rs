//! Randomized daily test times, split between a peak window and the rest of
//! the day.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CoordinatorError, Result};

const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub tests_per_day: u32,
    pub peak_start: NaiveTime,
    pub peak_end: NaiveTime,
    pub fraction_peak: f64,
    pub seed: u64,
    /// Tests are spaced at least twice this far apart.
    pub test_duration_s: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            tests_per_day: 4,
            peak_start: NaiveTime::from_hms_opt(19, 0, 0).expect("valid time"),
            peak_end: NaiveTime::from_hms_opt(23, 0, 0).expect("valid time"),
            fraction_peak: 0.5,
            seed: 0,
            test_duration_s: 10,
        }
    }
}

impl Schedule {
    pub fn spacing_ms(&self) -> i64 {
        2 * i64::from(self.test_duration_s) * 1000
    }

    pub fn peak_count(&self) -> u32 {
        let n = f64::from(self.tests_per_day) * self.fraction_peak;
        ((n - 1e-9).ceil().max(0.0) as u32).min(self.tests_per_day)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoordinatorError::InvalidArgument(m.to_string()));
        if self.tests_per_day == 0 {
            return bad("tests_per_day must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.fraction_peak) {
            return bad("fraction_peak must lie in [0, 1]");
        }
        if self.peak_start >= self.peak_end {
            return bad("peak window must start before it ends, within one day");
        }
        if self.test_duration_s == 0 {
            return bad("test duration must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScheduledTest {
    pub at: NaiveDateTime,
    pub peak: bool,
}

fn ms_of(t: NaiveTime) -> i64 {
    (t - NaiveTime::MIN).num_milliseconds()
}

/// Places `count` points uniformly in the union of `segments` (ms of day)
/// with at least `gap` between neighbours. Each segment is already shrunk
/// by half a gap at both ends, so points in different windows are also far
/// enough apart.
fn place(rng: &mut ChaCha8Rng, segments: &[(i64, i64)], count: u32, gap: i64, what: &str) -> Result<Vec<i64>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let segments: Vec<(i64, i64)> = segments.iter().copied().filter(|(a, b)| b >= a).collect();
    let total: i64 = segments.iter().map(|(a, b)| b - a).sum();
    let free = total - i64::from(count - 1) * gap;
    if segments.is_empty() || free < 0 {
        return Err(CoordinatorError::InfeasibleSchedule(format!(
            "{count} {what} tests need {} s between them but the window holds {} s",
            gap / 1000,
            total.max(0) / 1000
        )));
    }
    // Sorted uniform draws on [0, free], then spread out by the gap: a
    // uniform sample among all spacing-respecting arrangements.
    let mut draws: Vec<i64> = (0..count).map(|_| rng.gen_range(0..=free)).collect();
    draws.sort_unstable();
    Ok(draws
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut v = x + i as i64 * gap;
            // Map the concatenated offset back onto the segments.
            for &(a, b) in &segments {
                if v <= b - a {
                    return a + v;
                }
                v -= b - a;
            }
            unreachable!("offset within total length")
        })
        .collect())
}

/// Test times for `day`, in local time, sorted.
pub fn generate_schedule(s: &Schedule, day: NaiveDate) -> Result<Vec<ScheduledTest>> {
    s.validate()?;
    let gap = s.spacing_ms();
    let half = gap / 2;
    let (ps, pe) = (ms_of(s.peak_start), ms_of(s.peak_end));
    let peak = [(ps + half, pe - half)];
    let off_peak = [(half, ps - half), (pe + half, DAY_MS - half)];

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(day.num_days_from_ce() as u64);
    let n_peak = s.peak_count();
    let peak_ms = place(&mut rng, &peak, n_peak, gap, "peak")?;
    let off_ms = place(&mut rng, &off_peak, s.tests_per_day - n_peak, gap, "off-peak")?;

    let midnight = day.and_time(NaiveTime::MIN);
    let mut out: Vec<ScheduledTest> = peak_ms
        .into_iter()
        .map(|m| (m, true))
        .chain(off_ms.into_iter().map(|m| (m, false)))
        .map(|(m, peak)| ScheduledTest {
            at: midnight + Duration::milliseconds(m),
            peak,
        })
        .collect();
    out.sort();
    Ok(out)
}
