//! Interface byte counters used to estimate cross traffic.

use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Something that reports a monotonically increasing count of bytes seen on
/// the measured path.
pub trait ByteCounterSource: Send + Sync {
    fn total_bytes(&self) -> io::Result<u64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterDirection {
    Receive,
    Transmit,
    Both,
}

/// Reads Linux `/proc/net/dev`-format statistics.
#[derive(Debug, Clone)]
pub struct InterfaceCounters {
    pub path: PathBuf,
    /// `None` selects every interface except loopback.
    pub interfaces: Option<Vec<String>>,
    pub direction: CounterDirection,
}

impl InterfaceCounters {
    pub fn host_default() -> Self {
        Self {
            path: PathBuf::from("/proc/net/dev"),
            interfaces: None,
            direction: CounterDirection::Both,
        }
    }

    pub fn interface(name: &str, direction: CounterDirection) -> Self {
        Self {
            path: PathBuf::from("/proc/net/dev"),
            interfaces: Some(vec![name.to_string()]),
            direction,
        }
    }

    fn selected(&self, name: &str) -> bool {
        match &self.interfaces {
            Some(list) => list.iter().any(|n| n == name),
            None => name != "lo",
        }
    }
}

/// Sums the selected byte columns over the selected interfaces. Fails when
/// none of the requested interfaces are present.
pub fn parse_proc_net_dev(
    text: &str,
    select: impl Fn(&str) -> bool,
    direction: CounterDirection,
) -> io::Result<u64> {
    let mut total = 0u64;
    let mut matched = false;
    for line in text.lines() {
        let Some((name, rest)) = line.split_once(':') else {
            continue;
        };
        let name = name.trim();
        if !select(name) {
            continue;
        }
        let fields: Vec<u64> = rest
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{name}: {e}")))?;
        if fields.len() < 9 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{name}: expected 16 counters, got {}", fields.len()),
            ));
        }
        matched = true;
        total += match direction {
            CounterDirection::Receive => fields[0],
            CounterDirection::Transmit => fields[8],
            CounterDirection::Both => fields[0] + fields[8],
        };
    }
    if matched {
        Ok(total)
    } else {
        Err(io::Error::new(io::ErrorKind::NotFound, "no matching interface"))
    }
}

impl ByteCounterSource for InterfaceCounters {
    fn total_bytes(&self) -> io::Result<u64> {
        let text = fs::read_to_string(&self.path)?;
        parse_proc_net_dev(&text, |n| self.selected(n), self.direction)
    }
}

/// A counter the caller drives directly.
#[derive(Debug, Clone, Default)]
pub struct SharedCounter(pub Arc<AtomicU64>);

impl SharedCounter {
    pub fn add(&self, bytes: u64) {
        self.0.fetch_add(bytes, Ordering::SeqCst);
    }
}

impl ByteCounterSource for SharedCounter {
    fn total_bytes(&self) -> io::Result<u64> {
        Ok(self.0.load(Ordering::SeqCst))
    }
}
