//! Parsing of `link=200mbps,rtt=20ms,loss=0` model descriptions.

use speedlab_core::flowmodel::LinkModel;

use crate::error::{CliError, Result};

/// Parses a rate such as `200mbps`, `1gbps`, `5e6` (bits per second).
pub fn parse_rate(s: &str) -> Result<f64> {
    let lower = s.trim().to_ascii_lowercase();
    let units = [("gbps", 1e9), ("mbps", 1e6), ("kbps", 1e3), ("bps", 1.0)];
    let (num, scale) = units
        .iter()
        .find_map(|(u, k)| lower.strip_suffix(u).map(|n| (n.to_string(), *k)))
        .unwrap_or((lower.clone(), 1.0));
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("bad rate {s:?}")))?;
    Ok(v * scale)
}

/// Parses a duration in milliseconds from `20ms`, `0.02s` or a bare number
/// of milliseconds.
pub fn parse_millis(s: &str) -> Result<f64> {
    let lower = s.trim().to_ascii_lowercase();
    let (num, scale) = if let Some(n) = lower.strip_suffix("ms") {
        (n, 1.0)
    } else if let Some(n) = lower.strip_suffix('s') {
        (n, 1000.0)
    } else {
        (lower.as_str(), 1.0)
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("bad duration {s:?}")))?;
    Ok(v * scale)
}

/// A fraction (`0.01`) or a percentage (`1%`).
pub fn parse_fraction(s: &str) -> Result<f64> {
    let t = s.trim();
    let (num, scale) = match t.strip_suffix('%') {
        Some(n) => (n, 0.01),
        None => (t, 1.0),
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("bad fraction {s:?}")))?;
    Ok(v * scale)
}

pub fn parse_link(s: &str) -> Result<LinkModel> {
    let (mut rate, mut rtt, mut loss, mut mss) = (None, None, 0.0, None);
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got {part:?}")))?;
        match key.trim() {
            "link" | "rate" | "capacity" => rate = Some(parse_rate(value)?),
            "rtt" => rtt = Some(parse_millis(value)?),
            "loss" => loss = parse_fraction(value)?,
            "mss" => {
                mss = Some(value.trim().parse().map_err(|_| CliError::Config(format!("bad mss {value:?}")))?)
            }
            other => return Err(CliError::Config(format!("unknown link parameter {other:?}"))),
        }
    }
    let rate = rate.ok_or_else(|| CliError::Config("link needs link=<rate>".into()))?;
    let rtt = rtt.ok_or_else(|| CliError::Config("link needs rtt=<time>".into()))?;
    let link = LinkModel::new(rate, rtt, loss)?;
    Ok(match mss {
        Some(m) => link.with_mss(m)?,
        None => link,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_form() {
        let l = parse_link("link=200mbps,rtt=20ms,loss=0").unwrap();
        assert_eq!((l.capacity_bps, l.rtt_ms, l.loss_rate), (200e6, 20.0, 0.0));
        let l = parse_link("link=1Gbps, rtt=0.04s, loss=1%, mss=9000").unwrap();
        assert_eq!((l.capacity_bps, l.rtt_ms, l.loss_rate, l.mss), (1e9, 40.0, 0.01, 9000));
    }

    #[test]
    fn rejects_incomplete_or_unknown() {
        assert!(parse_link("link=200mbps").is_err());
        assert!(parse_link("rtt=20ms").is_err());
        assert!(parse_link("link=200mbps,rtt=20ms,color=blue").is_err());
        assert!(parse_link("link=fast,rtt=20ms").is_err());
        assert!(parse_link("link=-5mbps,rtt=20ms").is_err());
    }
}
