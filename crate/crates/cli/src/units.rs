//! Quantities written as "<number> <unit>" strings.
//!
//! Frequencies are cyclic in the config ("34.5 kHz") and angular (rad/s)
//! once parsed. Counting rates are plain per-second values and refuse
//! "Hz", which would be ambiguous.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::Deserialize;
use spinfluor_core::units::hz;

fn split(s: &str) -> Result<(f64, &str), String> {
    let s = s.trim();
    let end = s
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_digit() || c == '.' || c == '+' || c == '-' || ((c == 'e' || c == 'E') && i > 0))
        })
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    // "e" directly followed by a letter starts a unit, not an exponent.
    let (num, unit) = s.split_at(end);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("cannot read a number from {s:?}"))?;
    if !value.is_finite() {
        return Err(format!("{s:?} is not finite"));
    }
    Ok((value, unit.trim()))
}

fn frequency_scale(unit: &str) -> Option<f64> {
    Some(match unit {
        "Hz" => 1.0,
        "kHz" => 1e3,
        "MHz" => 1e6,
        "GHz" => 1e9,
        _ => return None,
    })
}

fn time_scale(unit: &str) -> Option<f64> {
    Some(match unit {
        "s" => 1.0,
        "ms" => 1e-3,
        "us" | "µs" | "μs" => 1e-6,
        "ns" => 1e-9,
        "min" => 60.0,
        "h" => 3600.0,
        _ => return None,
    })
}

/// `v·k`, dividing by 1/k for sub-unit prefixes so that "80 us" is exactly 8e-5.
fn scaled(v: f64, k: f64) -> f64 {
    if k < 1.0 {
        v / (1.0 / k).round()
    } else {
        v * k
    }
}

/// `v/k`, the per-time counterpart of [`scaled`].
fn per_time(v: f64, k: f64) -> f64 {
    if k < 1.0 {
        v * (1.0 / k).round()
    } else {
        v / k
    }
}

/// Angular frequency (rad/s) from "<x> Hz|kHz|MHz|GHz" or "<x> rad/s".
pub fn parse_frequency(s: &str) -> Result<f64, String> {
    let (v, unit) = split(s)?;
    if unit == "rad/s" {
        return Ok(v);
    }
    frequency_scale(unit)
        .map(|k| hz(v * k))
        .ok_or_else(|| format!("{s:?}: expected a frequency unit (Hz, kHz, MHz, GHz, rad/s)"))
}

/// Seconds from "<x> s|ms|us|ns|min|h".
pub fn parse_time(s: &str) -> Result<f64, String> {
    let (v, unit) = split(s)?;
    time_scale(unit)
        .map(|k| scaled(v, k))
        .ok_or_else(|| format!("{s:?}: expected a time unit (s, ms, us, ns, min, h)"))
}

/// Events per second from "<x> /s", "<x> 1/s", "<x> s^-1" or "<x> /ms" etc.
pub fn parse_rate(s: &str) -> Result<f64, String> {
    let (v, unit) = split(s)?;
    let per = unit
        .strip_prefix("1/")
        .or_else(|| unit.strip_prefix('/'))
        .or_else(|| unit.strip_suffix("^-1"));
    match per.and_then(time_scale) {
        Some(k) => Ok(per_time(v, k)),
        None if frequency_scale(unit).is_some() => Err(format!(
            "{s:?}: counting rates take a per-time unit such as \"/s\"; Hz would be read as cyclic"
        )),
        None => Err(format!("{s:?}: expected a rate unit (/s, 1/s, s^-1)")),
    }
}

/// Angular frequency drift (rad/s per s) from "<x> <freq unit>/<time unit>".
pub fn parse_drift(s: &str) -> Result<f64, String> {
    let (v, unit) = split(s)?;
    let err = || format!("{s:?}: expected a drift such as \"1 kHz/min\"");
    let (f, t) = unit.split_once('/').ok_or_else(err)?;
    let (fk, tk) = (frequency_scale(f.trim()).ok_or_else(err)?, time_scale(t.trim()).ok_or_else(err)?);
    Ok(hz(v * fk) / tk)
}

macro_rules! quantity {
    ($name:ident, $parse:ident, $what:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name(pub f64);

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                struct V;
                impl Visitor<'_> for V {
                    type Value = $name;
                    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                        f.write_str($what)
                    }
                    fn visit_str<E: de::Error>(self, s: &str) -> Result<$name, E> {
                        $parse(s).map($name).map_err(E::custom)
                    }
                }
                d.deserialize_str(V)
            }
        }
    };
}

quantity!(Frequency, parse_frequency, "a frequency string such as \"34.5 kHz\"");
quantity!(Time, parse_time, "a duration string such as \"80 us\"");
quantity!(Rate, parse_rate, "a rate string such as \"150 /s\"");
quantity!(Drift, parse_drift, "a drift string such as \"1 kHz/min\"");

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn frequencies_are_angular() {
        assert_eq!(parse_frequency("34.5 kHz").unwrap(), TAU * 34.5e3);
        assert_eq!(parse_frequency("-788.1kHz").unwrap(), TAU * -788.1e3);
        assert_eq!(parse_frequency("7.7492 GHz").unwrap(), TAU * 7.7492e9);
        assert_eq!(parse_frequency("5 rad/s").unwrap(), 5.0);
        assert!(parse_frequency("34.5").is_err());
        assert!(parse_frequency("34.5 ms").is_err());
    }

    #[test]
    fn times_and_rates() {
        assert_eq!(parse_time("80 us").unwrap(), 80e-6);
        assert_eq!(parse_time("2.6 ms").unwrap(), 2.6e-3);
        assert_eq!(parse_time("150 min").unwrap(), 9000.0);
        assert_eq!(parse_time("1e-3 s").unwrap(), 1e-3);
        assert_eq!(parse_rate("150 /s").unwrap(), 150.0);
        assert_eq!(parse_rate("150 s^-1").unwrap(), 150.0);
        assert_eq!(parse_rate("0.15 /ms").unwrap(), 150.0);
        assert!(parse_rate("150 Hz").unwrap_err().contains("cyclic"));
    }

    #[test]
    fn drift() {
        assert!((parse_drift("1 kHz/min").unwrap() - TAU * 1e3 / 60.0).abs() < 1e-9);
        assert!(parse_drift("1 kHz").is_err());
    }
}
