//! UTC timestamps with microsecond precision and an injectable clock.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.6f";

/// A UTC instant truncated to whole microseconds.
///
/// Renders as `2025-10-13T14:37:40.068805` (no zone suffix). The textual
/// form sorts lexicographically in time order, which the store relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

impl Timestamp {
    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        let micros = dt.nanosecond() / 1_000 * 1_000;
        Timestamp(dt.with_nanosecond(micros).unwrap_or(dt))
    }

    pub fn datetime(&self) -> DateTime<Utc> {
        self.0
    }

    pub fn date(&self) -> NaiveDate {
        self.0.date_naive()
    }

    pub fn plus_micros(&self, micros: i64) -> Self {
        Timestamp(self.0 + Duration::microseconds(micros))
    }

    /// Whole seconds elapsed from `earlier` to `self`, floored, never negative.
    pub fn seconds_since(&self, earlier: &Timestamp) -> i64 {
        (self.0 - earlier.0).num_seconds().max(0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format(FORMAT))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid timestamp {0:?}")]
pub struct ParseTimestampError(String);

impl FromStr for Timestamp {
    type Err = ParseTimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim_end_matches('Z');
        NaiveDateTime::parse_from_str(trimmed, "%Y-%m-%dT%H:%M:%S%.f")
            .map(|naive| Timestamp::from_datetime(Utc.from_utc_datetime(&naive)))
            .map_err(|_| ParseTimestampError(s.to_string()))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive-exclusive range `[from, to)` over timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub from: Timestamp,
    pub to: Timestamp,
}

impl DateRange {
    /// The whole UTC calendar day.
    pub fn day(date: NaiveDate) -> Self {
        let start = Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight"));
        DateRange {
            from: Timestamp::from_datetime(start),
            to: Timestamp::from_datetime(start + Duration::days(1)),
        }
    }

    pub fn contains(&self, ts: &Timestamp) -> bool {
        *ts >= self.from && *ts < self.to
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_datetime(Utc::now())
    }
}

/// Test clock. Every call to `now` advances by `step_micros`, so successive
/// records get distinct, ordered timestamps.
#[derive(Debug)]
pub struct ManualClock {
    current: Mutex<Timestamp>,
    step_micros: i64,
}

impl ManualClock {
    pub fn new(start: Timestamp, step_micros: i64) -> Self {
        ManualClock { current: Mutex::new(start), step_micros }
    }

    pub fn set(&self, ts: Timestamp) {
        *self.current.lock().expect("clock lock") = ts;
    }

    pub fn advance_secs(&self, secs: i64) {
        let mut cur = self.current.lock().expect("clock lock");
        *cur = cur.plus_micros(secs * 1_000_000);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        let mut cur = self.current.lock().expect("clock lock");
        let now = *cur;
        *cur = cur.plus_micros(self.step_micros);
        now
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_microseconds_without_zone() {
        let ts: Timestamp = "2025-10-13T14:37:40.068805".parse().unwrap();
        assert_eq!(ts.to_string(), "2025-10-13T14:37:40.068805");
    }

    #[test]
    fn truncates_nanoseconds() {
        let ts: Timestamp = "2025-10-13T14:37:40.068805999".parse().unwrap();
        assert_eq!(ts.to_string(), "2025-10-13T14:37:40.068805");
    }

    #[test]
    fn day_range_is_half_open() {
        let day = DateRange::day(NaiveDate::from_ymd_opt(2025, 10, 13).unwrap());
        assert!(day.contains(&"2025-10-13T00:00:00.000000".parse().unwrap()));
        assert!(day.contains(&"2025-10-13T23:59:59.999999".parse().unwrap()));
        assert!(!day.contains(&"2025-10-14T00:00:00.000000".parse().unwrap()));
    }

    #[test]
    fn elapsed_whole_seconds() {
        let a: Timestamp = "2025-10-13T14:37:40.900000".parse().unwrap();
        let b: Timestamp = "2025-10-13T14:37:50.899999".parse().unwrap();
        assert_eq!(b.seconds_since(&a), 9);
        assert_eq!(a.seconds_since(&b), 0);
    }
}
