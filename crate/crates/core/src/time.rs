//! Calendar helpers shared by every engine.
//!
//! All simulated time is naive local time. Each patient lives in one time
//! zone and the simulated clock never crosses one.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, TimeDelta};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Timestamp = NaiveDateTime;
pub type Date = NaiveDate;
pub type TimeOfDay = NaiveTime;

pub const MINUTES_PER_DAY: i64 = 24 * 60;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimeError {
    #[error("invalid duration {0:?}")]
    Duration(String),
    #[error("invalid time of day {0:?}")]
    TimeOfDay(String),
    #[error("invalid day-of-week list {0:?}")]
    Weekdays(String),
}

/// A duration as written in projections: `"8 calendardays"`, `"1 hour"`,
/// `"30.0 minutes"` or a bare day count such as `"61"`.
///
/// Stored as whole minutes plus a flag remembering the calendar-day form,
/// which is what window queries key on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub minutes: i64,
    pub calendar: bool,
}

impl Span {
    pub const fn minutes(minutes: i64) -> Self {
        Span { minutes, calendar: false }
    }

    pub const fn days(days: i64) -> Self {
        Span { minutes: days * MINUTES_PER_DAY, calendar: false }
    }

    pub const fn calendar_days(days: i64) -> Self {
        Span { minutes: days * MINUTES_PER_DAY, calendar: true }
    }

    /// Whole days covered, rounding partial days up.
    pub fn whole_days(&self) -> i64 {
        (self.minutes + MINUTES_PER_DAY - 1).div_euclid(MINUTES_PER_DAY)
    }

    pub fn to_delta(&self) -> TimeDelta {
        TimeDelta::minutes(self.minutes)
    }

    pub fn parse(text: &str) -> Result<Span, TimeError> {
        let err = || TimeError::Duration(String::from(text));
        let trimmed = text.trim();
        let mut parts = trimmed.split_whitespace();
        let number = parts.next().ok_or_else(err)?;
        let unit = parts.next();
        if parts.next().is_some() {
            return Err(err());
        }
        let value: f64 = number.parse().map_err(|_| err())?;
        let (factor, calendar) = match unit.map(|u| u.to_ascii_lowercase()) {
            None => (MINUTES_PER_DAY as f64, false),
            Some(u) => match u.as_str() {
                "minute" | "minutes" | "min" | "mins" => (1.0, false),
                "hour" | "hours" | "h" => (60.0, false),
                "day" | "days" => (MINUTES_PER_DAY as f64, false),
                "calendarday" | "calendardays" => (MINUTES_PER_DAY as f64, true),
                "week" | "weeks" => (7.0 * MINUTES_PER_DAY as f64, false),
                _ => return Err(err()),
            },
        };
        let minutes = value * factor;
        if !minutes.is_finite() || minutes != (minutes as i64) as f64 || minutes.abs() > 1e12 {
            return Err(err());
        }
        if calendar && (minutes as i64) % MINUTES_PER_DAY != 0 {
            return Err(err());
        }
        Ok(Span { minutes: minutes as i64, calendar })
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.minutes;
        if self.calendar {
            return write!(f, "{} calendardays", m / MINUTES_PER_DAY);
        }
        if m != 0 && m % MINUTES_PER_DAY == 0 {
            let d = m / MINUTES_PER_DAY;
            return if d == 1 { f.write_str("1 day") } else { write!(f, "{d} days") };
        }
        if m != 0 && m % 60 == 0 {
            let h = m / 60;
            return if h == 1 { f.write_str("1 hour") } else { write!(f, "{h} hours") };
        }
        if m == 1 {
            f.write_str("1 minute")
        } else {
            write!(f, "{m} minutes")
        }
    }
}

/// Days of the week a periodic wait may fire on, 1 = Monday .. 7 = Sunday.
/// Order is kept as written.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Weekdays(Vec<u8>);

impl Weekdays {
    pub fn all() -> Self {
        Weekdays((1..=7).collect())
    }

    pub fn new(days: Vec<u8>) -> Result<Self, TimeError> {
        let bad = || TimeError::Weekdays(join_days(&days));
        if days.is_empty() {
            return Err(bad());
        }
        for (i, d) in days.iter().enumerate() {
            if !(1..=7).contains(d) || days[..i].contains(d) {
                return Err(bad());
            }
        }
        Ok(Weekdays(days))
    }

    /// Every day of the week, starting from `first`.
    pub fn all_from(first: u8) -> Self {
        Weekdays((0..7).map(|i| (first - 1 + i) % 7 + 1).collect())
    }

    pub fn parse(text: &str) -> Result<Self, TimeError> {
        let mut days = Vec::new();
        for part in text.split(',') {
            let d: u8 = part.trim().parse().map_err(|_| TimeError::Weekdays(String::from(text)))?;
            days.push(d);
        }
        Weekdays::new(days).map_err(|_| TimeError::Weekdays(String::from(text)))
    }

    pub fn contains(&self, iso_day: u8) -> bool {
        self.0.contains(&iso_day)
    }

    pub fn days(&self) -> &[u8] {
        &self.0
    }
}

fn join_days(days: &[u8]) -> String {
    let mut out = String::new();
    for (i, d) in days.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push(char::from(b'0' + d % 10));
    }
    out
}

impl fmt::Display for Weekdays {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&join_days(&self.0))
    }
}

pub fn parse_time_of_day(text: &str) -> Result<TimeOfDay, TimeError> {
    let err = || TimeError::TimeOfDay(String::from(text));
    let (h, m) = text.trim().split_once(':').ok_or_else(err)?;
    let h: u32 = h.parse().map_err(|_| err())?;
    let m: u32 = m.parse().map_err(|_| err())?;
    NaiveTime::from_hms_opt(h, m, 0).ok_or_else(err)
}

pub fn format_time_of_day(t: TimeOfDay) -> String {
    alloc::format!("{}", t.format("%H:%M"))
}

pub fn iso_weekday(date: Date) -> u8 {
    date.weekday().number_from_monday() as u8
}

pub fn start_of_day(date: Date) -> Timestamp {
    date.and_time(NaiveTime::MIN)
}

/// Last whole second of `date`; rollover evaluations use it as their as-of.
pub fn end_of_day(date: Date) -> Timestamp {
    date.and_hms_opt(23, 59, 59).expect("valid time")
}

pub fn next_midnight(now: Timestamp) -> Timestamp {
    start_of_day(now.date() + TimeDelta::days(1))
}

/// Whole calendar days from `from` to `to` (date difference, ignoring the time of day).
pub fn calendar_days_between(from: Timestamp, to: Timestamp) -> i64 {
    (to.date() - from.date()).num_days()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_from_projection_text() {
        assert_eq!(Span::parse("8 calendardays").unwrap(), Span::calendar_days(8));
        assert_eq!(Span::parse("1 hour").unwrap(), Span::minutes(60));
        assert_eq!(Span::parse("30.0 minutes").unwrap(), Span::minutes(30));
        assert_eq!(Span::parse("61").unwrap(), Span::days(61));
        assert_eq!(Span::parse("2 hours").unwrap(), Span::minutes(120));
        assert!(Span::parse("1.5 minutes").is_err());
        assert!(Span::parse("3 fortnights").is_err());
        assert!(Span::parse("").is_err());
    }

    #[test]
    fn span_display_reparses() {
        for s in [Span::calendar_days(8), Span::minutes(60), Span::minutes(30), Span::days(7), Span::minutes(0)] {
            assert_eq!(Span::parse(&alloc::format!("{s}")).unwrap(), s);
        }
    }

    #[test]
    fn weekday_lists() {
        let w = Weekdays::parse("4,5,6,7,1,2,3").unwrap();
        assert_eq!(w.days(), &[4, 5, 6, 7, 1, 2, 3]);
        assert_eq!(alloc::format!("{w}"), "4,5,6,7,1,2,3");
        assert!(Weekdays::parse("0").is_err());
        assert!(Weekdays::parse("1,1").is_err());
        assert!(Weekdays::parse("").is_err());
        assert_eq!(Weekdays::all_from(4), w);
    }

    #[test]
    fn times_of_day() {
        assert_eq!(format_time_of_day(parse_time_of_day("8:00").unwrap()), "08:00");
        assert!(parse_time_of_day("25:00").is_err());
        assert!(parse_time_of_day("8").is_err());
    }

    #[test]
    fn calendar_day_difference_ignores_clock() {
        let a = NaiveDate::from_ymd_opt(2014, 3, 3).unwrap().and_hms_opt(23, 0, 0).unwrap();
        let b = NaiveDate::from_ymd_opt(2014, 3, 4).unwrap().and_hms_opt(1, 0, 0).unwrap();
        assert_eq!(calendar_days_between(a, b), 1);
        assert_eq!(iso_weekday(NaiveDate::from_ymd_opt(2014, 3, 3).unwrap()), 1);
    }
}
