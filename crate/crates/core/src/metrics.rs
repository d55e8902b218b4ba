//! Session metrics: mean time between interactions and the interaction
//! histogram. Ratios stay exact; rounding happens only for display.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::phr::{InteractionRecord, InteractionSubtype, InteractionType};
use crate::time::Date;

/// An exact non-negative rational, serialized as `"p/q"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(pub Ratio<u64>);

impl Rational {
    pub fn new(numer: u64, denom: u64) -> Option<Self> {
        (denom != 0).then(|| Rational(Ratio::new(numer, denom)))
    }

    /// Decimal text with `places` digits, rounding half up.
    pub fn round_half_up(&self, places: u32) -> String {
        let scale = 10u128.pow(places);
        let n = u128::from(*self.0.numer()) * scale;
        let d = u128::from(*self.0.denom());
        let scaled = (2 * n + d) / (2 * d);
        if places == 0 {
            return format!("{scaled}");
        }
        format!("{}.{:0width$}", scaled / scale, scaled % scale, width = places as usize)
    }

    pub fn to_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.round_half_up(2))
    }
}

impl FromStr for Rational {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (n, d) = s.split_once('/').unwrap_or((s, "1"));
        let n: u64 = n.trim().parse().map_err(|_| format!("bad ratio {s:?}"))?;
        let d: u64 = d.trim().parse().map_err(|_| format!("bad ratio {s:?}"))?;
        Rational::new(n, d).ok_or_else(|| format!("zero denominator in {s:?}"))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}/{}", self.0.numer(), self.0.denom()))
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionMetrics {
    pub days_in_system: u64,
    pub functional_notifications: u64,
    /// Functional notifications plus technical-only resends.
    pub technical_notifications: u64,
    pub fmtbi: Option<Rational>,
    pub tmtbi: Option<Rational>,
    pub interaction_histogram: BTreeMap<InteractionSubtype, u64>,
}

impl SessionMetrics {
    pub fn from_counts(days_in_system: u64, functional: u64, technical: u64) -> Self {
        SessionMetrics {
            days_in_system,
            functional_notifications: functional,
            technical_notifications: technical,
            fmtbi: Rational::new(days_in_system, functional),
            tmtbi: Rational::new(days_in_system, technical),
            interaction_histogram: BTreeMap::new(),
        }
    }

    pub fn histogram_total(&self) -> u64 {
        self.interaction_histogram.values().sum()
    }
}

/// Subtype a record counts under. Records whose subtype does not belong to
/// their type fall back to the type's default subtype, so every record
/// lands in exactly one bucket.
pub fn classify_interaction(r: &InteractionRecord) -> InteractionSubtype {
    use InteractionSubtype as S;
    match r.kind {
        InteractionType::DataNotification => match r.subtype {
            S::Procedure | S::Notification => S::PatientDataEntry,
            s => s,
        },
        InteractionType::Projection => S::Procedure,
        InteractionType::CareGiverRecommendation => match r.subtype {
            S::Procedure => S::Procedure,
            _ => S::Notification,
        },
        InteractionType::PatientRecommendation => match r.subtype {
            S::Procedure | S::PatientDataEntry => r.subtype,
            _ => S::Notification,
        },
    }
}

/// Functional interactions are the data notifications reaching the
/// central engine.
pub fn is_functional(r: &InteractionRecord) -> bool {
    r.kind == InteractionType::DataNotification
}

pub fn is_technical_only(r: &InteractionRecord) -> bool {
    r.kind == InteractionType::Projection && r.technical_only
}

/// Inclusive number of days from `first` to `last`.
pub fn days_in_system(first: Date, last: Date) -> u64 {
    let (a, b) = if first <= last { (first, last) } else { (last, first) };
    (b - a).num_days() as u64 + 1
}

pub fn compute_metrics<'a>(log: impl IntoIterator<Item = &'a InteractionRecord>, days: u64) -> SessionMetrics {
    let mut functional = 0;
    let mut technical_only = 0;
    let mut histogram = BTreeMap::new();
    for r in log {
        *histogram.entry(classify_interaction(r)).or_insert(0) += 1;
        if is_functional(r) {
            functional += 1;
        }
        if is_technical_only(r) {
            technical_only += 1;
        }
    }
    let mut m = SessionMetrics::from_counts(days, functional, functional + technical_only);
    m.interaction_histogram = histogram;
    m
}

/// Exact mean of non-empty `values`.
pub fn mean(values: &[Rational]) -> Option<Rational> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(Ratio::from_integer(0u64), |acc, v| acc + v.0);
    Some(Rational(sum / Ratio::from_integer(values.len() as u64)))
}

/// Exact sample variance (n - 1 denominator) of at least two values.
pub fn sample_variance(values: &[Rational]) -> Option<Rational> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?.0;
    let ss = values.iter().fold(Ratio::from_integer(0u64), |acc, v| {
        let d = if v.0 >= m { v.0 - m } else { m - v.0 };
        acc + d * d
    });
    Some(Rational(ss / Ratio::from_integer(values.len() as u64 - 1)))
}
