//! Date-bucketed abstractions, trailing-window queries and pattern
//! subscriptions.
//!
//! Windows are whole dates: a window of `n` days ending at `as_of` covers
//! `as_of`'s date and the `n - 1` dates before it. Events of low or very
//! low quality are kept in the index but never counted.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use chrono::Days;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{eval, EventScope};
use crate::lang::{AbstractionOp, Aggregator, CmpOp, Expr};
use crate::phr::{DataValue, Event, Quality};
use crate::time::{Date, Timestamp};

#[derive(Debug, Clone, PartialEq)]
pub struct Abstraction {
    pub name: String,
    pub op: AbstractionOp,
    pub exprs: Vec<Expr>,
}

impl Abstraction {
    pub fn concepts(&self) -> BTreeSet<String> {
        self.exprs.iter().flat_map(|e| e.concepts()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TemporalError {
    #[error("cannot sum non-numeric values of {0}")]
    NotNumeric(String),
    #[error("cannot sum abstraction {0}")]
    SumOfAbstraction(String),
    #[error("abstraction {0} has no expressions")]
    EmptyAbstraction(String),
    #[error("window must cover at least one day")]
    EmptyWindow,
}

#[derive(Debug, Clone, PartialEq)]
struct Sample {
    at: Timestamp,
    id: u64,
    value: DataValue,
    quality: Quality,
}

/// Events by concept, each list ordered by (valid start, id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventIndex {
    by_concept: BTreeMap<String, Vec<Sample>>,
}

impl EventIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, e: &Event) {
        let list = self.by_concept.entry(e.concept_id.clone()).or_default();
        let s = Sample { at: e.valid_start, id: e.id, value: e.value.clone(), quality: e.quality };
        let pos = list.partition_point(|o| (o.at, o.id) <= (s.at, s.id));
        list.insert(pos, s);
    }

    pub fn len(&self) -> usize {
        self.by_concept.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Usable values of `concept` whose valid start falls on a date in `[from, to]`.
    fn values(&self, concept: &str, from: Date, to: Date) -> impl Iterator<Item = (Date, &DataValue)> {
        let list = self.by_concept.get(concept).map(Vec::as_slice).unwrap_or(&[]);
        let lo = list.partition_point(|s| s.at.date() < from);
        list[lo..]
            .iter()
            .take_while(move |s| s.at.date() <= to)
            .filter(|s| s.quality == Quality::Normal)
            .map(|s| (s.at.date(), &s.value))
    }

    /// Latest usable value of `concept` at or before `at`.
    pub fn latest(&self, concept: &str, at: Timestamp) -> Option<&DataValue> {
        let list = self.by_concept.get(concept)?;
        let hi = list.partition_point(|s| s.at <= at);
        list[..hi].iter().rev().find(|s| s.quality == Quality::Normal).map(|s| &s.value)
    }
}

fn expr_holds(expr: &Expr, index: &EventIndex, date: Date) -> bool {
    expr.concepts().iter().any(|c| {
        index.values(c, date, date).any(|(_, v)| eval(expr, &mut EventScope { concept: c, value: v }).is_true())
    })
}

/// Whether `a` holds on `date`: `or` needs one satisfied expression, `and`
/// needs every expression satisfied by some event of that date.
pub fn evaluate_abstraction(a: &Abstraction, index: &EventIndex, date: Date) -> bool {
    match a.op {
        AbstractionOp::Or => a.exprs.iter().any(|e| expr_holds(e, index, date)),
        AbstractionOp::And => !a.exprs.is_empty() && a.exprs.iter().all(|e| expr_holds(e, index, date)),
    }
}

/// What a query aggregates over.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Concept(&'a str),
    Abstraction(&'a Abstraction),
}

impl Target<'_> {
    pub fn name(&self) -> &str {
        match self {
            Target::Concept(c) => c,
            Target::Abstraction(a) => &a.name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowQuery {
    pub agg: Aggregator,
    pub cmp: CmpOp,
    pub threshold: f64,
    pub window_days: i64,
}

/// First date of a window of `days` ending on `as_of`'s date.
pub fn window_start(as_of: Timestamp, days: i64) -> Date {
    let end = as_of.date();
    end.checked_sub_days(Days::new((days.max(1) - 1) as u64)).unwrap_or(Date::MIN)
}

/// Evaluates the query over the window ending on `as_of`'s date. Returns
/// whether the comparison holds and the observed aggregate.
pub fn window_query(
    q: &WindowQuery,
    target: Target<'_>,
    as_of: Timestamp,
    index: &EventIndex,
) -> Result<(bool, f64), TemporalError> {
    if q.window_days < 1 {
        return Err(TemporalError::EmptyWindow);
    }
    let to = as_of.date();
    let from = window_start(as_of, q.window_days);
    let observed = match (q.agg, target) {
        (Aggregator::Count, Target::Concept(c)) => {
            let dates: BTreeSet<Date> = index.values(c, from, to).map(|(d, _)| d).collect();
            dates.len() as f64
        }
        (Aggregator::Count, Target::Abstraction(a)) => {
            if a.exprs.is_empty() {
                return Err(TemporalError::EmptyAbstraction(a.name.clone()));
            }
            let mut n = 0u32;
            let mut d = from;
            while d <= to {
                if evaluate_abstraction(a, index, d) {
                    n += 1;
                }
                d = match d.succ_opt() {
                    Some(next) => next,
                    None => break,
                };
            }
            f64::from(n)
        }
        (Aggregator::Sum, Target::Concept(c)) => {
            let mut sum = 0.0;
            for (_, v) in index.values(c, from, to) {
                sum += v.as_number().ok_or_else(|| TemporalError::NotNumeric(c.into()))?;
            }
            sum
        }
        (Aggregator::Sum, Target::Abstraction(a)) => return Err(TemporalError::SumOfAbstraction(a.name.clone())),
    };
    Ok((q.cmp.holds(observed, q.threshold), observed))
}

/// A fully resolved pattern: numeric threshold, optional abstraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub id: String,
    pub query: WindowQuery,
    pub target: String,
    pub abstraction: Option<Abstraction>,
}

impl Pattern {
    pub fn target(&self) -> Target<'_> {
        match &self.abstraction {
            Some(a) => Target::Abstraction(a),
            None => Target::Concept(&self.target),
        }
    }

    pub fn concepts(&self) -> BTreeSet<String> {
        match &self.abstraction {
            Some(a) => a.concepts(),
            None => [self.target.clone()].into_iter().collect(),
        }
    }

    pub fn check(&self) -> Result<(), TemporalError> {
        if self.query.window_days < 1 {
            return Err(TemporalError::EmptyWindow);
        }
        match (&self.abstraction, self.query.agg) {
            (Some(a), _) if a.exprs.is_empty() => Err(TemporalError::EmptyAbstraction(a.name.clone())),
            (Some(a), Aggregator::Sum) => Err(TemporalError::SumOfAbstraction(a.name.clone())),
            _ => Ok(()),
        }
    }

    /// Whether a zero aggregate satisfies the comparison, i.e. the pattern
    /// would hold on an empty window.
    pub fn vacuous(&self) -> bool {
        self.query.cmp.holds(0.0, self.query.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubscriptionId(pub u64);

#[derive(Debug, Clone, PartialEq)]
struct Subscription {
    pattern: Pattern,
    subscriber: String,
    armed: bool,
    last: bool,
    /// First enrolled date; a pattern that holds on an empty window may only
    /// fire once its window lies entirely on or after this date.
    coverage_from: Date,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Firing {
    pub subscription: SubscriptionId,
    pub pattern_id: String,
    pub subscriber: String,
    pub as_of: Timestamp,
    pub observed: f64,
}

/// Subscription registry over one patient's events.
///
/// A subscription fires when its pattern goes from false to true, then
/// stays disarmed until acknowledged.
#[derive(Debug, Clone, Default)]
pub struct Monitor {
    pub index: EventIndex,
    subs: BTreeMap<u64, Subscription>,
    next: u64,
}

impl Monitor {
    pub fn new() -> Self {
        Self::default()
    }

    fn holds(&self, s: &Subscription, as_of: Timestamp) -> (bool, f64) {
        let (ok, observed) =
            window_query(&s.pattern.query, s.pattern.target(), as_of, &self.index).unwrap_or((false, 0.0));
        let covered = window_start(as_of, s.pattern.query.window_days) >= s.coverage_from;
        (ok && (observed != 0.0 || covered || !s.pattern.vacuous()), observed)
    }

    pub fn subscribe(
        &mut self,
        pattern: Pattern,
        subscriber: impl Into<String>,
        at: Timestamp,
    ) -> Result<SubscriptionId, TemporalError> {
        pattern.check()?;
        let mut s =
            Subscription { pattern, subscriber: subscriber.into(), armed: true, last: false, coverage_from: at.date() };
        s.last = self.holds(&s, at).0;
        self.next += 1;
        self.subs.insert(self.next, s);
        Ok(SubscriptionId(self.next))
    }

    pub fn unsubscribe(&mut self, id: &SubscriptionId) {
        self.subs.remove(&id.0);
    }

    pub fn unsubscribe_all(&mut self, subscriber: &str) {
        self.subs.retain(|_, s| s.subscriber != subscriber);
    }

    pub fn subscriptions(&self) -> usize {
        self.subs.len()
    }

    /// Re-arms a fired subscription; the current value becomes the new baseline.
    pub fn acknowledge(&mut self, id: &SubscriptionId, at: Timestamp) {
        if let Some(s) = self.subs.get(&id.0) {
            let last = self.holds(s, at).0;
            let s = self.subs.get_mut(&id.0).unwrap();
            s.armed = true;
            s.last = last;
        }
    }

    fn evaluate(&mut self, as_of: Timestamp, relevant: impl Fn(&Subscription) -> bool) -> Vec<Firing> {
        let mut out = Vec::new();
        let ids: Vec<u64> = self.subs.iter().filter(|(_, s)| relevant(s)).map(|(id, _)| *id).collect();
        for id in ids {
            let (now, observed) = self.holds(&self.subs[&id], as_of);
            let s = self.subs.get_mut(&id).unwrap();
            let rising = now && !s.last;
            s.last = now;
            if rising && s.armed {
                s.armed = false;
                out.push(Firing {
                    subscription: SubscriptionId(id),
                    pattern_id: s.pattern.id.clone(),
                    subscriber: s.subscriber.clone(),
                    as_of,
                    observed,
                });
            }
        }
        out.sort_by(|a, b| (&a.pattern_id, &a.subscription).cmp(&(&b.pattern_id, &b.subscription)));
        out
    }

    /// Stores `e` and evaluates the subscriptions that read its concept.
    pub fn insert(&mut self, e: &Event, as_of: Timestamp) -> Vec<Firing> {
        self.index.insert(e);
        let concept = e.concept_id.clone();
        self.evaluate(as_of, |s| s.pattern.concepts().contains(&concept))
    }

    /// Evaluates every subscription at the end of the day that just completed.
    pub fn rollover(&mut self, completed: Date) -> Vec<Firing> {
        self.evaluate(crate::time::end_of_day(completed), |_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_expr;
    use crate::phr::Source;
    use alloc::vec;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn day(d: u32) -> Date {
        NaiveDate::from_ymd_opt(2014, 3, 1).unwrap() + Days::new(u64::from(d))
    }

    fn ev(id: u64, concept: &str, value: DataValue, d: u32, h: u32) -> Event {
        let at = day(d).and_hms_opt(h, 0, 0).unwrap();
        Event {
            id,
            patient_id: "p".into(),
            concept_id: concept.into(),
            value,
            valid_start: at,
            valid_end: at,
            source: Source::PatientEntry,
            quality: Quality::Normal,
        }
    }

    fn abnormal_bg() -> Abstraction {
        Abstraction {
            name: "abnormal_BG".into(),
            op: AbstractionOp::Or,
            exprs: ["4985", "4986", "4987", "4988"]
                .iter()
                .map(|c| parse_expr(&alloc::format!("event.getNumber({c})>=150")).unwrap())
                .collect(),
        }
    }

    fn count(cmp: CmpOp, threshold: f64, days: i64) -> WindowQuery {
        WindowQuery { agg: Aggregator::Count, cmp, threshold, window_days: days }
    }

    #[test]
    fn breakfast_160_is_abnormal() {
        let mut idx = EventIndex::new();
        idx.insert(&ev(1, "4986", DataValue::Number(160.0), 3, 10));
        let a = abnormal_bg();
        assert!(evaluate_abstraction(&a, &idx, day(3)));
        assert!(!evaluate_abstraction(&a, &idx, day(4)));
        idx.insert(&ev(2, "4985", DataValue::Number(150.0), 4, 9));
        assert!(evaluate_abstraction(&a, &idx, day(4)));
    }

    #[test]
    fn low_quality_is_ignored() {
        let mut idx = EventIndex::new();
        let mut e = ev(1, "4986", DataValue::Number(400.0), 3, 10);
        e.quality = Quality::VeryLow;
        idx.insert(&e);
        assert!(!evaluate_abstraction(&abnormal_bg(), &idx, day(3)));
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn and_needs_every_expression() {
        let a = Abstraction {
            name: "both".into(),
            op: AbstractionOp::And,
            exprs: vec![
                parse_expr("event.getNumber(\"a\") > 1").unwrap(),
                parse_expr("event.getNumber(\"b\") > 1").unwrap(),
            ],
        };
        let mut idx = EventIndex::new();
        idx.insert(&ev(1, "a", DataValue::Number(2.0), 1, 8));
        assert!(!evaluate_abstraction(&a, &idx, day(1)));
        idx.insert(&ev(2, "b", DataValue::Number(2.0), 1, 20));
        assert!(evaluate_abstraction(&a, &idx, day(1)));
    }

    #[test]
    fn two_abnormal_dates_in_eight_days() {
        let a = abnormal_bg();
        let mut idx = EventIndex::new();
        idx.insert(&ev(1, "4986", DataValue::Number(160.0), 1, 10));
        idx.insert(&ev(2, "4988", DataValue::Number(151.0), 8, 22));
        let q = count(CmpOp::Ge, 2.0, 8);
        let as_of = day(8).and_hms_opt(23, 0, 0).unwrap();
        assert_eq!(window_query(&q, Target::Abstraction(&a), as_of, &idx).unwrap(), (true, 2.0));
        let later = day(9).and_hms_opt(0, 0, 0).unwrap();
        assert_eq!(window_query(&q, Target::Abstraction(&a), later, &idx).unwrap(), (false, 1.0));
    }

    #[test]
    fn weekly_mets_sum() {
        let mut idx = EventIndex::new();
        for (i, v) in [1.0, 2.0, 2.0].into_iter().enumerate() {
            idx.insert(&ev(i as u64, "5065", DataValue::Number(v), 2 + i as u32, 18));
        }
        let q = WindowQuery { agg: Aggregator::Sum, cmp: CmpOp::Ge, threshold: 5.0, window_days: 7 };
        let as_of = day(7).and_hms_opt(7, 0, 0).unwrap();
        assert_eq!(window_query(&q, Target::Concept("5065"), as_of, &idx).unwrap(), (true, 5.0));
        idx.insert(&ev(9, "5021", DataValue::Text("++".into()), 3, 8));
        let q = WindowQuery { agg: Aggregator::Sum, ..q };
        assert_eq!(
            window_query(&q, Target::Concept("5021"), as_of, &idx),
            Err(TemporalError::NotNumeric("5021".into()))
        );
    }

    #[test]
    fn empty_window() {
        let idx = EventIndex::new();
        let as_of = day(1).and_hms_opt(0, 0, 0).unwrap();
        assert_eq!(window_query(&count(CmpOp::Ge, 1.0, 3), Target::Concept("x"), as_of, &idx).unwrap(), (false, 0.0));
    }

    fn positive_ketonuria() -> Pattern {
        Pattern {
            id: "neg14".into(),
            query: count(CmpOp::Eq, 0.0, 14),
            target: "positive_ketonuria".into(),
            abstraction: Some(Abstraction {
                name: "positive_ketonuria".into(),
                op: AbstractionOp::Or,
                exprs: vec![parse_expr("event.getString(5021) == \"++\"").unwrap()],
            }),
        }
    }

    #[test]
    fn negative_for_two_weeks_fires_on_fourteenth_day() {
        let mut m = Monitor::new();
        m.subscribe(positive_ketonuria(), "monitor", day(0).and_hms_opt(0, 0, 0).unwrap()).unwrap();
        let mut fired = Vec::new();
        for d in 0..20 {
            let at = day(d).and_hms_opt(8, 0, 0).unwrap();
            fired.extend(m.insert(&ev(u64::from(d), "5021", DataValue::Text("--".into()), d, 8), at));
            for f in m.rollover(day(d)) {
                fired.push(Firing { observed: f64::from(d), ..f });
            }
        }
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].as_of, day(13).and_hms_opt(8, 0, 0).unwrap());
    }

    #[test]
    fn bulk_insert_fires_once() {
        let mut m = Monitor::new();
        let p = Pattern {
            id: "p".into(),
            query: count(CmpOp::Ge, 2.0, 8),
            target: "x".into(),
            abstraction: Some(abnormal_bg()),
        };
        m.subscribe(p, "unit", day(0).and_hms_opt(0, 0, 0).unwrap()).unwrap();
        let at = day(7).and_hms_opt(23, 0, 0).unwrap();
        let mut n = 0;
        for d in 0..7 {
            n += m.insert(&ev(u64::from(d), "4985", DataValue::Number(200.0), d, 9), at).len();
        }
        assert_eq!(n, 1);
    }

    #[test]
    fn no_events_never_fires() {
        let mut m = Monitor::new();
        let p = Pattern { id: "p".into(), query: count(CmpOp::Ge, 1.0, 3), target: "x".into(), abstraction: None };
        m.subscribe(p, "s", day(0).and_hms_opt(0, 0, 0).unwrap()).unwrap();
        let n: usize = (0..30).map(|d| m.rollover(day(d)).len()).sum();
        assert_eq!(n, 0);
    }

    #[test]
    fn rearm_needs_a_new_rising_edge() {
        let mut m = Monitor::new();
        let p = Pattern { id: "p".into(), query: count(CmpOp::Ge, 1.0, 1), target: "x".into(), abstraction: None };
        let id = m.subscribe(p, "s", day(0).and_hms_opt(0, 0, 0).unwrap()).unwrap();
        let at = day(1).and_hms_opt(9, 0, 0).unwrap();
        assert_eq!(m.insert(&ev(1, "x", DataValue::Number(1.0), 1, 9), at).len(), 1);
        m.acknowledge(&id, at);
        assert_eq!(m.insert(&ev(2, "x", DataValue::Number(1.0), 1, 10), at).len(), 0);
        assert_eq!(m.rollover(day(1)).len(), 0);
        assert_eq!(m.rollover(day(2)).len(), 0);
        let at3 = day(3).and_hms_opt(9, 0, 0).unwrap();
        assert_eq!(m.insert(&ev(3, "x", DataValue::Number(1.0), 3, 9), at3).len(), 1);
    }

    proptest! {
        #[test]
        fn count_is_monotone_and_order_free(
            events in proptest::collection::vec((0u32..20, 0u32..24, 100.0f64..200.0), 0..40),
            extra in (0u32..20, 0u32..24, 100.0f64..200.0),
            window in 1i64..15,
            end in 0u32..20,
        ) {
            let a = abnormal_bg();
            let q = count(CmpOp::Ge, 1.0, window);
            let as_of = day(end).and_hms_opt(23, 59, 0).unwrap();
            let evs: Vec<Event> = events.iter().enumerate()
                .map(|(i, (d, h, v))| ev(i as u64, "4986", DataValue::Number(*v), *d, *h)).collect();
            let mut fwd = EventIndex::new();
            evs.iter().for_each(|e| fwd.insert(e));
            let mut rev = EventIndex::new();
            evs.iter().rev().for_each(|e| rev.insert(e));
            let base = window_query(&q, Target::Abstraction(&a), as_of, &fwd).unwrap();
            prop_assert_eq!(base, window_query(&q, Target::Abstraction(&a), as_of, &rev).unwrap());
            fwd.insert(&ev(999, "4986", DataValue::Number(extra.2), extra.0, extra.1));
            let more = window_query(&q, Target::Abstraction(&a), as_of, &fwd).unwrap();
            prop_assert!(more.1 >= base.1);
        }
    }
}
