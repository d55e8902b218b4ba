//! Personal health record: events, prescriptions, preferences, DIRC rules,
//! the projected-plans ledger and the interaction log of one patient.
//!
//! Every mutation is also appended to an in-memory journal of tagged
//! records; replaying the journal rebuilds an identical record.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{parse_time_of_day, Date, Span, TimeOfDay, Timestamp, Weekdays};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl DataValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            DataValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    /// Scenario spellings: numbers, `TRUE`/`FALSE`, `yes`/`no`, anything else as text.
    pub fn parse_loose(s: &str) -> DataValue {
        let t = s.trim();
        if let Ok(v) = t.parse::<f64>() {
            if v.is_finite() {
                return DataValue::Number(v);
            }
        }
        match t.to_ascii_lowercase().as_str() {
            "true" | "yes" => DataValue::Bool(true),
            "false" | "no" => DataValue::Bool(false),
            _ => DataValue::Text(String::from(t)),
        }
    }
}

impl fmt::Display for DataValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataValue::Bool(b) => write!(f, "{b}"),
            DataValue::Number(v) => write!(f, "{v}"),
            DataValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Source {
    Sensor,
    PatientEntry,
    CareGiver,
    Dss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Quality {
    #[default]
    Normal,
    Low,
    VeryLow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Event {
    pub id: u64,
    pub patient_id: String,
    pub concept_id: String,
    pub value: DataValue,
    pub valid_start: Timestamp,
    pub valid_end: Timestamp,
    pub source: Source,
    #[serde(default)]
    pub quality: Quality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Prescription {
    pub medication: String,
    /// Dose per time of day, keyed `HH:MM`.
    pub dose_per_time: BTreeMap<String, String>,
    pub reminder_lead: String,
    pub start_date: Date,
    pub end_date: Date,
    /// Concept the intake confirmation is recorded under.
    pub concept_id: String,
    /// Prompt shown at intake time; the dose is appended.
    pub prompt: String,
}

impl Prescription {
    pub fn check(&self) -> Result<(), String> {
        if self.start_date > self.end_date {
            return Err(format!("prescription {} ends before it starts", self.medication));
        }
        if self.dose_per_time.is_empty() {
            return Err(format!("prescription {} has no doses", self.medication));
        }
        for t in self.dose_per_time.keys() {
            parse_time_of_day(t).map_err(|e| format!("prescription {}: {e}", self.medication))?;
        }
        Span::parse(&self.reminder_lead).map_err(|e| format!("prescription {}: {e}", self.medication))?;
        Ok(())
    }

    pub fn doses(&self) -> Vec<(TimeOfDay, &str)> {
        let mut v: Vec<_> =
            self.dose_per_time.iter().filter_map(|(t, d)| parse_time_of_day(t).ok().map(|t| (t, d.as_str()))).collect();
        v.sort();
        v
    }
}

/// Maps a personal event reported by the patient to a guideline context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DircRule {
    pub personal_event: String,
    pub personal_event_concept: String,
    pub induced_context: String,
    #[serde(default)]
    pub start_offset_minutes: i64,
    /// Minutes after the inducing event's end; open-ended when absent.
    #[serde(default)]
    pub end_offset_minutes: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Preference {
    pub context: String,
    pub target_concept_id: String,
    pub reminder_time: TimeOfDay,
    #[serde(default)]
    pub days_of_week: Option<Weekdays>,
    /// Reminder offset in minutes relative to `reminder_time` (negative = before).
    #[serde(default)]
    pub remind_lead_minutes: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LedgerStatus {
    Start,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProjectedPlanRecord {
    pub projection_id: String,
    pub unit_id: String,
    pub sent_date: Timestamp,
    pub status: LedgerStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum InteractionType {
    DataNotification,
    Projection,
    CareGiverRecommendation,
    PatientRecommendation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum InteractionSubtype {
    CallbackTriggered,
    MonitoringTriggered,
    ContextChanged,
    PatientDataEntry,
    CareGiverAccepted,
    CareGiverDeclined,
    PatientAccepted,
    PatientDeclined,
    Procedure,
    Notification,
}

impl InteractionSubtype {
    pub const ALL: [InteractionSubtype; 10] = [
        InteractionSubtype::CallbackTriggered,
        InteractionSubtype::MonitoringTriggered,
        InteractionSubtype::ContextChanged,
        InteractionSubtype::PatientDataEntry,
        InteractionSubtype::CareGiverAccepted,
        InteractionSubtype::CareGiverDeclined,
        InteractionSubtype::PatientAccepted,
        InteractionSubtype::PatientDeclined,
        InteractionSubtype::Procedure,
        InteractionSubtype::Notification,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InteractionRecord {
    pub timestamp: Timestamp,
    #[serde(rename = "type")]
    pub kind: InteractionType,
    pub subtype: InteractionSubtype,
    #[serde(default)]
    pub technical_only: bool,
    /// Free-form reference: callback id, message id, projection id.
    #[serde(default)]
    pub detail: String,
}

/// One line of the per-patient log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "camelCase")]
pub enum PhrRecord {
    Event(Event),
    Prescription(Prescription),
    Preference(Preference),
    Dirc(DircRule),
    Ledger(ProjectedPlanRecord),
    Interaction(InteractionRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PhrError {
    #[error("event {0}: valid start is after valid end")]
    InvalidInterval(u64),
    #[error("event {0} already stored")]
    DuplicateEvent(u64),
    #[error("units {0:?} are both stopped and started")]
    Overlap(Vec<String>),
    #[error("technicalOnly is only allowed on projection interactions")]
    TechnicalOnly,
    #[error("{0}")]
    Invalid(String),
}

/// Concept id used for personal events that no DIRC rule names.
pub const PERSONAL_EVENT_CONCEPT: &str = "personalEvent";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    events: Vec<Event>,
    by_concept: BTreeMap<String, Vec<usize>>,
    ids: BTreeSet<u64>,
    prescriptions: Vec<Prescription>,
    preferences: BTreeMap<(String, String), Preference>,
    dircs: Vec<DircRule>,
    ledger: Vec<ProjectedPlanRecord>,
    interactions: Vec<InteractionRecord>,
    journal: Vec<PhrRecord>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>) -> Self {
        PatientRecord { patient_id: patient_id.into(), ..Default::default() }
    }

    pub fn replay(
        patient_id: impl Into<String>,
        records: impl IntoIterator<Item = PhrRecord>,
    ) -> Result<Self, PhrError> {
        let mut r = PatientRecord::new(patient_id);
        for rec in records {
            r.apply(rec)?;
        }
        Ok(r)
    }

    pub fn apply(&mut self, rec: PhrRecord) -> Result<(), PhrError> {
        match rec {
            PhrRecord::Event(e) => self.insert_event(e).map(|_| ()),
            PhrRecord::Prescription(p) => self.add_prescription(p),
            PhrRecord::Preference(p) => {
                self.set_preference(p);
                Ok(())
            }
            PhrRecord::Dirc(d) => {
                self.add_dirc(d);
                Ok(())
            }
            PhrRecord::Ledger(l) => {
                self.ledger.push(l.clone());
                self.journal.push(PhrRecord::Ledger(l));
                Ok(())
            }
            PhrRecord::Interaction(i) => self.log_interaction(i),
        }
    }

    pub fn journal(&self) -> &[PhrRecord] {
        &self.journal
    }

    pub fn insert_event(&mut self, e: Event) -> Result<u64, PhrError> {
        if e.valid_start > e.valid_end {
            return Err(PhrError::InvalidInterval(e.id));
        }
        if !self.ids.insert(e.id) {
            return Err(PhrError::DuplicateEvent(e.id));
        }
        let id = e.id;
        self.by_concept.entry(e.concept_id.clone()).or_default().push(self.events.len());
        self.events.push(e.clone());
        self.journal.push(PhrRecord::Event(e));
        Ok(id)
    }

    /// Events of `concept` whose valid start falls in `[from, to]`, ordered by
    /// valid start then id.
    pub fn events(&self, concept: &str, from: Timestamp, to: Timestamp) -> Vec<&Event> {
        let mut out: Vec<&Event> = self
            .by_concept
            .get(concept)
            .into_iter()
            .flatten()
            .map(|&i| &self.events[i])
            .filter(|e| e.valid_start >= from && e.valid_start <= to)
            .collect();
        out.sort_by_key(|e| (e.valid_start, e.id));
        out
    }

    /// Every event, ordered by valid start, concept, then id.
    pub fn all_events(&self) -> Vec<&Event> {
        let mut out: Vec<&Event> = self.events.iter().collect();
        out.sort_by(|a, b| (a.valid_start, &a.concept_id, a.id).cmp(&(b.valid_start, &b.concept_id, b.id)));
        out
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn add_prescription(&mut self, p: Prescription) -> Result<(), PhrError> {
        p.check().map_err(PhrError::Invalid)?;
        self.prescriptions.push(p.clone());
        self.journal.push(PhrRecord::Prescription(p));
        Ok(())
    }

    pub fn prescriptions(&self) -> &[Prescription] {
        &self.prescriptions
    }

    /// Replaces any earlier preference for the same (context, concept).
    pub fn set_preference(&mut self, p: Preference) {
        self.preferences.insert((p.context.clone(), p.target_concept_id.clone()), p.clone());
        self.journal.push(PhrRecord::Preference(p));
    }

    pub fn preference(&self, context: &str, concept: &str) -> Option<&Preference> {
        self.preferences.get(&(String::from(context), String::from(concept)))
    }

    pub fn preferences_for(&self, context: &str) -> Vec<&Preference> {
        let mut v: Vec<&Preference> = self.preferences.values().filter(|p| p.context == context).collect();
        v.sort_by(|a, b| (a.reminder_time, &a.target_concept_id).cmp(&(b.reminder_time, &b.target_concept_id)));
        v
    }

    pub fn add_dirc(&mut self, d: DircRule) {
        self.dircs.push(d.clone());
        self.journal.push(PhrRecord::Dirc(d));
    }

    pub fn dircs(&self) -> &[DircRule] {
        &self.dircs
    }

    pub fn dirc_for(&self, personal_event: &str) -> Option<&DircRule> {
        self.dircs.iter().find(|d| d.personal_event == personal_event)
    }

    /// Context induced at `at` by the latest personal event, if any DIRC
    /// rule covers that instant.
    pub fn induced_context(&self, at: Timestamp) -> Option<&str> {
        let mut latest: Option<(&Event, &DircRule)> = None;
        for d in &self.dircs {
            for e in self.events(&d.personal_event_concept, Timestamp::MIN, at) {
                if e.value != DataValue::Text(d.personal_event.clone()) {
                    continue;
                }
                if latest.is_none_or(|(l, _)| (e.valid_start, e.id) > (l.valid_start, l.id)) {
                    latest = Some((e, d));
                }
            }
        }
        let (e, d) = latest?;
        let begins = e.valid_start + chrono::TimeDelta::minutes(d.start_offset_minutes);
        let ends = d.end_offset_minutes.map(|m| e.valid_end + chrono::TimeDelta::minutes(m));
        (begins <= at && ends.is_none_or(|end| at <= end)).then_some(d.induced_context.as_str())
    }

    /// Appends one ledger row per id, all stamped `at`.
    pub fn record_projection(
        &mut self,
        projection_id: &str,
        stop: &[String],
        start: &[String],
        at: Timestamp,
    ) -> Result<Vec<ProjectedPlanRecord>, PhrError> {
        let overlap: Vec<String> = stop.iter().filter(|s| start.contains(s)).cloned().collect();
        if !overlap.is_empty() {
            return Err(PhrError::Overlap(overlap));
        }
        let rows: Vec<ProjectedPlanRecord> = stop
            .iter()
            .map(|u| (u, LedgerStatus::Stop))
            .chain(start.iter().map(|u| (u, LedgerStatus::Start)))
            .map(|(u, status)| ProjectedPlanRecord {
                projection_id: projection_id.into(),
                unit_id: u.clone(),
                sent_date: at,
                status,
            })
            .collect();
        for r in &rows {
            self.ledger.push(r.clone());
            self.journal.push(PhrRecord::Ledger(r.clone()));
        }
        Ok(rows)
    }

    pub fn ledger(&self) -> &[ProjectedPlanRecord] {
        &self.ledger
    }

    fn latest_records(&self) -> BTreeMap<&str, &ProjectedPlanRecord> {
        let mut latest = BTreeMap::new();
        for r in &self.ledger {
            latest.insert(r.unit_id.as_str(), r);
        }
        latest
    }

    /// Units whose latest ledger record is a start.
    pub fn active_units(&self) -> BTreeSet<String> {
        self.latest_records()
            .into_iter()
            .filter(|(_, r)| r.status == LedgerStatus::Start)
            .map(|(u, _)| String::from(u))
            .collect()
    }

    /// Latest start record of a currently active unit.
    pub fn active_record(&self, unit: &str) -> Option<&ProjectedPlanRecord> {
        self.latest_records().get(unit).copied().filter(|r| r.status == LedgerStatus::Start)
    }

    pub fn log_interaction(&mut self, rec: InteractionRecord) -> Result<(), PhrError> {
        if rec.technical_only && rec.kind != InteractionType::Projection {
            return Err(PhrError::TechnicalOnly);
        }
        self.interactions.push(rec.clone());
        self.journal.push(PhrRecord::Interaction(rec));
        Ok(())
    }

    pub fn interactions(&self) -> &[InteractionRecord] {
        &self.interactions
    }
}
