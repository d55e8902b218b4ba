//! The device engine: applies envelopes, runs unit tasks against the clock,
//! grades incoming data, prompts the patient and calls the central engine
//! back.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::Value;
use crate::interp::{Action, AnswerError, Ctx, PromptId, TaskState, UnitTask};
use crate::lang::{parse_envelope, DeclarativeSection, ProjectionEnvelope, QodLevel, ValueType};
use crate::phr::{DataValue, Event, InteractionSubtype, Quality, Source, PERSONAL_EVENT_CONCEPT};
use crate::temporal::EventIndex;
use crate::time::Timestamp;

/// Messages the device sends to the central engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum Upstream {
    #[serde(rename_all = "camelCase")]
    Ack { projection_id: String },
    #[serde(rename_all = "camelCase")]
    Nack { projection_id: String, unit: Option<String>, diagnostics: String },
    #[serde(rename_all = "camelCase")]
    Callback { callback_id: String, message: String, unit: String },
    /// A classified data notification.
    #[serde(rename_all = "camelCase")]
    Data { subtype: InteractionSubtype, event: Option<Event>, reference: Option<String> },
    /// Plain record synchronization; not an interaction.
    #[serde(rename_all = "camelCase")]
    Sync { event: Event },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PromptKind {
    DataEntry,
    Recommendation,
    Notification,
    Reminder,
}

/// What the patient sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Feed {
    #[serde(rename_all = "camelCase")]
    Reminder { unit: String, concept: Option<String>, due: Timestamp },
    #[serde(rename_all = "camelCase")]
    Prompt {
        prompt: PromptId,
        unit: String,
        concept: String,
        label: String,
        value_type: ValueType,
        deadline: Timestamp,
    },
    #[serde(rename_all = "camelCase")]
    PromptMissed { prompt: PromptId, concept: String },
    #[serde(rename_all = "camelCase")]
    Notification { unit: String, message_id: String, text: String },
    #[serde(rename_all = "camelCase")]
    Recommendation { prompt: PromptId, message_id: String, text: String, needs_response: bool },
    #[serde(rename_all = "camelCase")]
    ProjectionApplied { projection_id: String, stopped: Vec<String>, started: Vec<String>, context: String },
    #[serde(rename_all = "camelCase")]
    CallbackSent { callback_id: String, unit: String },
    #[serde(rename_all = "camelCase")]
    UnitEnded { unit: String, state: TaskState },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Output {
    Up(Upstream),
    Feed(Feed),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DecisionKind {
    Callback,
    Notification,
}

/// A clinical decision taken by the engine, compared under shadowing.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Decision {
    pub at: Timestamp,
    pub unit: String,
    pub kind: DecisionKind,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Response {
    Accept,
    Decline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Input {
    Answer(Response),
    Value(DataValue),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InputError {
    #[error("prompt {0} is not pending")]
    UnknownPrompt(u64),
    #[error("prompt {0} expired")]
    Missed(u64),
    #[error("prompt {0} expects a value")]
    ExpectsValue(u64),
    #[error("prompt {0} expects accept or decline")]
    ExpectsResponse(u64),
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    kind: PromptKind,
    unit: Option<String>,
    concept: String,
    deadline: Timestamp,
    message_id: Option<String>,
}

/// Marks out-of-range values: outside a `VeryLow` range is very low,
/// outside a `Low` range is low.
pub fn grade(declarative: &DeclarativeSection, concept: &str, value: &DataValue) -> Quality {
    let Some(v) = value.as_number() else { return Quality::Normal };
    let outside = |level: QodLevel| {
        declarative.qod_items.iter().any(|q| {
            q.level == level
                && q.relate_to.iter().any(|c| c == concept)
                && q.range.is_some_and(|(lo, hi)| v < lo || v > hi)
        })
    };
    if outside(QodLevel::VeryLow) {
        Quality::VeryLow
    } else if outside(QodLevel::Low) {
        Quality::Low
    } else {
        Quality::Normal
    }
}

#[derive(Debug, Clone)]
pub struct Mdss {
    pub patient_id: String,
    boot: u64,
    tasks: BTreeMap<String, UnitTask>,
    applied: BTreeSet<String>,
    pub index: EventIndex,
    globals: BTreeMap<String, Value>,
    declarative: DeclarativeSection,
    context: String,
    personal_event: Option<String>,
    leads: BTreeMap<String, i64>,
    prompts: BTreeMap<PromptId, Pending>,
    next_prompt: u64,
    next_event: u64,
    decisions: Vec<Decision>,
    now: Option<Timestamp>,
}

impl Mdss {
    /// `boot` distinguishes event ids minted by successive device lifetimes.
    pub fn new(patient_id: impl Into<String>, boot: u64) -> Self {
        Mdss {
            patient_id: patient_id.into(),
            boot,
            tasks: BTreeMap::new(),
            applied: BTreeSet::new(),
            index: EventIndex::new(),
            globals: BTreeMap::new(),
            declarative: DeclarativeSection::default(),
            context: String::new(),
            personal_event: None,
            leads: BTreeMap::new(),
            prompts: BTreeMap::new(),
            next_prompt: 0,
            next_event: 0,
            decisions: Vec::new(),
            now: None,
        }
    }

    pub fn units(&self) -> BTreeSet<String> {
        self.tasks.iter().filter(|(_, t)| t.is_running()).map(|(id, _)| id.clone()).collect()
    }

    pub fn task(&self, unit: &str) -> Option<&UnitTask> {
        self.tasks.get(unit)
    }

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn declarative(&self) -> &DeclarativeSection {
        &self.declarative
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn globals(&self) -> &BTreeMap<String, Value> {
        &self.globals
    }

    /// Pending prompts with their concept and deadline, oldest first.
    pub fn pending(&self) -> Vec<(PromptId, &str, Timestamp, PromptKind)> {
        self.prompts.iter().map(|(id, p)| (*id, p.concept.as_str(), p.deadline, p.kind)).collect()
    }

    pub fn next_wakeup(&self) -> Option<Timestamp> {
        let tasks = self.tasks.values().filter_map(UnitTask::next_wakeup);
        let prompts = self.prompts.values().filter(|p| p.unit.is_none()).map(|p| p.deadline);
        tasks.chain(prompts).min()
    }

    fn mint_event(&mut self, concept: &str, value: DataValue, at: Timestamp, source: Source) -> Event {
        self.next_event += 1;
        let quality = grade(&self.declarative, concept, &value);
        Event {
            id: (self.boot << 32) | self.next_event,
            patient_id: self.patient_id.clone(),
            concept_id: concept.into(),
            value,
            valid_start: at,
            valid_end: at,
            source,
            quality,
        }
    }

    fn refresh_leads(&mut self) {
        let key = self.personal_event.clone().unwrap_or_else(|| self.context.clone());
        self.leads = self
            .declarative
            .personal_event_for(&key)
            .map(|p| p.reminders.iter().map(|r| (r.target_concept_id.clone(), -r.remind_lead_minutes)).collect())
            .unwrap_or_default();
    }

    /// Applies an envelope in its wire form: stop list first, then start list.
    pub fn apply_text(&mut self, text: &str, now: Timestamp) -> Vec<Output> {
        match parse_envelope(text) {
            Ok(env) => self.apply_envelope(&env, now),
            Err(e) => {
                let projection_id = header_projection_id(text).unwrap_or_default();
                let unit = unit_at_line(text, e.line);
                let diagnostics = match &unit {
                    Some(u) => format!("unit {u}: {e}"),
                    None => format!("{e}"),
                };
                alloc::vec![Output::Up(Upstream::Nack { projection_id, unit, diagnostics })]
            }
        }
    }

    pub fn apply_envelope(&mut self, env: &ProjectionEnvelope, now: Timestamp) -> Vec<Output> {
        let ack = Output::Up(Upstream::Ack { projection_id: env.projection_id.clone() });
        if !self.applied.insert(env.projection_id.clone()) {
            return alloc::vec![ack];
        }
        let mut out = Vec::new();
        for id in &env.stop_list {
            if self.tasks.remove(id).is_some() {
                self.prompts.retain(|_, p| p.unit.as_deref() != Some(id.as_str()));
            }
        }
        if !env.current_context.is_empty() {
            self.context = env.current_context.clone();
        }
        if let Some(d) = &env.declarative {
            self.declarative = d.clone();
        }
        self.refresh_leads();
        for u in &env.units {
            self.prompts.retain(|_, p| p.unit.as_deref() != Some(u.id.as_str()));
            self.tasks.insert(u.id.clone(), UnitTask::new(u, now.date()));
        }
        out.push(ack);
        out.push(Output::Feed(Feed::ProjectionApplied {
            projection_id: env.projection_id.clone(),
            stopped: env.stop_list.clone(),
            started: env.start_list.clone(),
            context: self.context.clone(),
        }));
        out.extend(self.step(now));
        out
    }

    /// Resumes every task that can run at `now`, until no task inserts more data.
    pub fn step(&mut self, now: Timestamp) -> Vec<Output> {
        self.now = Some(now);
        let mut out = Vec::new();
        let expired: Vec<PromptId> =
            self.prompts.iter().filter(|(_, p)| p.unit.is_none() && now >= p.deadline).map(|(id, _)| *id).collect();
        for id in expired {
            let p = self.prompts.remove(&id).unwrap();
            out.push(Output::Feed(Feed::PromptMissed { prompt: id, concept: p.concept }));
        }
        for _ in 0..64 {
            let mut inserted = false;
            let ids: Vec<String> = self.tasks.keys().cloned().collect();
            for id in ids {
                let acts = {
                    let task = self.tasks.get_mut(&id).unwrap();
                    if !task.is_running() {
                        continue;
                    }
                    let mut ctx = Ctx {
                        now,
                        events: &self.index,
                        globals: &mut self.globals,
                        reminder_leads: &self.leads,
                        next_prompt: &mut self.next_prompt,
                    };
                    task.advance(&mut ctx)
                };
                for a in acts {
                    inserted |= matches!(a, Action::EventInserted { .. });
                    self.handle(a, now, &mut out);
                }
            }
            if !inserted {
                break;
            }
        }
        self.tasks.retain(|_, t| t.is_running());
        out
    }

    fn handle(&mut self, a: Action, now: Timestamp, out: &mut Vec<Output>) {
        match a {
            Action::Reminder { unit, concept, due } => out.push(Output::Feed(Feed::Reminder { unit, concept, due })),
            Action::Prompt { unit, prompt, concept, label, value_type, deadline, .. } => {
                self.prompts.insert(
                    prompt,
                    Pending {
                        kind: PromptKind::DataEntry,
                        unit: Some(unit.clone()),
                        concept: concept.clone(),
                        deadline,
                        message_id: None,
                    },
                );
                out.push(Output::Feed(Feed::Prompt { prompt, unit, concept, label, value_type, deadline }));
            }
            Action::PromptMissed { prompt, concept, .. } => {
                self.prompts.remove(&prompt);
                out.push(Output::Feed(Feed::PromptMissed { prompt, concept }));
            }
            Action::Notification { unit, message_id, text } => {
                self.decisions.push(Decision {
                    at: now,
                    unit: unit.clone(),
                    kind: DecisionKind::Notification,
                    id: message_id.clone(),
                });
                out.push(Output::Feed(Feed::Notification { unit, message_id, text }));
            }
            Action::Callback { unit, callback_id, message } => {
                self.decisions.push(Decision {
                    at: now,
                    unit: unit.clone(),
                    kind: DecisionKind::Callback,
                    id: callback_id.clone(),
                });
                out.push(Output::Feed(Feed::CallbackSent { callback_id: callback_id.clone(), unit: unit.clone() }));
                out.push(Output::Up(Upstream::Callback { callback_id, message, unit }));
            }
            Action::EventInserted { concept, value, data_driven, .. } => {
                let e = self.mint_event(&concept, value, now, Source::PatientEntry);
                self.index.insert(&e);
                out.push(Output::Up(if data_driven {
                    Upstream::Data { subtype: InteractionSubtype::PatientDataEntry, event: Some(e), reference: None }
                } else {
                    Upstream::Sync { event: e }
                }));
            }
            Action::UnitExpired { unit } => {
                out.push(Output::Feed(Feed::UnitEnded { unit, state: TaskState::Expired }));
            }
            Action::UnitFault { unit, .. } => {
                out.push(Output::Feed(Feed::UnitEnded { unit, state: TaskState::Faulted }));
            }
        }
    }

    /// A measurement taken on the device (sensor or manual entry). It answers
    /// the oldest pending prompt for the same concept, if any.
    pub fn local_event(&mut self, concept: &str, value: DataValue, at: Timestamp, source: Source) -> Vec<Output> {
        let waiting = self
            .prompts
            .iter()
            .find(|(_, p)| p.kind == PromptKind::DataEntry && p.concept == concept && at < p.deadline)
            .map(|(id, p)| (*id, p.unit.clone()));
        if let Some((prompt, Some(unit))) = waiting {
            if let Some(task) = self.tasks.get_mut(&unit) {
                if task.answer(prompt, value.clone(), at).is_ok() {
                    self.prompts.remove(&prompt);
                    return self.step(at);
                }
            }
        }
        let e = self.mint_event(concept, value, at, source);
        self.index.insert(&e);
        let mut out = alloc::vec![Output::Up(Upstream::Sync { event: e })];
        out.extend(self.step(at));
        out
    }

    /// A patient's response to a pending prompt or recommendation.
    pub fn patient_input(&mut self, prompt: PromptId, input: Input, now: Timestamp) -> Result<Vec<Output>, InputError> {
        let Some(p) = self.prompts.get(&prompt).cloned() else {
            return Err(InputError::UnknownPrompt(prompt.0));
        };
        if now >= p.deadline {
            return Err(InputError::Missed(prompt.0));
        }
        match (p.kind, input) {
            (PromptKind::DataEntry, Input::Value(v)) => {
                let unit = p.unit.clone().unwrap_or_default();
                let task = self.tasks.get_mut(&unit).ok_or(InputError::UnknownPrompt(prompt.0))?;
                task.answer(prompt, v, now).map_err(|e| match e {
                    AnswerError::Missed => InputError::Missed(prompt.0),
                    AnswerError::UnknownPrompt => InputError::UnknownPrompt(prompt.0),
                })?;
                self.prompts.remove(&prompt);
                Ok(self.step(now))
            }
            (PromptKind::DataEntry, Input::Answer(_)) => Err(InputError::ExpectsValue(prompt.0)),
            (PromptKind::Recommendation, Input::Answer(r)) => {
                self.prompts.remove(&prompt);
                let message_id = p.message_id.clone().unwrap_or_default();
                let accepted = r == Response::Accept;
                let e = self.mint_event(&message_id, DataValue::Bool(accepted), now, Source::PatientEntry);
                self.index.insert(&e);
                let subtype =
                    if accepted { InteractionSubtype::PatientAccepted } else { InteractionSubtype::PatientDeclined };
                let mut out =
                    alloc::vec![Output::Up(Upstream::Data { subtype, event: Some(e), reference: Some(message_id) })];
                out.extend(self.step(now));
                Ok(out)
            }
            (PromptKind::Recommendation, Input::Value(_)) => Err(InputError::ExpectsResponse(prompt.0)),
            (_, _) => Err(InputError::UnknownPrompt(prompt.0)),
        }
    }

    /// A recommendation or notification sent directly by the central engine.
    pub fn receive_recommendation(
        &mut self,
        message_id: &str,
        text: &str,
        needs_response: bool,
        deadline: Timestamp,
    ) -> Vec<Output> {
        self.next_prompt += 1;
        let prompt = PromptId(self.next_prompt);
        if needs_response {
            self.prompts.insert(
                prompt,
                Pending {
                    kind: PromptKind::Recommendation,
                    unit: None,
                    concept: message_id.into(),
                    deadline,
                    message_id: Some(message_id.into()),
                },
            );
        }
        alloc::vec![Output::Feed(Feed::Recommendation {
            prompt,
            message_id: message_id.into(),
            text: text.into(),
            needs_response,
        })]
    }

    /// The patient reports a personal event such as a holiday.
    pub fn switch_context(&mut self, personal_event: &str, now: Timestamp) -> Vec<Output> {
        let concept = self
            .declarative
            .personal_events
            .iter()
            .find(|p| p.event_name == personal_event)
            .map(|p| p.concept_id.clone())
            .unwrap_or_else(|| PERSONAL_EVENT_CONCEPT.into());
        self.personal_event = Some(personal_event.into());
        self.refresh_leads();
        let e = self.mint_event(&concept, DataValue::Text(personal_event.into()), now, Source::PatientEntry);
        self.index.insert(&e);
        let mut out = alloc::vec![Output::Up(Upstream::Data {
            subtype: InteractionSubtype::ContextChanged,
            event: Some(e),
            reference: Some(personal_event.into()),
        })];
        out.extend(self.step(now));
        out
    }

    /// Data recorded elsewhere (care giver, hospital) mirrored onto the device.
    pub fn mirror_event(&mut self, e: &Event, now: Timestamp) -> Vec<Output> {
        self.index.insert(e);
        self.step(now)
    }
}

fn header_projection_id(text: &str) -> Option<String> {
    let start = text.find("id=\"")? + 4;
    let end = text[start..].find('"')?;
    Some(String::from(&text[start..start + end]))
}

/// Id of the unit whose header precedes `line` (1-based).
fn unit_at_line(text: &str, line: u32) -> Option<String> {
    let mut found = None;
    for (i, l) in text.lines().enumerate() {
        if i as u32 + 1 > line {
            break;
        }
        if let Some(pos) = l.find("unitProjection(") {
            let rest = &l[pos + "unitProjection(".len()..];
            let rest = rest.trim_start().strip_prefix('"')?;
            found = rest.find('"').map(|e| String::from(&rest[..e]));
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{QodItem, Reminder};
    use crate::time::parse_time_of_day;
    use alloc::vec;
    use chrono::NaiveDate;

    const BG: &str = include_str!("../../../fixtures/corpus/bg_schedule.pcb");

    fn at(d: u32, h: u32, m: u32) -> Timestamp {
        NaiveDate::from_ymd_opt(2014, 3, d).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    fn ups(out: &[Output]) -> Vec<&Upstream> {
        out.iter()
            .filter_map(|o| match o {
                Output::Up(u) => Some(u),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn applies_bg_schedule() {
        let mut m = Mdss::new("molly", 1);
        let out = m.apply_text(BG, at(3, 0, 0));
        assert_eq!(ups(&out), [&Upstream::Ack { projection_id: "184".into() }]);
        assert_eq!(m.units().into_iter().collect::<Vec<_>>(), ["20102", "20130"]);
        let again = m.apply_text(BG, at(3, 1, 0));
        assert_eq!(again, vec![Output::Up(Upstream::Ack { projection_id: "184".into() })]);
        assert_eq!(m.units().len(), 2);
    }

    #[test]
    fn malformed_unit_is_named_in_nack() {
        let broken = BG.replace("event.insert();", "event.insert(;");
        let mut m = Mdss::new("p", 1);
        let out = m.apply_text(&broken, at(3, 0, 0));
        let [Upstream::Nack { projection_id, unit, .. }] = &ups(&out)[..] else { panic!("{out:?}") };
        assert_eq!((projection_id.as_str(), unit.as_deref()), ("184", Some("20102")));
        assert!(m.units().is_empty());
    }

    #[test]
    fn measurement_answers_prompt_and_abnormal_dates_call_back() {
        let mut m = Mdss::new("p", 1);
        m.apply_text(BG, at(3, 0, 0));
        let out = m.step(at(3, 8, 0));
        assert!(out.iter().any(|o| matches!(o, Output::Feed(Feed::Prompt { concept, .. }) if concept == "4985")));
        let out = m.local_event("4985", DataValue::Number(160.0), at(3, 8, 5), Source::PatientEntry);
        assert!(matches!(ups(&out)[..], [Upstream::Sync { .. }]));
        assert!(m.pending().is_empty());
        let out = m.local_event("4986", DataValue::Number(170.0), at(5, 10, 0), Source::PatientEntry);
        let callbacks: Vec<_> = ups(&out)
            .into_iter()
            .filter(|u| matches!(u, Upstream::Callback { callback_id, .. } if callback_id == "5112"))
            .collect();
        assert_eq!(callbacks.len(), 1);
        assert_eq!(m.decisions().len(), 1);
    }

    #[test]
    fn quality_grading() {
        let d = DeclarativeSection {
            qod_items: vec![
                QodItem {
                    quality_id: "q1".into(),
                    level: QodLevel::VeryLow,
                    relate_to: vec!["5177".into()],
                    range: Some((60.0, 250.0)),
                },
                QodItem {
                    quality_id: "q2".into(),
                    level: QodLevel::Low,
                    relate_to: vec!["5177".into()],
                    range: Some((70.0, 240.0)),
                },
            ],
            personal_events: vec![],
        };
        assert_eq!(grade(&d, "5177", &DataValue::Number(120.0)), Quality::Normal);
        assert_eq!(grade(&d, "5177", &DataValue::Number(400.0)), Quality::VeryLow);
        assert_eq!(grade(&d, "5177", &DataValue::Number(245.0)), Quality::Low);
        assert_eq!(grade(&d, "5178", &DataValue::Number(400.0)), Quality::Normal);
    }

    #[test]
    fn recommendation_accept_and_expiry() {
        let mut m = Mdss::new("p", 1);
        let out = m.receive_recommendation("5051", "Increase carbohydrates at dinner/bedtime", true, at(4, 8, 5));
        let Output::Feed(Feed::Recommendation { prompt, .. }) = out[0] else { panic!() };
        assert_eq!(
            m.patient_input(prompt, Input::Value(DataValue::Bool(true)), at(3, 8, 5)),
            Err(InputError::ExpectsResponse(prompt.0))
        );
        let out = m.patient_input(prompt, Input::Answer(Response::Accept), at(3, 8, 5)).unwrap();
        assert!(matches!(ups(&out)[..], [Upstream::Data { subtype: InteractionSubtype::PatientAccepted, .. }]));
        let out = m.receive_recommendation("5052", "x", true, at(3, 9, 0));
        let Output::Feed(Feed::Recommendation { prompt, .. }) = out[0] else { panic!() };
        assert_eq!(
            m.patient_input(prompt, Input::Answer(Response::Decline), at(3, 10, 30)),
            Err(InputError::Missed(prompt.0))
        );
    }

    #[test]
    fn context_switch_changes_reminder_lead() {
        let mut env = parse_envelope(BG).unwrap();
        let reminder = |h: &str, lead: i64| Reminder {
            value: parse_time_of_day(h).unwrap(),
            remind_lead_minutes: lead,
            target_concept_id: "4985".into(),
        };
        env.declarative = Some(DeclarativeSection {
            qod_items: vec![],
            personal_events: vec![
                crate::lang::PersonalEvent {
                    concept_id: "5128".into(),
                    event_name: "Diario".into(),
                    context: None,
                    reminders: vec![reminder("09:00", -5)],
                },
                crate::lang::PersonalEvent {
                    concept_id: "5138".into(),
                    event_name: "Festivo".into(),
                    context: None,
                    reminders: vec![reminder("10:00", -15)],
                },
            ],
        });
        env.current_context = "Diario".into();
        let mut m = Mdss::new("p", 1);
        m.apply_envelope(&env, at(3, 0, 0));
        assert_eq!(m.next_wakeup(), Some(at(3, 7, 55)));
        let out = m.switch_context("Festivo", at(3, 1, 0));
        let [Upstream::Data { subtype: InteractionSubtype::ContextChanged, event: Some(e), .. }] = &ups(&out)[..]
        else {
            panic!()
        };
        assert_eq!(e.concept_id, "5138");
    }
}
