//! Deterministic simulation of one patient: the central engine, the device
//! and the link between them, driven by a single simulated clock.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};

use crate::bedss::{shadow_check, BeOutput, Bedss, Divergence, Downstream, Policy};
use crate::channel::{Body, Channel, ChannelConfig, ChannelEvent, ChannelOutput, Direction, Kind};
use crate::knowledge::{KnowledgeBase, MessageKind};
use crate::mdss::{Feed, Input, Mdss, Output, PromptKind, Response, Upstream};
use crate::metrics::{compute_metrics, days_in_system, SessionMetrics};
use crate::phr::{
    DataValue, DircRule, Event, InteractionRecord, InteractionSubtype, PatientRecord, PhrError, Preference,
    Prescription, Quality, Source, PERSONAL_EVENT_CONCEPT,
};
use crate::time::{next_midnight, start_of_day, Date, Span, Timestamp};

/// Concept ids that script device failures in a scenario.
pub const CRASH_CONCEPT: &str = "deviceCrash";
pub const RESTART_CONCEPT: &str = "deviceRestart";

/// Default tolerance around an assertion's expected time.
pub const DEFAULT_ASSERTION_WINDOW_DAYS: i64 = 1;

const PUMP_LIMIT: usize = 100_000;
const CENTRAL_EVENT_BOOT: u64 = 0xFFFF_FFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratedBy {
    #[serde(rename = "SmartphoneGUI")]
    SmartphoneGui,
    #[serde(rename = "mDSS")]
    Mdss,
    #[serde(rename = "BE-DSS")]
    Bedss,
    #[serde(rename = "EMR")]
    Emr,
    #[serde(rename = "careGiver")]
    CareGiver,
}

impl FromStr for GeneratedBy {
    type Err = String;

    /// Matches the leading word, so annotated cells such as
    /// `mDSS (sending message)` are accepted.
    fn from_str(s: &str) -> Result<Self, String> {
        let head: String =
            s.trim().chars().take_while(|c| c.is_alphanumeric() || *c == '-').collect::<String>().to_lowercase();
        match head.as_str() {
            "smartphonegui" | "smartphone" | "patient" => Ok(GeneratedBy::SmartphoneGui),
            "mdss" => Ok(GeneratedBy::Mdss),
            "be-dss" | "bedss" => Ok(GeneratedBy::Bedss),
            "emr" => Ok(GeneratedBy::Emr),
            "caregiver" => Ok(GeneratedBy::CareGiver),
            _ => Err(format!("unknown generatedBy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AssertKind {
    Notification,
    Recommendation,
    Callback,
    Projection,
    Prompt,
    Reminder,
    Accept,
    Decline,
}

impl FromStr for AssertKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_assert_kind(s).ok_or_else(|| format!("unknown assertion kind {s:?}"))
    }
}

fn parse_assert_kind(s: &str) -> Option<AssertKind> {
    Some(match s.trim() {
        "notification" => AssertKind::Notification,
        "recommendation" => AssertKind::Recommendation,
        "callback" => AssertKind::Callback,
        "projection" => AssertKind::Projection,
        "prompt" => AssertKind::Prompt,
        "reminder" => AssertKind::Reminder,
        "accept" => AssertKind::Accept,
        "decline" => AssertKind::Decline,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioRow {
    pub week: u32,
    pub day_in_week: u32,
    pub day_of_treatment: u32,
    pub valid_time: String,
    pub concept_id: String,
    pub vmr_class: String,
    pub concept_name: String,
    pub valid_start: Timestamp,
    pub valid_end: Timestamp,
    pub value: String,
    pub step: String,
    pub generated_by: GeneratedBy,
    /// Explicit assertion kind; inferred from the ids when absent.
    #[serde(default)]
    pub kind: Option<AssertKind>,
    #[serde(default)]
    pub window: Option<Span>,
}

impl ScenarioRow {
    /// Letter-suffixed steps, and rows attributed to an engine, state
    /// expectations rather than inputs.
    pub fn is_assertion(&self) -> bool {
        self.step.trim().chars().last().is_some_and(|c| c.is_ascii_alphabetic())
            || matches!(self.generated_by, GeneratedBy::Mdss | GeneratedBy::Bedss)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub rows: Vec<ScenarioRow>,
}

/// What the patient profile contributes to the record before a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PatientProfile {
    pub patient_id: String,
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
    #[serde(default)]
    pub preferences: Vec<Preference>,
    #[serde(default)]
    pub dircs: Vec<DircRule>,
    #[serde(default)]
    pub prescriptions: Vec<Prescription>,
}

impl PatientProfile {
    pub fn apply_to(&self, phr: &mut PatientRecord) -> Result<(), PhrError> {
        for p in &self.preferences {
            phr.set_preference(p.clone());
        }
        for d in &self.dircs {
            phr.add_dirc(d.clone());
        }
        for p in &self.prescriptions {
            phr.add_prescription(p.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Actor {
    Harness,
    Device,
    Central,
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "camelCase")]
pub enum InputAction {
    #[serde(rename_all = "camelCase")]
    Measurement {
        concept: String,
        value: DataValue,
    },
    #[serde(rename_all = "camelCase")]
    Respond {
        message_id: String,
        response: Response,
    },
    #[serde(rename_all = "camelCase")]
    Answer {
        prompt: u64,
        input: Input,
    },
    #[serde(rename_all = "camelCase")]
    SwitchContext {
        personal_event: String,
    },
    #[serde(rename_all = "camelCase")]
    RecordEvent {
        concept: String,
        value: DataValue,
    },
    #[serde(rename_all = "camelCase")]
    CareGiverResponse {
        message_id: String,
        response: Response,
    },
    Crash,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "camelCase")]
pub enum Entry {
    #[serde(rename_all = "camelCase")]
    Input {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        step: Option<String>,
        #[serde(flatten)]
        action: InputAction,
    },
    #[serde(rename_all = "camelCase")]
    Rejected {
        reason: String,
    },
    Feed {
        feed: Feed,
    },
    Channel {
        event: ChannelEvent,
    },
    #[serde(rename_all = "camelCase")]
    Message {
        msg_id: String,
        kind: Kind,
        direction: Direction,
        summary: String,
    },
    #[serde(rename_all = "camelCase")]
    DeliveryFailed {
        msg_id: String,
        kind: Kind,
    },
    #[serde(rename_all = "camelCase")]
    CareGiver {
        message_id: String,
        text: String,
        needs_response: bool,
    },
    Diagnostic {
        text: String,
    },
    Interaction {
        record: InteractionRecord,
    },
    #[serde(rename_all = "camelCase")]
    Assertion {
        step: String,
        kind: AssertKind,
        id: String,
        passed: bool,
    },
    /// Closes a scenario run with the span metrics are computed over.
    #[serde(rename_all = "camelCase")]
    Session {
        first: Date,
        last: Date,
        days_in_system: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TranscriptLine {
    pub at: Timestamp,
    pub actor: Actor,
    #[serde(flatten)]
    pub entry: Entry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssertionResult {
    pub step: String,
    pub kind: AssertKind,
    pub id: String,
    pub expected_at: Timestamp,
    pub matched_at: Option<Timestamp>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub policy: Policy,
    pub assertions: Vec<AssertionResult>,
    pub metrics: SessionMetrics,
    pub divergences: Vec<Divergence>,
    /// Ledger active set equals the device's running units.
    pub consistent: bool,
    pub ledger_active: Vec<String>,
    pub device_active: Vec<String>,
    pub undelivered_messages: usize,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

pub struct World {
    pub bedss: Bedss,
    device: Option<Mdss>,
    boot: u64,
    pub channel: Channel,
    now: Timestamp,
    started: bool,
    transcript: Vec<TranscriptLine>,
    logged_interactions: usize,
    recommendation_msgs: BTreeMap<String, String>,
    central_events: u64,
    pending_assertions: Vec<ScenarioRow>,
    transport: Option<Box<dyn Transport>>,
}

/// Carries each delivered message over a real medium before the receiving
/// engine sees it. The in-process default hands messages over unchanged.
pub trait Transport {
    fn carry(&mut self, m: crate::channel::Message) -> Result<crate::channel::Message, String>;
}

impl World {
    pub fn new(
        kb: KnowledgeBase,
        phr: PatientRecord,
        policy: Policy,
        thresholds: &BTreeMap<String, f64>,
        config: ChannelConfig,
    ) -> Self {
        let pid = phr.patient_id.clone();
        let logged = phr.interactions().len();
        World {
            bedss: Bedss::new(kb, phr, policy, thresholds),
            device: Some(Mdss::new(pid.clone(), 1)),
            boot: 1,
            channel: Channel::new(pid, config),
            now: Timestamp::default(),
            started: false,
            transcript: Vec::new(),
            logged_interactions: logged,
            recommendation_msgs: BTreeMap::new(),
            central_events: 0,
            pending_assertions: Vec::new(),
            transport: None,
        }
    }

    pub fn set_transport(&mut self, t: Box<dyn Transport>) {
        self.transport = Some(t);
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn started(&self) -> bool {
        self.started
    }

    pub fn device(&self) -> Option<&Mdss> {
        self.device.as_ref()
    }

    pub fn transcript(&self) -> &[TranscriptLine] {
        &self.transcript
    }

    fn push(&mut self, actor: Actor, entry: Entry) {
        self.transcript.push(TranscriptLine { at: self.now, actor, entry });
    }

    fn drain_channel(&mut self) {
        for event in self.channel.take_events() {
            if let ChannelEvent::Acked { msg_id } = &event {
                if let Some(m) = self.recommendation_msgs.get(msg_id).cloned() {
                    self.bedss.mark_delivered(&m);
                }
            }
            self.push(Actor::Channel, Entry::Channel { event });
        }
    }

    fn sync_interactions(&mut self) {
        let records: Vec<InteractionRecord> = self.bedss.phr.interactions()[self.logged_interactions..].to_vec();
        self.logged_interactions += records.len();
        for record in records {
            self.push(Actor::Central, Entry::Interaction { record });
        }
    }

    fn route_central(&mut self, outs: Vec<BeOutput>) {
        self.sync_interactions();
        for o in outs {
            match o {
                BeOutput::Device(d) => {
                    let message_id = match &d {
                        Downstream::Recommendation { message_id, .. } => Some(message_id.clone()),
                        _ => None,
                    };
                    let id = self.channel.send(Body::Down(d), None, self.now);
                    if let Some(m) = message_id {
                        self.recommendation_msgs.insert(id, m);
                    }
                }
                BeOutput::CareGiver { message_id, text, needs_response } => {
                    self.push(Actor::Central, Entry::CareGiver { message_id, text, needs_response })
                }
                BeOutput::Diagnostic { text } => self.push(Actor::Central, Entry::Diagnostic { text }),
            }
        }
        self.drain_channel();
    }

    fn route_device(&mut self, outs: Vec<Output>, answering: Option<&str>) {
        for o in outs {
            match o {
                Output::Feed(feed) => self.push(Actor::Device, Entry::Feed { feed }),
                Output::Up(u @ (Upstream::Ack { .. } | Upstream::Nack { .. })) => {
                    if let Some(m) = answering {
                        self.channel.send(Body::Up(u), Some(m.into()), self.now);
                    }
                }
                Output::Up(u) => {
                    self.channel.send(Body::Up(u), None, self.now);
                }
            }
        }
        self.drain_channel();
    }

    fn summarize(m: &crate::channel::Message) -> String {
        match &m.payload {
            Body::Down(Downstream::Projection { projection_id, history, .. }) => {
                format!("projection {projection_id} ({} history events)", history.len())
            }
            Body::Down(Downstream::Recommendation { message_id, .. }) => format!("recommendation {message_id}"),
            Body::Down(Downstream::Mirror { event }) => format!("event {} {}", event.concept_id, event.value),
            Body::Up(Upstream::Ack { projection_id }) => format!("ack {projection_id}"),
            Body::Up(Upstream::Nack { projection_id, diagnostics, .. }) => {
                format!("nack {projection_id}: {diagnostics}")
            }
            Body::Up(Upstream::Callback { callback_id, unit, .. }) => format!("callback {callback_id} from {unit}"),
            Body::Up(Upstream::Data { subtype, reference, .. }) => {
                format!("{subtype:?} {}", reference.as_deref().unwrap_or(""))
            }
            Body::Up(Upstream::Sync { event }) => format!("event {} {}", event.concept_id, event.value),
            Body::Empty {} => m.kind.as_str().into(),
        }
    }

    fn deliver(&mut self, out: ChannelOutput) {
        let now = self.now;
        match out {
            ChannelOutput::Failed(m) => {
                self.push(Actor::Channel, Entry::DeliveryFailed { msg_id: m.msg_id, kind: m.kind });
            }
            ChannelOutput::Deliver(m) => {
                let m = match self.transport.as_mut().map(|t| t.carry(m.clone())) {
                    None => m,
                    Some(Ok(carried)) => carried,
                    Some(Err(e)) => {
                        self.push(Actor::Channel, Entry::Diagnostic { text: format!("transport: {e}") });
                        m
                    }
                };
                let summary = Self::summarize(&m);
                self.push(
                    Actor::Channel,
                    Entry::Message { msg_id: m.msg_id.clone(), kind: m.kind, direction: m.direction, summary },
                );
                match (m.direction, m.payload) {
                    (Direction::Down, Body::Down(d)) => {
                        let Some(dev) = self.device.as_mut() else { return };
                        match d {
                            Downstream::Projection { text, history, .. } => {
                                let mut outs = Vec::new();
                                for e in &history {
                                    outs.extend(dev.mirror_event(e, now));
                                }
                                outs.extend(dev.apply_text(&text, now));
                                self.route_device(outs, Some(&m.msg_id));
                            }
                            Downstream::Recommendation { message_id, text, needs_response } => {
                                let outs = dev.receive_recommendation(
                                    &message_id,
                                    &text,
                                    needs_response,
                                    Bedss::recommendation_deadline(now),
                                );
                                self.route_device(outs, None);
                            }
                            Downstream::Mirror { event } => {
                                let outs = dev.mirror_event(&event, now);
                                self.route_device(outs, None);
                            }
                        }
                    }
                    (Direction::Up, Body::Up(u)) => {
                        let outs = self.bedss.receive(u, now);
                        self.route_central(outs);
                    }
                    (Direction::Up, Body::Empty {}) if m.kind == Kind::CrashRecoveryRequest => {
                        let outs = self.bedss.recover(now);
                        self.route_central(outs);
                    }
                    (Direction::Up, Body::Empty {}) if m.kind == Kind::Enroll => {
                        let outs = self.bedss.start_session(now);
                        self.route_central(outs);
                    }
                    _ => {}
                }
            }
        }
    }

    /// Runs everything due at the current instant until nothing is left.
    fn pump(&mut self) {
        let now = self.now;
        for _ in 0..PUMP_LIMIT {
            let mut busy = false;
            if let Some(dev) = self.device.as_mut() {
                if dev.next_wakeup().is_some_and(|t| t <= now) {
                    let outs = dev.step(now);
                    self.route_device(outs, None);
                    busy = true;
                }
            }
            if self.bedss.next_wakeup().is_some_and(|t| t <= now) {
                let outs = self.bedss.step(now);
                self.route_central(outs);
                busy = true;
            }
            if self.channel.next_due().is_some_and(|t| t <= now) {
                let outs = self.channel.poll(now);
                self.drain_channel();
                for o in outs {
                    self.deliver(o);
                }
                busy = true;
            }
            if !busy {
                return;
            }
        }
        self.push(Actor::Harness, Entry::Diagnostic { text: format!("no quiescence at {now}") });
    }

    fn next_due(&self) -> Option<Timestamp> {
        [self.device.as_ref().and_then(Mdss::next_wakeup), self.bedss.next_wakeup(), self.channel.next_due()]
            .into_iter()
            .flatten()
            .min()
    }

    /// Instantiates the guideline for the patient at `at`.
    pub fn start(&mut self, at: Timestamp) {
        self.now = at;
        self.started = true;
        let outs = self.bedss.start_session(at);
        self.route_central(outs);
        self.pump();
    }

    /// Moves the clock forward to `target`, running every wakeup, delivery,
    /// timeout and day rollover on the way.
    pub fn advance_to(&mut self, target: Timestamp) {
        if target < self.now {
            return;
        }
        loop {
            self.pump();
            let midnight = next_midnight(self.now);
            let next = self.next_due().map_or(midnight, |t| t.min(midnight));
            if next > target {
                break;
            }
            self.now = next;
            if next == midnight {
                let completed = midnight.date().pred_opt().expect("date in range");
                let outs = self.bedss.rollover(completed);
                self.route_central(outs);
            }
        }
        self.now = target;
        self.pump();
    }

    pub fn advance_by(&mut self, d: TimeDelta) {
        self.advance_to(self.now + d);
    }

    fn input(&mut self, step: Option<&str>, action: InputAction) {
        self.push(Actor::Harness, Entry::Input { step: step.map(String::from), action });
    }

    fn reject(&mut self, reason: String) {
        self.push(Actor::Harness, Entry::Rejected { reason });
    }

    /// A value entered or measured on the device.
    pub fn patient_value(&mut self, concept: &str, value: DataValue, step: Option<&str>) {
        self.input(step, InputAction::Measurement { concept: concept.into(), value: value.clone() });
        let now = self.now;
        let Some(dev) = self.device.as_mut() else {
            return self.reject("device is down".into());
        };
        let outs = dev.local_event(concept, value, now, Source::PatientEntry);
        self.route_device(outs, None);
        self.pump();
    }

    /// Answers a pending prompt or recommendation by its id.
    pub fn patient_answer(&mut self, prompt: u64, input: Input) {
        self.input(None, InputAction::Answer { prompt, input: input.clone() });
        let now = self.now;
        let Some(dev) = self.device.as_mut() else {
            return self.reject("device is down".into());
        };
        match dev.patient_input(crate::interp::PromptId(prompt), input, now) {
            Ok(outs) => self.route_device(outs, None),
            Err(e) => self.reject(format!("{e}")),
        }
        self.pump();
    }

    /// Accepts or declines the oldest pending recommendation `message_id`.
    pub fn patient_respond(&mut self, message_id: &str, response: Response, step: Option<&str>) {
        self.input(step, InputAction::Respond { message_id: message_id.into(), response });
        let now = self.now;
        let Some(dev) = self.device.as_mut() else {
            return self.reject("device is down".into());
        };
        let prompt = dev
            .pending()
            .into_iter()
            .find(|(_, c, _, k)| *k == PromptKind::Recommendation && *c == message_id)
            .map(|(p, ..)| p);
        let Some(prompt) = prompt else {
            return self.reject(format!("no pending recommendation {message_id}"));
        };
        match dev.patient_input(prompt, Input::Answer(response), now) {
            Ok(outs) => self.route_device(outs, None),
            Err(e) => self.reject(format!("{e}")),
        }
        self.pump();
    }

    pub fn switch_context(&mut self, personal_event: &str, step: Option<&str>) {
        self.input(step, InputAction::SwitchContext { personal_event: personal_event.into() });
        let now = self.now;
        let Some(dev) = self.device.as_mut() else {
            return self.reject("device is down".into());
        };
        let outs = dev.switch_context(personal_event, now);
        self.route_device(outs, None);
        self.pump();
    }

    /// Data entered centrally by a care giver or the hospital record.
    pub fn record_event(&mut self, concept: &str, value: DataValue, source: Source, step: Option<&str>) {
        self.input(step, InputAction::RecordEvent { concept: concept.into(), value: value.clone() });
        self.central_events += 1;
        let e = Event {
            id: (CENTRAL_EVENT_BOOT << 32) | self.central_events,
            patient_id: self.bedss.phr.patient_id.clone(),
            concept_id: concept.into(),
            value,
            valid_start: self.now,
            valid_end: self.now,
            source,
            quality: Quality::Normal,
        };
        let outs = self.bedss.record_event(e, self.now);
        self.route_central(outs);
        self.pump();
    }

    pub fn care_giver_response(&mut self, message_id: &str, response: Response, step: Option<&str>) {
        self.input(step, InputAction::CareGiverResponse { message_id: message_id.into(), response });
        let outs = self.bedss.care_giver_response(message_id, response, self.now);
        self.route_central(outs);
        self.pump();
    }

    pub fn crash(&mut self, step: Option<&str>) {
        self.input(step, InputAction::Crash);
        self.device = None;
        self.channel.crash_device();
        self.drain_channel();
    }

    pub fn restart(&mut self, step: Option<&str>) {
        self.input(step, InputAction::Restart);
        if self.device.is_some() {
            return self.reject("device is already running".into());
        }
        self.boot += 1;
        self.device = Some(Mdss::new(self.bedss.phr.patient_id.clone(), self.boot));
        self.channel.restart_device(self.now);
        self.drain_channel();
        self.pump();
    }

    fn personal_event_concepts(&self) -> BTreeSet<String> {
        let mut s: BTreeSet<String> = self.bedss.phr.dircs().iter().map(|d| d.personal_event_concept.clone()).collect();
        s.insert(PERSONAL_EVENT_CONCEPT.into());
        s
    }

    fn infer_kind(&self, row: &ScenarioRow) -> AssertKind {
        let kb = &self.bedss.kb;
        let id = row.concept_id.as_str();
        if kb.callback(id).is_some() {
            return AssertKind::Callback;
        }
        if let Some(m) = kb.message(id) {
            return match (m.kind, row.generated_by) {
                (MessageKind::Recommendation, GeneratedBy::Bedss) => AssertKind::Recommendation,
                (MessageKind::Recommendation, _) if response_of(&row.value) == Some(Response::Decline) => {
                    AssertKind::Decline
                }
                (MessageKind::Recommendation, _) => AssertKind::Accept,
                (MessageKind::Notification, _) => AssertKind::Notification,
            };
        }
        if kb.plan(id).is_some() {
            return AssertKind::Projection;
        }
        let entry =
            kb.plans().iter().filter_map(|p| kb.unit(&p.id)).any(|u| u.data_entry_concepts().iter().any(|c| c == id));
        if entry {
            return AssertKind::Prompt;
        }
        AssertKind::Notification
    }

    /// Applies one scenario row at the current instant.
    pub fn apply_row(&mut self, row: &ScenarioRow) {
        let step = Some(row.step.as_str()).filter(|s| !s.is_empty());
        match row.concept_id.as_str() {
            CRASH_CONCEPT => return self.crash(step),
            RESTART_CONCEPT => return self.restart(step),
            _ => {}
        }
        if row.is_assertion() {
            let kind = row.kind.unwrap_or_else(|| self.infer_kind(row));
            match kind {
                AssertKind::Prompt if !row.value.trim().is_empty() => {
                    self.patient_value(&row.concept_id, DataValue::parse_loose(&row.value), step)
                }
                AssertKind::Accept => self.patient_respond(&row.concept_id, Response::Accept, step),
                AssertKind::Decline => self.patient_respond(&row.concept_id, Response::Decline, step),
                _ => {}
            }
            let mut row = row.clone();
            row.kind = Some(kind);
            self.pending_assertions.push(row);
            return;
        }
        match row.generated_by {
            GeneratedBy::SmartphoneGui if self.personal_event_concepts().contains(&row.concept_id) => {
                self.switch_context(row.value.trim(), step)
            }
            GeneratedBy::SmartphoneGui => match (response_of(&row.value), self.bedss.kb.message(&row.concept_id)) {
                (Some(r), Some(_)) => self.patient_respond(&row.concept_id, r, step),
                _ => self.patient_value(&row.concept_id, DataValue::parse_loose(&row.value), step),
            },
            GeneratedBy::CareGiver => match response_of(&row.value) {
                Some(r) if self.bedss.kb.message(&row.concept_id).is_some() => {
                    self.care_giver_response(&row.concept_id, r, step)
                }
                _ => self.record_event(&row.concept_id, DataValue::parse_loose(&row.value), Source::CareGiver, step),
            },
            GeneratedBy::Emr => {
                self.record_event(&row.concept_id, DataValue::parse_loose(&row.value), Source::CareGiver, step)
            }
            GeneratedBy::Mdss | GeneratedBy::Bedss => {}
        }
    }

    fn matches(kind: AssertKind, id: &str, row: &ScenarioRow, line: &TranscriptLine) -> bool {
        let stop = row.value.trim().eq_ignore_ascii_case("stop");
        match (&line.entry, kind) {
            (Entry::Feed { feed: Feed::Notification { message_id, .. } }, AssertKind::Notification) => message_id == id,
            (
                Entry::Feed { feed: Feed::Recommendation { message_id, .. } },
                AssertKind::Notification | AssertKind::Recommendation,
            ) => message_id == id,
            (Entry::CareGiver { message_id, .. }, AssertKind::Notification | AssertKind::Recommendation) => {
                message_id == id
            }
            (Entry::Feed { feed: Feed::CallbackSent { callback_id, .. } }, AssertKind::Callback) => callback_id == id,
            (Entry::Feed { feed: Feed::Prompt { concept, .. } }, AssertKind::Prompt) => concept == id,
            (Entry::Feed { feed: Feed::Reminder { concept: Some(c), .. } }, AssertKind::Reminder) => c == id,
            (Entry::Feed { feed: Feed::ProjectionApplied { started, stopped, .. } }, AssertKind::Projection) => {
                if stop {
                    stopped.iter().any(|u| u == id)
                } else {
                    started.iter().any(|u| u == id)
                }
            }
            (Entry::Interaction { record }, AssertKind::Accept) => {
                record.subtype == InteractionSubtype::PatientAccepted && record.detail == id
            }
            (Entry::Interaction { record }, AssertKind::Decline) => {
                record.subtype == InteractionSubtype::PatientDeclined && record.detail == id
            }
            _ => false,
        }
    }

    /// Checks every assertion seen so far against the transcript.
    pub fn check_assertions(&mut self) -> Vec<AssertionResult> {
        let rows = core::mem::take(&mut self.pending_assertions);
        let mut results = Vec::new();
        for row in rows {
            let kind = row.kind.expect("kind set when queued");
            let window = row.window.map_or(TimeDelta::days(DEFAULT_ASSERTION_WINDOW_DAYS), |w| w.to_delta());
            let (lo, hi) = (row.valid_start - window, row.valid_start + window);
            let matched_at = self
                .transcript
                .iter()
                .filter(|l| l.at >= lo && l.at <= hi)
                .find(|l| Self::matches(kind, &row.concept_id, &row, l))
                .map(|l| l.at);
            let passed = matched_at.is_some();
            results.push(AssertionResult {
                step: row.step.clone(),
                kind,
                id: row.concept_id.clone(),
                expected_at: row.valid_start,
                matched_at,
                passed,
            });
            self.push(
                Actor::Harness,
                Entry::Assertion { step: row.step.clone(), kind, id: row.concept_id.clone(), passed },
            );
        }
        results
    }

    /// Units the ledger says are running, and those the device runs.
    pub fn active_sets(&self) -> (BTreeSet<String>, Option<BTreeSet<String>>) {
        (self.bedss.phr.active_units(), self.device.as_ref().map(Mdss::units))
    }

    /// Plays a whole scenario and reports.
    pub fn run(&mut self, scenario: &Scenario) -> RunReport {
        let mut rows: Vec<&ScenarioRow> = scenario.rows.iter().collect();
        rows.sort_by_key(|r| r.valid_start);
        let mut assertions = Vec::new();
        let mut days = 0;
        if let (Some(first), Some(last)) = (rows.first().copied(), rows.last().copied()) {
            if !self.started {
                self.start(start_of_day(first.valid_start.date()));
            }
            for row in &rows {
                self.advance_to(row.valid_start);
                self.apply_row(row);
            }
            self.advance_to(next_midnight(last.valid_start));
            assertions = self.check_assertions();
            let (first, last) = (first.valid_start.date(), last.valid_start.date());
            days = days_in_system(first, last);
            self.push(Actor::Harness, Entry::Session { first, last, days_in_system: days });
        }
        self.report(assertions, days)
    }

    pub fn report(&self, assertions: Vec<AssertionResult>, days: u64) -> RunReport {
        let metrics = compute_metrics(self.bedss.phr.interactions(), days);
        let local = self.device.as_ref().map_or(&[][..], |d| d.decisions());
        let undelivered = self.bedss.undelivered();
        let divergences = shadow_check(self.bedss.policy, local, self.bedss.central_decisions(), &undelivered);
        let (ledger, device) = self.active_sets();
        let device = device.unwrap_or_default();
        let consistent = match self.bedss.policy {
            Policy::FullBeDss => device.is_empty(),
            _ => ledger == device,
        };
        RunReport {
            policy: self.bedss.policy,
            assertions,
            metrics,
            divergences,
            consistent,
            ledger_active: ledger.into_iter().collect(),
            device_active: device.into_iter().collect(),
            undelivered_messages: self.channel.unacked(),
        }
    }
}

fn response_of(value: &str) -> Option<Response> {
    match value.trim().to_ascii_lowercase().as_str() {
        "accept" | "accepted" | "true" | "yes" => Some(Response::Accept),
        "decline" | "declined" | "false" | "no" => Some(Response::Decline),
        _ => None,
    }
}

impl fmt::Display for AssertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssertKind::Notification => "notification",
            AssertKind::Recommendation => "recommendation",
            AssertKind::Callback => "callback",
            AssertKind::Projection => "projection",
            AssertKind::Prompt => "prompt",
            AssertKind::Reminder => "reminder",
            AssertKind::Accept => "accept",
            AssertKind::Decline => "decline",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::GuidelineDoc;
    use crate::lang::ProjectionEnvelope;
    use alloc::string::ToString;
    use alloc::vec;
    use chrono::NaiveDate;

    fn kb() -> KnowledgeBase {
        let doc: GuidelineDoc =
            serde_json::from_str(include_str!("../../../fixtures/guidelines/ketonuria.json")).unwrap();
        KnowledgeBase::new(doc).unwrap()
    }

    fn day(n: u64) -> NaiveDate {
        // a Monday
        NaiveDate::from_ymd_opt(2014, 3, 3).unwrap() + chrono::Days::new(n)
    }

    fn world() -> World {
        World::new(
            kb(),
            PatientRecord::new("molly"),
            Policy::PassingOfControl,
            &BTreeMap::new(),
            ChannelConfig::default(),
        )
    }

    fn applied(w: &World) -> Vec<(Vec<String>, Vec<String>)> {
        w.transcript()
            .iter()
            .filter_map(|l| match &l.entry {
                Entry::Feed { feed: Feed::ProjectionApplied { stopped, started, .. } } => {
                    Some((stopped.clone(), started.clone()))
                }
                _ => None,
            })
            .collect()
    }

    #[test]
    fn negative_fortnight_switches_to_twice_weekly() {
        let mut w = world();
        w.start(start_of_day(day(0)));
        for d in 0..14 {
            w.advance_to(day(d).and_hms_opt(8, 5, 0).unwrap());
            w.patient_value("5021", DataValue::Text("--".into()), None);
        }
        w.advance_to(day(14).and_hms_opt(0, 0, 0).unwrap());
        let a = applied(&w);
        assert_eq!(a[0], (vec![], vec!["ket-daily".to_string()]));
        assert_eq!(a[1], (vec!["ket-daily".to_string()], vec!["ket-twice".to_string(), "ket-pos-detect".to_string()]));
        assert_eq!(a.len(), 2);
        let (ledger, device) = w.active_sets();
        assert_eq!(Some(ledger), device);
    }

    #[test]
    fn empty_scenario_is_empty() {
        let mut w = world();
        let r = w.run(&Scenario::default());
        assert!(w.transcript().is_empty());
        assert_eq!(r.metrics, SessionMetrics::default());
    }

    #[test]
    fn dropped_projection_applies_once() {
        use crate::channel::{FaultAction, FaultRule, MatchRule};
        let cfg = ChannelConfig {
            fault_plan: vec![FaultRule {
                matcher: MatchRule { kind: Some(Kind::Projection), attempt: Some(1), ..Default::default() },
                action: FaultAction::Drop,
            }],
            ..Default::default()
        };
        let mut w = World::new(kb(), PatientRecord::new("p"), Policy::PassingOfControl, &BTreeMap::new(), cfg);
        w.start(start_of_day(day(0)));
        w.advance_to(day(0).and_hms_opt(1, 0, 0).unwrap());
        assert_eq!(applied(&w).len(), 1);
        assert!(w.channel.is_idle());
        let (ledger, device) = w.active_sets();
        assert_eq!(Some(ledger), device);
    }

    #[test]
    fn crash_and_restart_restores_units() {
        let mut w = world();
        w.start(start_of_day(day(0)));
        w.advance_to(day(3).and_hms_opt(12, 0, 0).unwrap());
        w.crash(None);
        assert_eq!(w.active_sets().1, None);
        w.restart(None);
        let (ledger, device) = w.active_sets();
        assert_eq!(Some(ledger), device);
        let technical = w.bedss.phr.interactions().iter().filter(|r| r.technical_only).count();
        assert_eq!(technical, 1);
        let env = w.transcript().iter().rev().find_map(|l| match &l.entry {
            Entry::Message { summary, .. } if summary.starts_with("projection") => Some(summary.clone()),
            _ => None,
        });
        assert!(env.is_some());
        let _ = ProjectionEnvelope::parse;
    }

    #[test]
    fn generated_by_accepts_annotated_cells() {
        assert_eq!("mDSS (sending message to SmattPhoneGUI)".parse(), Ok(GeneratedBy::Mdss));
        assert_eq!("BE-DSS (sending recommendation to mDss)".parse(), Ok(GeneratedBy::Bedss));
        assert_eq!("SmartphoneGUI".parse(), Ok(GeneratedBy::SmartphoneGui));
        assert!("robot".parse::<GeneratedBy>().is_err());
    }
}
