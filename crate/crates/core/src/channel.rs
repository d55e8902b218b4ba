//! Simulated transport between the central engine and the device: acks,
//! timeout retries, scripted faults and device crashes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use chrono::TimeDelta;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bedss::Downstream;
use crate::mdss::Upstream;
use crate::time::Timestamp;

pub const DEFAULT_ACK_TIMEOUT_SECS: i64 = 30;
pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Kind {
    Projection,
    Ack,
    Nack,
    Callback,
    DataNotification,
    Recommendation,
    Enroll,
    CrashRecoveryRequest,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Projection => "projection",
            Kind::Ack => "ack",
            Kind::Nack => "nack",
            Kind::Callback => "callback",
            Kind::DataNotification => "dataNotification",
            Kind::Recommendation => "recommendation",
            Kind::Enroll => "enroll",
            Kind::CrashRecoveryRequest => "crashRecoveryRequest",
        }
    }
}

/// `Down` travels from the central engine to the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Direction {
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Body {
    Down(Downstream),
    Up(Upstream),
    Empty {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Message {
    pub msg_id: String,
    pub kind: Kind,
    pub patient_id: String,
    pub direction: Direction,
    /// Message id an ack or nack answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<String>,
    pub payload: Body,
    pub sent_at: Timestamp,
}

impl Message {
    pub fn direction(&self) -> Direction {
        self.direction
    }
}

fn direction_of(body: &Body) -> Direction {
    match body {
        Body::Down(_) => Direction::Down,
        Body::Up(_) | Body::Empty {} => Direction::Up,
    }
}

/// Kind of message a body travels as.
pub fn kind_of(body: &Body) -> Kind {
    match body {
        Body::Down(Downstream::Projection { .. }) => Kind::Projection,
        Body::Down(Downstream::Recommendation { .. }) => Kind::Recommendation,
        Body::Down(Downstream::Mirror { .. }) => Kind::DataNotification,
        Body::Up(Upstream::Ack { .. }) => Kind::Ack,
        Body::Up(Upstream::Nack { .. }) => Kind::Nack,
        Body::Up(Upstream::Callback { .. }) => Kind::Callback,
        Body::Up(Upstream::Data { .. } | Upstream::Sync { .. }) => Kind::DataNotification,
        Body::Empty {} => Kind::Enroll,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "camelCase")]
pub enum FaultAction {
    Drop,
    Delay { seconds: i64 },
    Duplicate,
}

/// Matches transmissions. `attempt` is 1 for the first transmission of a
/// message; `nth` is the 1-based ordinal among distinct messages of the
/// same kind and direction. `probability` makes the rule fire on a seeded
/// draw; without it the rule always fires.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct MatchRule {
    #[serde(default)]
    pub kind: Option<Kind>,
    #[serde(default)]
    pub direction: Option<Direction>,
    #[serde(default)]
    pub attempt: Option<u32>,
    #[serde(default)]
    pub nth: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FaultRule {
    #[serde(rename = "match", default)]
    pub matcher: MatchRule,
    #[serde(flatten)]
    pub action: FaultAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub ack_timeout_secs: i64,
    pub max_retries: u32,
    pub fault_plan: Vec<FaultRule>,
    /// Seeds the draws of probabilistic fault rules.
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            ack_timeout_secs: DEFAULT_ACK_TIMEOUT_SECS,
            max_retries: DEFAULT_MAX_RETRIES,
            fault_plan: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "camelCase")]
pub enum ChannelEvent {
    #[serde(rename_all = "camelCase")]
    Sent { msg_id: String, kind: Kind, direction: Direction, attempt: u32 },
    #[serde(rename_all = "camelCase")]
    Dropped { msg_id: String, attempt: u32, reason: String },
    #[serde(rename_all = "camelCase")]
    Delayed { msg_id: String, attempt: u32, seconds: i64 },
    #[serde(rename_all = "camelCase")]
    Duplicated { msg_id: String, attempt: u32 },
    #[serde(rename_all = "camelCase")]
    Delivered { msg_id: String, kind: Kind, direction: Direction },
    #[serde(rename_all = "camelCase")]
    DuplicateIgnored { msg_id: String },
    #[serde(rename_all = "camelCase")]
    Acked { msg_id: String },
    #[serde(rename_all = "camelCase")]
    Failed { msg_id: String, kind: Kind },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelOutput {
    /// A message handed to the receiving engine.
    Deliver(Message),
    /// Retries exhausted; reported to the sender.
    Failed(Message),
}

#[derive(Debug, Clone)]
struct Outstanding {
    message: Message,
    attempts: u32,
    deadline: Timestamp,
}

/// One patient's link. Time only moves through `poll`.
#[derive(Debug, Clone)]
pub struct Channel {
    pub config: ChannelConfig,
    patient_id: String,
    seq: u64,
    order: u64,
    queue: BTreeMap<(Timestamp, u64), Message>,
    outstanding: BTreeMap<String, Outstanding>,
    ordinals: BTreeMap<String, u32>,
    counts: BTreeMap<(Kind, Direction), u32>,
    seen: BTreeMap<Direction, BTreeSet<String>>,
    device_up: bool,
    log: Vec<ChannelEvent>,
    rng: ChaCha8Rng,
}

impl Channel {
    pub fn new(patient_id: impl Into<String>, config: ChannelConfig) -> Self {
        Channel {
            patient_id: patient_id.into(),
            seq: 0,
            order: 0,
            queue: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            ordinals: BTreeMap::new(),
            counts: BTreeMap::new(),
            seen: BTreeMap::new(),
            device_up: true,
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        }
    }

    pub fn device_up(&self) -> bool {
        self.device_up
    }

    pub fn events(&self) -> &[ChannelEvent] {
        &self.log
    }

    pub fn take_events(&mut self) -> Vec<ChannelEvent> {
        core::mem::take(&mut self.log)
    }

    /// Messages still waiting for an ack.
    pub fn unacked(&self) -> usize {
        self.outstanding.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.outstanding.is_empty()
    }

    fn fresh_id(&mut self) -> String {
        self.seq += 1;
        format!("m{}", self.seq)
    }

    /// Sends `body`; acks and nacks name the message they answer.
    pub fn send(&mut self, body: Body, answers: Option<String>, now: Timestamp) -> String {
        let kind = kind_of(&body);
        self.send_kind(kind, body, answers, now)
    }

    pub fn send_kind(&mut self, kind: Kind, body: Body, answers: Option<String>, now: Timestamp) -> String {
        let direction = direction_of(&body);
        let msg = Message {
            msg_id: self.fresh_id(),
            kind,
            patient_id: self.patient_id.clone(),
            direction,
            answers,
            payload: body,
            sent_at: now,
        };
        let dir = msg.direction();
        if dir == Direction::Up && !self.device_up {
            self.log.push(ChannelEvent::Dropped {
                msg_id: msg.msg_id.clone(),
                attempt: 1,
                reason: "device down".into(),
            });
            return msg.msg_id;
        }
        let n = self.counts.entry((kind, dir)).or_default();
        *n += 1;
        self.ordinals.insert(msg.msg_id.clone(), *n);
        let id = msg.msg_id.clone();
        if kind != Kind::Ack {
            let deadline = now + TimeDelta::seconds(self.config.ack_timeout_secs);
            self.outstanding.insert(id.clone(), Outstanding { message: msg.clone(), attempts: 1, deadline });
        }
        self.transmit(msg, 1, now);
        id
    }

    pub fn send_enroll(&mut self, kind: Kind, now: Timestamp) -> String {
        self.send_kind(kind, Body::Empty {}, None, now)
    }

    fn transmit(&mut self, msg: Message, attempt: u32, now: Timestamp) {
        let dir = msg.direction();
        self.log.push(ChannelEvent::Sent { msg_id: msg.msg_id.clone(), kind: msg.kind, direction: dir, attempt });
        let nth = self.ordinals.get(&msg.msg_id).copied().unwrap_or(0);
        let mut action = None;
        for r in &self.config.fault_plan {
            let m = &r.matcher;
            let hit = m.kind.is_none_or(|k| k == msg.kind)
                && m.direction.is_none_or(|d| d == dir)
                && m.attempt.is_none_or(|a| a == attempt)
                && m.nth.is_none_or(|n| n == nth);
            if !hit {
                continue;
            }
            if let Some(p) = m.probability {
                let draw = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                if draw >= p {
                    continue;
                }
            }
            action = Some(r.action);
            break;
        }
        let mut copies = 1;
        let mut at = now;
        match action {
            Some(FaultAction::Drop) => {
                self.log.push(ChannelEvent::Dropped { msg_id: msg.msg_id, attempt, reason: "fault plan".into() });
                return;
            }
            Some(FaultAction::Delay { seconds }) => {
                self.log.push(ChannelEvent::Delayed { msg_id: msg.msg_id.clone(), attempt, seconds });
                at = now + TimeDelta::seconds(seconds);
            }
            Some(FaultAction::Duplicate) => {
                self.log.push(ChannelEvent::Duplicated { msg_id: msg.msg_id.clone(), attempt });
                copies = 2;
            }
            None => {}
        }
        for _ in 0..copies {
            self.order += 1;
            self.queue.insert((at, self.order), msg.clone());
        }
    }

    /// Earliest moment something happens on the link.
    pub fn next_due(&self) -> Option<Timestamp> {
        let q = self.queue.keys().next().map(|(t, _)| *t);
        let r = self.outstanding.values().map(|o| o.deadline).min();
        match (q, r) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Delivers everything due at or before `now` and fires timeouts.
    /// Non-ack messages other than projections are acked here; projection
    /// acks come from the device engine and are sent by the caller.
    pub fn poll(&mut self, now: Timestamp) -> Vec<ChannelOutput> {
        let mut out = Vec::new();
        loop {
            let next_q = self.queue.keys().next().copied().filter(|(t, _)| *t <= now);
            let next_r = self
                .outstanding
                .iter()
                .filter(|(_, o)| o.deadline <= now)
                .min_by_key(|(id, o)| (o.deadline, self.ordinals.get(*id).copied(), (*id).clone()))
                .map(|(id, o)| (o.deadline, id.clone()));
            match (next_q, next_r) {
                (Some((tq, oq)), Some((tr, _))) if tq <= tr => self.deliver_one((tq, oq), &mut out),
                (Some(k), None) => self.deliver_one(k, &mut out),
                (_, Some((tr, id))) => self.timeout(&id, tr, &mut out),
                (None, None) => break,
            }
        }
        out
    }

    fn deliver_one(&mut self, key: (Timestamp, u64), out: &mut Vec<ChannelOutput>) {
        let msg = self.queue.remove(&key).expect("queued");
        let at = key.0;
        let dir = msg.direction();
        if dir == Direction::Down && !self.device_up {
            self.log.push(ChannelEvent::Dropped { msg_id: msg.msg_id, attempt: 0, reason: "device down".into() });
            return;
        }
        if matches!(msg.kind, Kind::Ack | Kind::Nack) {
            if let Some(a) = &msg.answers {
                if self.outstanding.remove(a).is_some() {
                    self.log.push(ChannelEvent::Acked { msg_id: a.clone() });
                }
            }
        }
        let seen = self.seen.entry(dir).or_default();
        let first = seen.insert(msg.msg_id.clone());
        if !first && msg.kind != Kind::Projection {
            self.log.push(ChannelEvent::DuplicateIgnored { msg_id: msg.msg_id.clone() });
            if msg.kind != Kind::Ack {
                self.auto_ack(&msg, at);
            }
            return;
        }
        self.log.push(ChannelEvent::Delivered { msg_id: msg.msg_id.clone(), kind: msg.kind, direction: dir });
        if !matches!(msg.kind, Kind::Ack | Kind::Projection) {
            self.auto_ack(&msg, at);
        }
        if msg.kind == Kind::Ack && msg.payload == (Body::Empty {}) {
            return;
        }
        out.push(ChannelOutput::Deliver(msg));
    }

    fn auto_ack(&mut self, msg: &Message, now: Timestamp) {
        let direction = match msg.direction {
            Direction::Down => Direction::Up,
            Direction::Up => Direction::Down,
        };
        if direction == Direction::Up && !self.device_up {
            return;
        }
        let ack = Message {
            msg_id: self.fresh_id(),
            kind: Kind::Ack,
            patient_id: self.patient_id.clone(),
            direction,
            answers: Some(msg.msg_id.clone()),
            payload: Body::Empty {},
            sent_at: now,
        };
        self.transmit(ack, 1, now);
    }

    fn timeout(&mut self, id: &str, at: Timestamp, out: &mut Vec<ChannelOutput>) {
        let mut o = self.outstanding.remove(id).expect("outstanding");
        if o.attempts > self.config.max_retries {
            self.log.push(ChannelEvent::Failed { msg_id: id.into(), kind: o.message.kind });
            out.push(ChannelOutput::Failed(o.message));
            return;
        }
        o.attempts += 1;
        o.deadline = at + TimeDelta::seconds(self.config.ack_timeout_secs);
        let msg = o.message.clone();
        let attempt = o.attempts;
        self.outstanding.insert(id.into(), o);
        self.transmit(msg, attempt, at);
    }

    /// Wipes the device side: its pending sends are lost and nothing
    /// reaches it until restart.
    pub fn crash_device(&mut self) {
        self.device_up = false;
        self.outstanding.retain(|_, o| o.message.direction() != Direction::Up);
        self.queue.retain(|_, m| m.direction() != Direction::Up);
        self.seen.remove(&Direction::Down);
    }

    /// Brings the device back and asks the central engine to recover it.
    pub fn restart_device(&mut self, now: Timestamp) -> String {
        self.device_up = true;
        self.send_enroll(Kind::CrashRecoveryRequest, now)
    }
}
