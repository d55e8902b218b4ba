//! Live patient session served over a websocket at `/session/<patientId>`.
//!
//! The server sends JSON frames tagged by `type`: one `hello`, then every
//! console event so far (the backlog), then a `state` snapshot. Clients send
//! commands tagged by `cmd`. Every command maps onto a session call the
//! scenario harness can also make.

// tungstenite's own error and handshake types are large
#![allow(clippy::result_large_err)]

use std::io;
use std::net::{TcpListener, TcpStream};

use pcb_core::mdss::{Feed, Input, PromptKind, Response};
use pcb_core::phr::DataValue;
use pcb_core::sim::{Entry, World};
use pcb_core::time::Timestamp;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tungstenite::handshake::server::{ErrorResponse, Request, Response as HttpResponse};
use tungstenite::http::StatusCode;
use tungstenite::{accept_hdr, Message as WsMessage, WebSocket};

/// Bumped whenever a frame or command changes shape.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "cmd", rename_all = "camelCase", deny_unknown_fields)]
pub enum Command {
    /// Answers prompt `prompt` when given, otherwise records a free entry
    /// for `concept`.
    #[serde(rename_all = "camelCase")]
    SubmitValue { prompt: Option<u64>, concept: Option<String>, value: DataValue },
    #[serde(rename_all = "camelCase")]
    Accept { prompt: Option<u64>, message_id: Option<String> },
    #[serde(rename_all = "camelCase")]
    Decline { prompt: Option<u64>, message_id: Option<String> },
    #[serde(rename_all = "camelCase")]
    SwitchContext { personal_event: String },
    /// Moves to `to`, by `minutes`, or to the next scheduled wakeup when
    /// neither is given.
    #[serde(rename_all = "camelCase")]
    AdvanceClock { to: Option<Timestamp>, minutes: Option<i64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PendingView {
    pub prompt: u64,
    pub concept: String,
    pub deadline: Timestamp,
    pub kind: PromptKind,
}

/// Console event kind for a feed item; items the console does not render
/// map to `None`.
pub fn console_kind(f: &Feed) -> Option<&'static str> {
    Some(match f {
        Feed::Reminder { .. } => "reminder",
        Feed::Prompt { .. } => "prompt",
        Feed::Notification { .. } => "notification",
        Feed::Recommendation { .. } => "recommendation",
        Feed::ProjectionApplied { .. } => "projectionApplied",
        Feed::CallbackSent { .. } => "callbackSent",
        Feed::PromptMissed { .. } | Feed::UnitEnded { .. } => return None,
    })
}

pub struct LiveSession {
    pub world: World,
    patient_id: String,
    clock_control: bool,
    cursor: usize,
    backlog: Vec<Value>,
}

impl LiveSession {
    /// `clock_control` is off when a scenario file drives the clock.
    pub fn new(world: World, clock_control: bool) -> Self {
        let patient_id = world.bedss.phr.patient_id.clone();
        let mut s = LiveSession { world, patient_id, clock_control, cursor: 0, backlog: Vec::new() };
        s.collect();
        s
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn backlog(&self) -> &[Value] {
        &self.backlog
    }

    fn collect(&mut self) -> Vec<Value> {
        let lines = &self.world.transcript()[self.cursor..];
        self.cursor += lines.len();
        let fresh: Vec<Value> = lines
            .iter()
            .filter_map(|l| match &l.entry {
                Entry::Feed { feed } => console_kind(feed)
                    .map(|kind| json!({"type": "event", "kind": kind, "payload": feed, "receivedAt": l.at})),
                _ => None,
            })
            .collect();
        self.backlog.extend(fresh.iter().cloned());
        fresh
    }

    pub fn hello(&self) -> Value {
        json!({
            "type": "hello",
            "schema": SCHEMA_VERSION,
            "patientId": self.patient_id,
            "clockControl": self.clock_control,
        })
    }

    pub fn state(&self) -> Value {
        let (pending, context, units) = match self.world.device() {
            Some(d) => (
                d.pending()
                    .into_iter()
                    .map(|(p, c, deadline, kind)| PendingView { prompt: p.0, concept: c.into(), deadline, kind })
                    .collect(),
                d.context().to_string(),
                d.units().into_iter().collect(),
            ),
            None => (Vec::new(), String::new(), Vec::<String>::new()),
        };
        json!({
            "type": "state",
            "now": self.world.now(),
            "deviceUp": self.world.device().is_some(),
            "context": context,
            "units": units,
            "pending": pending,
        })
    }

    fn error(message: impl Into<String>) -> Value {
        json!({"type": "error", "message": message.into()})
    }

    fn recommendation_prompt(&self, message_id: &str) -> Option<u64> {
        self.world
            .device()?
            .pending()
            .into_iter()
            .find_map(|(p, c, _, k)| (k == PromptKind::Recommendation && c == message_id).then_some(p.0))
    }

    fn respond(&mut self, prompt: Option<u64>, message_id: Option<String>, r: Response) -> Result<(), String> {
        let prompt = match (prompt, message_id) {
            (Some(p), _) => p,
            (None, Some(m)) => {
                self.recommendation_prompt(&m).ok_or_else(|| format!("no pending recommendation {m}"))?
            }
            (None, None) => return Err("accept and decline need a prompt or a messageId".into()),
        };
        self.world.patient_answer(prompt, Input::Answer(r));
        Ok(())
    }

    fn apply(&mut self, cmd: Command) -> Result<(), String> {
        if self.world.device().is_none() && !matches!(cmd, Command::AdvanceClock { .. }) {
            return Err("device is down".into());
        }
        match cmd {
            Command::SubmitValue { prompt: Some(p), value, .. } => self.world.patient_answer(p, Input::Value(value)),
            Command::SubmitValue { prompt: None, concept: Some(c), value } => self.world.patient_value(&c, value, None),
            Command::SubmitValue { .. } => return Err("submitValue needs a prompt or a concept".into()),
            Command::Accept { prompt, message_id } => self.respond(prompt, message_id, Response::Accept)?,
            Command::Decline { prompt, message_id } => self.respond(prompt, message_id, Response::Decline)?,
            Command::SwitchContext { personal_event } => self.world.switch_context(&personal_event, None),
            Command::AdvanceClock { to, minutes } => {
                if !self.clock_control {
                    return Err("the clock is driven by a scenario".into());
                }
                let target = match (to, minutes) {
                    (Some(t), _) => t,
                    (None, Some(m)) => self.world.now() + chrono::TimeDelta::minutes(m),
                    (None, None) => self.world.device().and_then(|d| d.next_wakeup()).ok_or("nothing is scheduled")?,
                };
                if target < self.world.now() {
                    return Err(format!("cannot move the clock back to {target}"));
                }
                self.world.advance_to(target);
            }
        }
        Ok(())
    }

    /// Handles one command frame and returns the frames to send back.
    pub fn handle(&mut self, text: &str) -> Vec<Value> {
        let cmd: Command = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return vec![Self::error(format!("bad command: {e}"))],
        };
        let start = self.world.transcript().len();
        let result = self.apply(cmd);
        let rejected: Vec<Value> = self.world.transcript()[start..]
            .iter()
            .filter_map(|l| match &l.entry {
                Entry::Rejected { reason } => Some(Self::error(reason.clone())),
                _ => None,
            })
            .collect();
        let mut out = self.collect();
        out.extend(rejected);
        if let Err(e) = result {
            out.push(Self::error(e));
        }
        out.push(self.state());
        out
    }
}

fn send(ws: &mut WebSocket<TcpStream>, v: &Value) -> tungstenite::Result<()> {
    ws.send(WsMessage::text(v.to_string()))
}

/// Serves one client at a time until `max_clients` connections have closed
/// (forever when `None`). A reconnecting client gets the backlog again.
pub fn serve(listener: TcpListener, session: &mut LiveSession, max_clients: Option<usize>) -> io::Result<()> {
    let expected = format!("/session/{}", session.patient_id());
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream?;
        let check = |req: &Request, resp: HttpResponse| -> Result<HttpResponse, ErrorResponse> {
            if req.uri().path() == expected {
                Ok(resp)
            } else {
                let mut e = ErrorResponse::new(Some(format!("no session at {}", req.uri().path())));
                *e.status_mut() = StatusCode::NOT_FOUND;
                Err(e)
            }
        };
        let Ok(mut ws) = accept_hdr(stream, check) else { continue };
        let _ = run_client(&mut ws, session);
        served += 1;
        if max_clients.is_some_and(|m| served >= m) {
            return Ok(());
        }
    }
    Ok(())
}

fn run_client(ws: &mut WebSocket<TcpStream>, session: &mut LiveSession) -> tungstenite::Result<()> {
    send(ws, &session.hello())?;
    for v in session.backlog().to_vec() {
        send(ws, &v)?;
    }
    send(ws, &session.state())?;
    loop {
        match ws.read()? {
            WsMessage::Text(t) => {
                for v in session.handle(&t) {
                    send(ws, &v)?;
                }
            }
            WsMessage::Close(_) => return Ok(()),
            _ => {}
        }
    }
}
