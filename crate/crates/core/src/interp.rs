//! Unit-projection interpreter.
//!
//! A unit body is compiled to a flat instruction list; a [`UnitTask`] is a
//! program counter, variables and one wait state. [`UnitTask::advance`]
//! runs until the unit waits again, so a task can be suspended between any
//! two clock steps without native coroutines.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use chrono::{Days, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::eval::{eval, Scope, Value};
use crate::lang::{Expr, Operand, Statement, TemporalQuery, Threshold, UnitProjection, ValueType};
use crate::phr::DataValue;
use crate::temporal::{window_query, Abstraction, EventIndex, Target, WindowQuery};
use crate::time::{iso_weekday, parse_time_of_day, Date, Span, TimeOfDay, Timestamp, Weekdays};

/// Instructions one `advance` may execute before the unit is declared faulty.
pub const FUEL: u32 = 10_000;

#[derive(Debug, Clone, PartialEq)]
enum Instr {
    Jump(usize),
    WaitPeriodic {
        days: Weekdays,
        time: Operand<TimeOfDay>,
        reminder: Option<Operand<Span>>,
        offset: Option<i64>,
        duration: Option<i64>,
        /// Concept of the first data entry after this wait, for reminder lookup.
        entry_concept: Option<String>,
    },
    CreateEvent,
    DataEntry {
        concept: String,
        label: Expr,
        value_type: ValueType,
        validity: Span,
    },
    InsertEvent,
    Annotate(Abstraction),
    WaitQuery(TemporalQuery),
    IfQuery {
        query: TemporalQuery,
        else_pc: usize,
    },
    Callback {
        id: String,
        message: String,
    },
    Notify {
        id: String,
        text: String,
    },
    SetGlobal {
        name: String,
        expr: Expr,
    },
    Var {
        name: String,
        init: Expr,
    },
    ForStart {
        slot: usize,
        var: String,
        map: String,
        exit: usize,
    },
    ForNext {
        slot: usize,
        var: String,
        body: usize,
    },
}

struct Compiler {
    code: Vec<Instr>,
    slots: usize,
}

impl Compiler {
    fn block(&mut self, body: &[Statement]) {
        for s in body {
            self.statement(s);
        }
    }

    fn statement(&mut self, s: &Statement) {
        match s {
            Statement::WhileTrue { body } => {
                let start = self.code.len();
                self.block(body);
                self.code.push(Instr::Jump(start));
            }
            Statement::WaitPeriodic { days, time, reminder, start_offset_days, duration_days } => {
                self.code.push(Instr::WaitPeriodic {
                    days: days.clone(),
                    time: time.clone(),
                    reminder: reminder.clone(),
                    offset: *start_offset_days,
                    duration: *duration_days,
                    entry_concept: None,
                })
            }
            Statement::CreateEvent => self.code.push(Instr::CreateEvent),
            Statement::PatientDataEntry { concept_id, label, value_type, validity } => {
                self.code.push(Instr::DataEntry {
                    concept: concept_id.clone(),
                    label: label.clone(),
                    value_type: *value_type,
                    validity: *validity,
                })
            }
            Statement::InsertEvent => self.code.push(Instr::InsertEvent),
            Statement::AnnotateTemporal { op, exprs, name } => {
                self.code.push(Instr::Annotate(Abstraction { name: name.clone(), op: *op, exprs: exprs.clone() }))
            }
            Statement::WaitTemporalQuery { query } => self.code.push(Instr::WaitQuery(query.clone())),
            Statement::IfTemporalQuery { query, then_body, else_body } => {
                let at = self.code.len();
                self.code.push(Instr::IfQuery { query: query.clone(), else_pc: 0 });
                self.block(then_body);
                let jump = (!else_body.is_empty()).then(|| {
                    self.code.push(Instr::Jump(0));
                    self.code.len() - 1
                });
                let else_pc = self.code.len();
                self.block(else_body);
                let end = self.code.len();
                if let Instr::IfQuery { else_pc: e, .. } = &mut self.code[at] {
                    *e = else_pc;
                }
                if let Some(j) = jump {
                    self.code[j] = Instr::Jump(end);
                }
            }
            Statement::Callback { callback_id, message } => {
                self.code.push(Instr::Callback { id: callback_id.clone(), message: message.clone() })
            }
            Statement::PatientNotification { message_id, text } => {
                self.code.push(Instr::Notify { id: message_id.clone(), text: text.clone() })
            }
            Statement::SetProjectionGlobal { name, expr } => {
                self.code.push(Instr::SetGlobal { name: name.clone(), expr: expr.clone() })
            }
            Statement::VarDecl { name, init } => self.code.push(Instr::Var { name: name.clone(), init: init.clone() }),
            Statement::ForIn { var, map, body } => {
                let slot = self.slots;
                self.slots += 1;
                let at = self.code.len();
                self.code.push(Instr::ForStart { slot, var: var.clone(), map: map.clone(), exit: 0 });
                let body_start = self.code.len();
                self.block(body);
                self.code.push(Instr::ForNext { slot, var: var.clone(), body: body_start });
                let exit = self.code.len();
                if let Instr::ForStart { exit: e, .. } = &mut self.code[at] {
                    *e = exit;
                }
            }
        }
    }
}

fn compile(body: &[Statement]) -> (Vec<Instr>, usize) {
    let mut c = Compiler { code: Vec::new(), slots: 0 };
    c.block(body);
    let mut code = c.code;
    for i in 0..code.len() {
        if let Instr::WaitPeriodic { .. } = code[i] {
            let next = code[i + 1..].iter().find_map(|ins| match ins {
                Instr::DataEntry { concept, .. } => Some(concept.clone()),
                _ => None,
            });
            if let Instr::WaitPeriodic { entry_concept, .. } = &mut code[i] {
                *entry_concept = next;
            }
        }
    }
    (code, c.slots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "camelCase")]
pub enum Action {
    #[serde(rename_all = "camelCase")]
    Reminder { unit: String, concept: Option<String>, due: Timestamp },
    #[serde(rename_all = "camelCase")]
    Prompt {
        unit: String,
        prompt: PromptId,
        concept: String,
        label: String,
        value_type: ValueType,
        deadline: Timestamp,
        /// Raised after a temporal query rather than by a schedule.
        data_driven: bool,
    },
    #[serde(rename_all = "camelCase")]
    PromptMissed { unit: String, prompt: PromptId, concept: String },
    #[serde(rename_all = "camelCase")]
    Notification { unit: String, message_id: String, text: String },
    #[serde(rename_all = "camelCase")]
    Callback { unit: String, callback_id: String, message: String },
    #[serde(rename_all = "camelCase")]
    EventInserted { unit: String, concept: String, value: DataValue, data_driven: bool },
    #[serde(rename_all = "camelCase")]
    UnitExpired { unit: String },
    #[serde(rename_all = "camelCase")]
    UnitFault { unit: String, reason: String },
}

impl Action {
    pub fn unit(&self) -> &str {
        match self {
            Action::Reminder { unit, .. }
            | Action::Prompt { unit, .. }
            | Action::PromptMissed { unit, .. }
            | Action::Notification { unit, .. }
            | Action::Callback { unit, .. }
            | Action::EventInserted { unit, .. }
            | Action::UnitExpired { unit }
            | Action::UnitFault { unit, .. } => unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Wait {
    Ready,
    Periodic { fire: Timestamp, reminder: Option<Timestamp> },
    Query { query: TemporalQuery, last: bool },
    Entry { prompt: PromptId, deadline: Timestamp },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TaskState {
    Running,
    Finished,
    Expired,
    Faulted,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Draft {
    concept: Option<String>,
    value: Option<DataValue>,
    data_driven: bool,
}

/// What a task can see of its device.
pub struct Ctx<'a> {
    pub now: Timestamp,
    pub events: &'a EventIndex,
    pub globals: &'a mut BTreeMap<String, Value>,
    /// Reminder lead in minutes per concept under the current personal event.
    pub reminder_leads: &'a BTreeMap<String, i64>,
    pub next_prompt: &'a mut u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerError {
    UnknownPrompt,
    Missed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitTask {
    pub id: String,
    pub name: String,
    code: Vec<Instr>,
    pc: usize,
    vars: BTreeMap<String, Value>,
    iters: Vec<(Vec<String>, usize)>,
    abstractions: BTreeMap<String, Abstraction>,
    draft: Option<Draft>,
    wait: Wait,
    /// Start offsets and durations count from this date.
    pub start_date: Date,
    last_fire: Option<Timestamp>,
    since_query: bool,
    uuids: u64,
    pub state: TaskState,
}

struct TaskScope<'a> {
    vars: &'a BTreeMap<String, Value>,
    unit: &'a str,
    uuids: &'a mut u64,
}

impl Scope for TaskScope<'_> {
    fn var(&self, name: &str) -> Option<Value> {
        self.vars.get(name).cloned()
    }

    fn field(&self, _: &str) -> Option<&DataValue> {
        None
    }

    fn fresh_uuid(&mut self) -> String {
        *self.uuids += 1;
        let name = format!("{}/{}", self.unit, self.uuids);
        format!("{}", uuid::Uuid::new_v5(&uuid::Uuid::NAMESPACE_OID, name.as_bytes()))
    }
}

enum Step {
    Continue,
    Suspend,
    Stop(TaskState),
}

impl UnitTask {
    pub fn new(unit: &UnitProjection, start_date: Date) -> Self {
        let (code, slots) = compile(&unit.body);
        UnitTask {
            id: unit.id.clone(),
            name: unit.name.clone(),
            code,
            pc: 0,
            vars: BTreeMap::new(),
            iters: alloc::vec![(Vec::new(), 0); slots],
            abstractions: BTreeMap::new(),
            draft: None,
            wait: Wait::Ready,
            start_date,
            last_fire: None,
            since_query: false,
            uuids: 0,
            state: TaskState::Running,
        }
    }

    pub fn is_running(&self) -> bool {
        self.state == TaskState::Running
    }

    /// Earliest instant at which the task has something to do on its own.
    /// Query waits are woken by inserts and date changes instead.
    pub fn next_wakeup(&self) -> Option<Timestamp> {
        if !self.is_running() {
            return None;
        }
        match &self.wait {
            Wait::Periodic { fire, reminder } => Some(reminder.map_or(*fire, |r| r.min(*fire))),
            Wait::Entry { deadline, .. } => Some(*deadline),
            Wait::Ready | Wait::Query { .. } => None,
        }
    }

    pub fn pending_prompt(&self) -> Option<(PromptId, Timestamp)> {
        match &self.wait {
            Wait::Entry { prompt, deadline } if self.is_running() => Some((*prompt, *deadline)),
            _ => None,
        }
    }

    /// Concept the pending prompt asks for.
    pub fn pending_concept(&self) -> Option<&str> {
        self.pending_prompt()?;
        self.draft.as_ref()?.concept.as_deref()
    }

    pub fn answer(&mut self, prompt: PromptId, value: DataValue, now: Timestamp) -> Result<(), AnswerError> {
        let Some((p, deadline)) = self.pending_prompt() else {
            return Err(AnswerError::UnknownPrompt);
        };
        if p != prompt {
            return Err(AnswerError::UnknownPrompt);
        }
        if now >= deadline {
            return Err(AnswerError::Missed);
        }
        if let Some(d) = &mut self.draft {
            d.value = Some(value);
        }
        self.wait = Wait::Ready;
        self.pc += 1;
        Ok(())
    }

    fn query(&self, q: &TemporalQuery, ctx: &Ctx<'_>) -> Result<bool, String> {
        let threshold = match &q.cond.threshold {
            Threshold::Value(v) => *v,
            Threshold::Var(id) => return Err(format!("unbound threshold {id}")),
        };
        let wq = WindowQuery { agg: q.cond.agg, cmp: q.cond.cmp, threshold, window_days: q.window.whole_days() };
        let target = match self.abstractions.get(&q.target) {
            Some(a) => Target::Abstraction(a),
            None => Target::Concept(&q.target),
        };
        window_query(&wq, target, ctx.now, ctx.events).map(|(ok, _)| ok).map_err(|e| format!("{e}"))
    }

    fn scope(&mut self) -> TaskScope<'_> {
        TaskScope { vars: &self.vars, unit: &self.id, uuids: &mut self.uuids }
    }

    fn eval(&mut self, e: &Expr) -> Value {
        let mut scope = self.scope();
        eval(e, &mut scope)
    }

    /// Resumes the task at `ctx.now` and runs it until it waits again.
    pub fn advance(&mut self, ctx: &mut Ctx<'_>) -> Vec<Action> {
        let mut out = Vec::new();
        let mut fuel = FUEL;
        while self.is_running() {
            let step = match self.resume(ctx, &mut out) {
                Err(reason) => Step::Stop(self.fault(reason, &mut out)),
                Ok(false) => Step::Suspend,
                Ok(true) => {
                    if fuel == 0 {
                        Step::Stop(self.fault("instruction budget exhausted without waiting".into(), &mut out))
                    } else {
                        fuel -= 1;
                        match self.exec(ctx, &mut out) {
                            Ok(s) => s,
                            Err(reason) => Step::Stop(self.fault(reason, &mut out)),
                        }
                    }
                }
            };
            match step {
                Step::Continue => {}
                Step::Suspend => break,
                Step::Stop(state) => {
                    self.state = state;
                    if state == TaskState::Expired {
                        out.push(Action::UnitExpired { unit: self.id.clone() });
                    }
                }
            }
        }
        out
    }

    fn fault(&mut self, reason: String, out: &mut Vec<Action>) -> TaskState {
        out.push(Action::UnitFault { unit: self.id.clone(), reason });
        TaskState::Faulted
    }

    /// Checks the current wait. `Ok(true)` means the task may execute.
    fn resume(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Action>) -> Result<bool, String> {
        match &mut self.wait {
            Wait::Ready => Ok(true),
            Wait::Periodic { fire, reminder } => {
                if let Some(r) = *reminder {
                    if ctx.now >= r && ctx.now < *fire {
                        *reminder = None;
                        let concept = match &self.code[self.pc] {
                            Instr::WaitPeriodic { entry_concept, .. } => entry_concept.clone(),
                            _ => None,
                        };
                        out.push(Action::Reminder { unit: self.id.clone(), concept, due: *fire });
                    }
                }
                if ctx.now >= *fire {
                    self.last_fire = Some(*fire);
                    self.since_query = false;
                    self.wait = Wait::Ready;
                    self.pc += 1;
                    Ok(true)
                } else {
                    Ok(false)
                }
            }
            Wait::Query { query, last } => {
                let q = query.clone();
                let prev = *last;
                let now = self.query(&q, ctx)?;
                if now && !prev {
                    self.since_query = true;
                    self.wait = Wait::Ready;
                    self.pc += 1;
                    Ok(true)
                } else {
                    self.wait = Wait::Query { query: q, last: now };
                    Ok(false)
                }
            }
            Wait::Entry { prompt, deadline } => {
                if ctx.now >= *deadline {
                    let concept = self.draft.as_ref().and_then(|d| d.concept.clone()).unwrap_or_default();
                    out.push(Action::PromptMissed { unit: self.id.clone(), prompt: *prompt, concept });
                    self.wait = Wait::Ready;
                    self.pc += 1;
                    Ok(true)
                } else {
                    Ok(false)
                }
            }
        }
    }

    fn resolve_time(&self, t: &Operand<TimeOfDay>) -> Result<TimeOfDay, String> {
        match t {
            Operand::Lit(t) => Ok(*t),
            Operand::Var(v) => match self.vars.get(v) {
                Some(Value::Str(s)) => parse_time_of_day(s).map_err(|e| format!("{v}: {e}")),
                other => Err(format!("{v} is not a time of day: {other:?}")),
            },
        }
    }

    fn resolve_lead(&self, r: &Option<Operand<Span>>, entry: &Option<String>, ctx: &Ctx<'_>) -> Result<i64, String> {
        match r {
            Some(Operand::Lit(s)) => Ok(s.minutes),
            Some(Operand::Var(v)) => match self.vars.get(v) {
                Some(Value::Str(s)) => Span::parse(s).map(|s| s.minutes).map_err(|e| format!("{v}: {e}")),
                Some(Value::Null) | None => Ok(0),
                other => Err(format!("{v} is not a duration: {other:?}")),
            },
            None => Ok(entry.as_ref().and_then(|c| ctx.reminder_leads.get(c)).copied().unwrap_or(0)),
        }
    }

    /// Next firing instant at or after `now`, or `None` once the bounded
    /// schedule has run out.
    fn next_fire(
        &self,
        days: &Weekdays,
        time: TimeOfDay,
        offset: Option<i64>,
        duration: Option<i64>,
        now: Timestamp,
    ) -> Option<Timestamp> {
        let first = self.start_date.checked_add_days(Days::new(offset.unwrap_or(0).max(0) as u64))?;
        let last = match duration {
            Some(d) if d <= 0 => return None,
            Some(d) => Some(first.checked_add_days(Days::new((d - 1) as u64))?),
            None => None,
        };
        let mut date = first.max(now.date());
        for _ in 0..8 {
            if last.is_some_and(|l| date > l) {
                return None;
            }
            let at = date.and_time(time);
            if at >= now && Some(at) != self.last_fire && days.contains(iso_weekday(date)) {
                return Some(at);
            }
            date = date.succ_opt()?;
        }
        None
    }

    fn exec(&mut self, ctx: &mut Ctx<'_>, out: &mut Vec<Action>) -> Result<Step, String> {
        let Some(ins) = self.code.get(self.pc).cloned() else {
            return Ok(Step::Stop(TaskState::Finished));
        };
        match ins {
            Instr::Jump(t) => self.pc = t,
            Instr::WaitPeriodic { days, time, reminder, offset, duration, entry_concept } => {
                let time = self.resolve_time(&time)?;
                let lead = self.resolve_lead(&reminder, &entry_concept, ctx)?;
                let Some(fire) = self.next_fire(&days, time, offset, duration, ctx.now) else {
                    return Ok(Step::Stop(TaskState::Expired));
                };
                let reminder = (lead > 0).then(|| fire - TimeDelta::minutes(lead)).filter(|r| *r >= ctx.now);
                self.wait = Wait::Periodic { fire, reminder };
                return Ok(Step::Continue);
            }
            Instr::CreateEvent => {
                self.draft = Some(Draft::default());
                self.pc += 1;
            }
            Instr::DataEntry { concept, label, value_type, validity } => {
                let label = self.eval(&label).key();
                *ctx.next_prompt += 1;
                let prompt = PromptId(*ctx.next_prompt);
                let deadline = ctx.now + validity.to_delta();
                let data_driven = self.since_query;
                let d = self.draft.get_or_insert_with(Draft::default);
                d.concept = Some(concept.clone());
                d.data_driven = data_driven;
                out.push(Action::Prompt {
                    unit: self.id.clone(),
                    prompt,
                    concept,
                    label,
                    value_type,
                    deadline,
                    data_driven,
                });
                self.wait = Wait::Entry { prompt, deadline };
                return Ok(Step::Continue);
            }
            Instr::InsertEvent => {
                if let Some(Draft { concept: Some(concept), value: Some(value), data_driven }) = self.draft.take() {
                    out.push(Action::EventInserted { unit: self.id.clone(), concept, value, data_driven });
                }
                self.pc += 1;
            }
            Instr::Annotate(a) => {
                self.abstractions.insert(a.name.clone(), a);
                self.pc += 1;
            }
            Instr::WaitQuery(q) => {
                let last = self.query(&q, ctx)?;
                self.wait = Wait::Query { query: q, last };
                return Ok(Step::Suspend);
            }
            Instr::IfQuery { query, else_pc } => {
                self.since_query = true;
                self.pc = if self.query(&query, ctx)? { self.pc + 1 } else { else_pc };
            }
            Instr::Callback { id, message } => {
                out.push(Action::Callback { unit: self.id.clone(), callback_id: id, message });
                self.pc += 1;
            }
            Instr::Notify { id, text } => {
                out.push(Action::Notification { unit: self.id.clone(), message_id: id, text });
                self.pc += 1;
            }
            Instr::SetGlobal { name, expr } => {
                let v = self.eval(&expr);
                ctx.globals.insert(name, v);
                self.pc += 1;
            }
            Instr::Var { name, init } => {
                let v = self.eval(&init);
                self.vars.insert(name, v);
                self.pc += 1;
            }
            Instr::ForStart { slot, var, map, exit } => {
                let keys: Vec<String> = match self.vars.get(&map) {
                    Some(Value::Map(entries)) => entries.iter().map(|(k, _)| k.clone()).collect(),
                    _ => Vec::new(),
                };
                match keys.first() {
                    None => self.pc = exit,
                    Some(k) => {
                        self.vars.insert(var, Value::Str(k.clone()));
                        self.iters[slot] = (keys, 0);
                        self.pc += 1;
                    }
                }
            }
            Instr::ForNext { slot, var, body } => {
                let (keys, i) = &mut self.iters[slot];
                *i += 1;
                if let Some(k) = keys.get(*i) {
                    self.vars.insert(var, Value::Str(k.clone()));
                    self.pc = body;
                } else {
                    self.pc += 1;
                }
            }
        }
        Ok(Step::Continue)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{parse_envelope, parse_unit};
    use crate::phr::{Event, Quality, Source};
    use alloc::vec;
    use chrono::NaiveDate;

    const BG: &str = include_str!("../../../fixtures/corpus/bg_schedule.pcb");
    const MEDICATION: &str = include_str!("../../../fixtures/corpus/medication.unit");

    fn at(d: u32, h: u32, m: u32) -> Timestamp {
        NaiveDate::from_ymd_opt(2014, 3, d).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    struct Device {
        events: EventIndex,
        globals: BTreeMap<String, Value>,
        leads: BTreeMap<String, i64>,
        prompts: u64,
    }

    impl Device {
        fn new() -> Self {
            Device { events: EventIndex::new(), globals: BTreeMap::new(), leads: BTreeMap::new(), prompts: 0 }
        }

        fn run(&mut self, t: &mut UnitTask, now: Timestamp) -> Vec<Action> {
            let mut ctx = Ctx {
                now,
                events: &self.events,
                globals: &mut self.globals,
                reminder_leads: &self.leads,
                next_prompt: &mut self.prompts,
            };
            t.advance(&mut ctx)
        }

        fn insert(&mut self, id: u64, concept: &str, v: f64, when: Timestamp) {
            self.events.insert(&Event {
                id,
                patient_id: "p".into(),
                concept_id: concept.into(),
                value: DataValue::Number(v),
                valid_start: when,
                valid_end: when,
                source: Source::PatientEntry,
                quality: Quality::Normal,
            });
        }
    }

    #[test]
    fn daily_fasting_prompt_at_eight() {
        let env = parse_envelope(BG).unwrap();
        let mut t = UnitTask::new(env.unit("20102").unwrap(), at(3, 0, 0).date());
        let mut dev = Device::new();
        assert!(dev.run(&mut t, at(3, 7, 0)).is_empty());
        assert_eq!(t.next_wakeup(), Some(at(3, 8, 0)));
        let acts = dev.run(&mut t, at(3, 8, 0));
        let [Action::Prompt { concept, label, deadline, data_driven, .. }] = &acts[..] else { panic!("{acts:?}") };
        assert_eq!(
            (concept.as_str(), label.as_str(), *deadline, *data_driven),
            ("4985", "BG Fasting", at(3, 9, 0), false)
        );
        let (p, _) = t.pending_prompt().unwrap();
        t.answer(p, DataValue::Number(95.0), at(3, 8, 10)).unwrap();
        let acts = dev.run(&mut t, at(3, 8, 10));
        assert!(matches!(&acts[..], [Action::EventInserted { concept, .. }] if concept == "4985"));
        assert_eq!(t.next_wakeup(), Some(at(4, 8, 0)));
    }

    #[test]
    fn late_answer_is_missed() {
        let env = parse_envelope(BG).unwrap();
        let mut t = UnitTask::new(env.unit("20102").unwrap(), at(3, 0, 0).date());
        let mut dev = Device::new();
        dev.run(&mut t, at(3, 8, 0));
        let (p, _) = t.pending_prompt().unwrap();
        assert_eq!(t.answer(p, DataValue::Number(95.0), at(3, 9, 30)), Err(AnswerError::Missed));
        let acts = dev.run(&mut t, at(3, 9, 30));
        assert!(matches!(&acts[..], [Action::PromptMissed { .. }]));
    }

    #[test]
    fn second_abnormal_date_calls_back() {
        let env = parse_envelope(BG).unwrap();
        let mut t = UnitTask::new(env.unit("20130").unwrap(), at(3, 0, 0).date());
        let mut dev = Device::new();
        assert!(dev.run(&mut t, at(3, 0, 0)).is_empty());
        dev.insert(1, "4986", 160.0, at(3, 10, 0));
        assert!(dev.run(&mut t, at(3, 10, 0)).is_empty());
        dev.insert(2, "4986", 160.0, at(5, 10, 0));
        let acts = dev.run(&mut t, at(5, 10, 0));
        assert!(matches!(&acts[..], [Action::Callback { callback_id, .. }] if callback_id == "5112"), "{acts:?}");
        // still true: no second callback until the window clears and fills again
        dev.insert(3, "4986", 160.0, at(6, 10, 0));
        assert!(dev.run(&mut t, at(6, 10, 0)).is_empty());
    }

    #[test]
    fn medication_reminder_then_prompt() {
        let u = parse_unit(MEDICATION).unwrap();
        let mut t = UnitTask::new(&u, at(3, 0, 0).date());
        let mut dev = Device::new();
        assert!(dev.run(&mut t, at(3, 12, 0)).is_empty());
        assert_eq!(t.next_wakeup(), Some(at(3, 19, 30)));
        let acts = dev.run(&mut t, at(3, 19, 30));
        assert!(matches!(&acts[..], [Action::Reminder { due, .. }] if *due == at(3, 20, 0)));
        let acts = dev.run(&mut t, at(3, 20, 0));
        let [Action::Prompt { label, deadline, concept, .. }] = &acts[..] else { panic!("{acts:?}") };
        assert_eq!(label, "Prendi il farmaco atorvastatina, 80.0 mg ");
        assert_eq!((concept.as_str(), *deadline), ("9648", at(3, 22, 0)));
        assert!(matches!(dev.globals.get("AFDoseId"), Some(Value::Str(s)) if s.len() == 36));
    }

    #[test]
    fn bounded_schedule_fires_on_at_most_duration_dates() {
        let src = "unitProjection(\"m\",\"n\") { while (true) { waitPeriodic(\"1,2,3,4,5,6,7\", \"20:00\", null, \"1\", \"3\"); callback(\"c\", \"x\"); } }";
        let u = parse_unit(src).unwrap();
        let mut t = UnitTask::new(&u, at(3, 0, 0).date());
        let mut dev = Device::new();
        let mut fired = vec![];
        let mut now = at(3, 0, 0);
        while let Some(acts) = Some(dev.run(&mut t, now)) {
            fired.extend(acts);
            match t.next_wakeup() {
                Some(w) => now = w,
                None => break,
            }
        }
        let callbacks = fired.iter().filter(|a| matches!(a, Action::Callback { .. })).count();
        assert_eq!(callbacks, 3);
        assert!(matches!(fired.last(), Some(Action::UnitExpired { .. })));
        assert_eq!(t.state, TaskState::Expired);
    }

    #[test]
    fn busy_loop_faults() {
        let u = parse_unit("unitProjection(\"b\",\"n\") { while (true) { var x = 1; } }").unwrap();
        let mut t = UnitTask::new(&u, at(3, 0, 0).date());
        let acts = Device::new().run(&mut t, at(3, 0, 0));
        assert!(matches!(&acts[..], [Action::UnitFault { .. }]));
        assert_eq!(t.state, TaskState::Faulted);
    }

    #[test]
    fn null_reminder_uses_declared_lead() {
        let env = parse_envelope(BG).unwrap();
        let mut t = UnitTask::new(env.unit("20102").unwrap(), at(3, 0, 0).date());
        let mut dev = Device::new();
        dev.leads.insert("4985".into(), 5);
        dev.run(&mut t, at(3, 0, 0));
        assert_eq!(t.next_wakeup(), Some(at(3, 7, 55)));
        let acts = dev.run(&mut t, at(3, 7, 55));
        assert!(matches!(&acts[..], [Action::Reminder { concept: Some(c), .. }] if c == "4985"));
    }
}
