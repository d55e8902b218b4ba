//! The central engine: applies the plan tree for one patient, projects
//! personalized units to the device, reacts to callbacks, monitoring
//! triggers and patient data, and recovers the device after a crash.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use chrono::TimeDelta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{Audience, KnowledgeBase, Level, MessageKind, PlanKind};
use crate::lang::{
    self, print_unit, quote, DeclarativeSection, Operand, PersonalEvent, ProjectionEnvelope, QodItem, QodLevel,
    Reminder, Statement, Threshold, UnitProjection,
};
use crate::mdss::{Decision, Feed, Mdss, Output, Response, Upstream};
use crate::phr::{
    Event, InteractionRecord, InteractionSubtype, InteractionType, PatientRecord, PhrError, Prescription,
};
use crate::temporal::{Abstraction, Firing, Monitor, Pattern, SubscriptionId, WindowQuery};
use crate::time::{calendar_days_between, iso_weekday, Date, Timestamp, Weekdays};

/// How long a medication intake prompt stays answerable.
pub const MEDICATION_PROMPT_VALIDITY: &str = "2 hours";
/// How long a patient recommendation waits for accept or decline.
pub const RECOMMENDATION_VALIDITY_HOURS: i64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Policy {
    #[default]
    PassingOfControl,
    FullMdss,
    FullBeDss,
    FullShadowing,
    SemiShadowing,
}

impl Policy {
    pub fn cli_name(self) -> &'static str {
        match self {
            Policy::PassingOfControl => "passing-of-control",
            Policy::FullMdss => "full-mdss",
            Policy::FullBeDss => "full-bedss",
            Policy::FullShadowing => "full-shadow",
            Policy::SemiShadowing => "semi-shadow",
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [Policy::PassingOfControl, Policy::FullMdss, Policy::FullBeDss, Policy::FullShadowing, Policy::SemiShadowing]
            .into_iter()
            .find(|p| p.cli_name() == s)
            .ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PlanState {
    Inactive,
    Eligible,
    Active,
    SuspendedProjected,
    Completed,
    Aborted,
}

impl PlanState {
    pub fn is_terminal(self) -> bool {
        matches!(self, PlanState::Completed | PlanState::Aborted)
    }

    fn is_live(self) -> bool {
        matches!(self, PlanState::Active | PlanState::SuspendedProjected | PlanState::Eligible)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlanInstance {
    pub plan_id: String,
    pub state: PlanState,
    pub activated_at: Option<Timestamp>,
    pub completed_at: Option<Timestamp>,
    #[serde(skip)]
    cursor: usize,
    #[serde(skip)]
    subs: Vec<SubscriptionId>,
}

/// Messages from the central engine to the device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum Downstream {
    #[serde(rename_all = "camelCase")]
    Projection {
        projection_id: String,
        text: String,
        /// Patient history restored on the device after a crash.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        history: Vec<Event>,
    },
    #[serde(rename_all = "camelCase")]
    Recommendation { message_id: String, text: String, needs_response: bool },
    #[serde(rename_all = "camelCase")]
    Mirror { event: Event },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "to", rename_all = "camelCase")]
pub enum BeOutput {
    Device(Downstream),
    #[serde(rename_all = "camelCase")]
    CareGiver {
        message_id: String,
        text: String,
        needs_response: bool,
    },
    Diagnostic {
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BedssError {
    #[error("plan {0} is not projected")]
    NotProjected(String),
    #[error("unknown plan {0}")]
    UnknownPlan(String),
    #[error("plan {plan}: {error}")]
    Threshold { plan: String, error: lang::SubstError },
    #[error("plan {plan}: {error}")]
    Parse { plan: String, error: lang::ParseError },
    #[error("{0}")]
    Phr(#[from] PhrError),
    #[error("{0}")]
    Envelope(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "divergence", rename_all = "camelCase")]
pub enum Divergence {
    OnlyLocal(Decision),
    OnlyCentral(Decision),
    #[serde(rename_all = "camelCase")]
    Undelivered {
        message_id: String,
    },
}

/// Compares decision logs under the shadowing policies. Full shadowing
/// reports every decision taken on one side only (same unit, kind, id and
/// date); semi shadowing reports recommendations never acknowledged.
pub fn shadow_check(
    policy: Policy,
    local: &[Decision],
    central: &[Decision],
    undelivered: &[String],
) -> Vec<Divergence> {
    match policy {
        Policy::FullShadowing => {
            let key = |d: &Decision| (d.at.date(), d.unit.clone(), d.kind.clone(), d.id.clone());
            let mut remaining: Vec<&Decision> = central.iter().collect();
            let mut out = Vec::new();
            for d in local {
                match remaining.iter().position(|c| key(c) == key(d)) {
                    Some(i) => {
                        remaining.remove(i);
                    }
                    None => out.push(Divergence::OnlyLocal(d.clone())),
                }
            }
            out.extend(remaining.into_iter().map(|d| Divergence::OnlyCentral(d.clone())));
            out.sort();
            out
        }
        Policy::SemiShadowing => {
            undelivered.iter().map(|m| Divergence::Undelivered { message_id: m.clone() }).collect()
        }
        _ => Vec::new(),
    }
}

#[derive(Default)]
struct Batch {
    stop: Vec<String>,
    start: Vec<String>,
    terminal: Vec<String>,
    out: Vec<BeOutput>,
    activations: BTreeMap<String, usize>,
}

impl Batch {
    fn start(&mut self, unit: &str) {
        self.stop.retain(|u| u != unit);
        if !self.start.iter().any(|u| u == unit) {
            self.start.push(unit.into());
        }
    }

    fn stop(&mut self, unit: &str, was_active: bool) {
        let queued = self.start.iter().any(|u| u == unit);
        self.start.retain(|u| u != unit);
        if (was_active || !queued) && !self.stop.iter().any(|u| u == unit) {
            self.stop.push(unit.into());
        }
    }
}

/// Remaining (offset, duration) of a bounded schedule after `elapsed` days:
/// the start offset is consumed first, then the duration.
pub fn remaining_bounds(offset: i64, duration: i64, elapsed: i64) -> (i64, i64) {
    let left = offset - elapsed;
    if left >= 0 {
        (left, duration)
    } else {
        (0, duration + left)
    }
}

/// Shrinks every bounded `waitPeriodic` of `unit` by `elapsed` whole days.
/// Returns `None` when some bounded schedule has nothing left.
pub fn shrink_unit(unit: &UnitProjection, elapsed: i64) -> Option<UnitProjection> {
    let mut u = unit.clone();
    let mut exhausted = false;
    lang::visit_mut(&mut u.body, &mut |s| {
        if let Statement::WaitPeriodic { start_offset_days, duration_days, .. } = s {
            let off = start_offset_days.unwrap_or(0);
            match *duration_days {
                Some(d) => {
                    let (o, d) = remaining_bounds(off, d, elapsed);
                    if d <= 0 {
                        exhausted = true;
                    }
                    *start_offset_days = Some(o);
                    *duration_days = Some(d);
                }
                None if start_offset_days.is_some() => *start_offset_days = Some((off - elapsed).max(0)),
                None => {}
            }
        }
    });
    (!exhausted).then_some(u)
}

fn bounded(unit: &UnitProjection) -> bool {
    let mut any = false;
    lang::visit(&unit.body, &mut |s| {
        if let Statement::WaitPeriodic { duration_days: Some(_), .. } = s {
            any = true;
        }
    });
    any
}

pub struct Bedss {
    pub kb: KnowledgeBase,
    pub phr: PatientRecord,
    pub policy: Policy,
    thresholds: BTreeMap<String, f64>,
    plans: BTreeMap<String, PlanInstance>,
    monitor: Monitor,
    context: String,
    projection_seq: u64,
    /// Latest text of every unit sent, by unit id.
    sent: BTreeMap<String, UnitProjection>,
    /// Medication unit id to prescription index.
    medications: BTreeMap<String, usize>,
    diagnostics: Vec<String>,
    hosted: Option<Mdss>,
    recommendations: BTreeMap<String, bool>,
    started: bool,
}

impl Bedss {
    pub fn new(kb: KnowledgeBase, phr: PatientRecord, policy: Policy, overrides: &BTreeMap<String, f64>) -> Self {
        let mut thresholds = kb.threshold_values();
        thresholds.extend(overrides.iter().map(|(k, v)| (k.clone(), *v)));
        let mut monitor = Monitor::new();
        for e in phr.all_events() {
            monitor.index.insert(e);
        }
        let hosted = matches!(policy, Policy::FullShadowing | Policy::FullBeDss)
            .then(|| Mdss::new(phr.patient_id.clone(), u64::from(u32::MAX)));
        let context = kb.default_context().map(|c| c.id.clone()).unwrap_or_default();
        Bedss {
            kb,
            phr,
            policy,
            thresholds,
            plans: BTreeMap::new(),
            monitor,
            context,
            projection_seq: 0,
            sent: BTreeMap::new(),
            medications: BTreeMap::new(),
            diagnostics: Vec::new(),
            hosted,
            recommendations: BTreeMap::new(),
            started: false,
        }
    }

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn plan_state(&self, id: &str) -> PlanState {
        self.plans.get(id).map_or(PlanState::Inactive, |p| p.state)
    }

    pub fn plan_instances(&self) -> impl Iterator<Item = &PlanInstance> {
        self.plans.values()
    }

    /// Decisions of the central copy of the device engine, when one runs.
    pub fn central_decisions(&self) -> &[Decision] {
        self.hosted.as_ref().map_or(&[], |m| m.decisions())
    }

    pub fn hosted(&self) -> Option<&Mdss> {
        self.hosted.as_ref()
    }

    /// Recommendations sent to the patient and not acknowledged yet.
    pub fn undelivered(&self) -> Vec<String> {
        self.recommendations.iter().filter(|(_, ok)| !**ok).map(|(m, _)| m.clone()).collect()
    }

    pub fn mark_delivered(&mut self, message_id: &str) {
        if let Some(ok) = self.recommendations.get_mut(message_id) {
            *ok = true;
        }
    }

    pub fn next_wakeup(&self) -> Option<Timestamp> {
        self.hosted.as_ref().and_then(Mdss::next_wakeup)
    }

    fn diag(&mut self, batch: &mut Batch, text: String) {
        self.diagnostics.push(text.clone());
        batch.out.push(BeOutput::Diagnostic { text });
    }

    fn log(
        &mut self,
        at: Timestamp,
        kind: InteractionType,
        subtype: InteractionSubtype,
        technical: bool,
        detail: &str,
    ) {
        let rec = InteractionRecord { timestamp: at, kind, subtype, technical_only: technical, detail: detail.into() };
        // only projection records may be technical, which is all this engine emits
        let _ = self.phr.log_interaction(rec);
    }

    fn central(&self) -> bool {
        self.policy != Policy::FullMdss
    }

    // ---- patterns ----

    fn resolve_pattern(&self, id: &str) -> Option<Pattern> {
        let p = self.kb.pattern(id)?;
        let threshold = match &p.threshold {
            Threshold::Value(v) => *v,
            Threshold::Var(_) => *self.thresholds.get(p.threshold_var()?)?,
        };
        let abstraction = self.kb.abstraction(&p.target).map(|(op, exprs)| Abstraction {
            name: p.target.clone(),
            op,
            exprs: exprs.to_vec(),
        });
        Some(Pattern {
            id: p.id.clone(),
            query: WindowQuery { agg: p.aggregator, cmp: p.comparison, threshold, window_days: p.window_days },
            target: p.target.clone(),
            abstraction,
        })
    }

    fn subscribe(&mut self, plan: &str, pattern: &str, now: Timestamp, batch: &mut Batch) {
        if !self.central() || self.kb.pattern(pattern).is_none_or(|p| p.level != Level::Bedss) {
            return;
        }
        let Some(pat) = self.resolve_pattern(pattern) else {
            self.diag(batch, format!("pattern {pattern} cannot be resolved"));
            return;
        };
        match self.monitor.subscribe(pat, plan, now) {
            Ok(id) => self.plans.get_mut(plan).unwrap().subs.push(id),
            Err(e) => self.diag(batch, format!("plan {plan}: {e}")),
        }
    }

    fn pattern_holds(&self, pattern: &str, now: Timestamp) -> bool {
        self.resolve_pattern(pattern).is_some_and(|p| {
            crate::temporal::window_query(&p.query, p.target(), now, &self.monitor.index).is_ok_and(|(ok, _)| ok)
        })
    }

    // ---- plan lifecycle ----

    fn activate(&mut self, id: &str, now: Timestamp, batch: &mut Batch) {
        let n = batch.activations.entry(id.into()).or_default();
        *n += 1;
        if *n > 8 {
            self.diag(batch, format!("plan {id} reactivated too often in one step"));
            return;
        }
        let Some(plan) = self.kb.plan(id).cloned() else { return };
        let mut inst = PlanInstance {
            plan_id: id.into(),
            state: PlanState::Active,
            activated_at: Some(now),
            completed_at: None,
            cursor: 0,
            subs: Vec::new(),
        };
        if let Some(old) = self.plans.get(id) {
            for s in &old.subs {
                self.monitor.unsubscribe(s);
            }
        }
        if plan.is_projected {
            inst.state = PlanState::SuspendedProjected;
            self.plans.insert(id.into(), inst);
            batch.start(id);
            for c in plan.complete_condition.iter().chain(plan.abort_condition.iter()) {
                self.subscribe(id, c, now, batch);
            }
            return;
        }
        self.plans.insert(id.into(), inst);
        for c in plan.complete_condition.iter().chain(plan.abort_condition.iter()) {
            self.subscribe(id, c, now, batch);
        }
        match plan.kind {
            PlanKind::Periodic | PlanKind::Sequential => match plan.children.first() {
                Some(c) => self.activate(c, now, batch),
                None => self.finish(id, PlanState::Completed, now, batch),
            },
            PlanKind::Parallel => {
                if plan.children.is_empty() {
                    self.finish(id, PlanState::Completed, now, batch);
                }
                for c in &plan.children {
                    self.activate(c, now, batch);
                }
            }
            PlanKind::Monitoring => {
                if let Some(p) = &plan.listens_to {
                    self.subscribe(id, p, now, batch);
                }
            }
            PlanKind::Action => {
                if let Some(m) = &plan.message {
                    self.deliver(m, now, batch);
                }
                self.finish(id, PlanState::Completed, now, batch);
            }
            PlanKind::Decision => {
                let chosen = plan.children.iter().find(|c| {
                    self.kb
                        .plan(c)
                        .and_then(|p| p.eligibility_condition.as_ref())
                        .is_none_or(|cond| self.pattern_holds(cond, now))
                });
                match chosen {
                    Some(c) => {
                        let c = c.clone();
                        self.activate(&c, now, batch)
                    }
                    None => self.finish(id, PlanState::Completed, now, batch),
                }
            }
        }
    }

    /// Ends a plan and everything under it.
    fn finish(&mut self, id: &str, state: PlanState, now: Timestamp, batch: &mut Batch) {
        let Some(inst) = self.plans.get(id) else { return };
        if inst.state.is_terminal() {
            return;
        }
        let mut stack: Vec<String> = self.kb.plan(id).map(|p| p.children.clone()).unwrap_or_default();
        self.close(id, state, now, batch);
        while let Some(c) = stack.pop() {
            if self.plans.get(&c).is_some_and(|i| i.state.is_live()) {
                self.close(&c, PlanState::Aborted, now, batch);
            }
            stack.extend(self.kb.plan(&c).map(|p| p.children.clone()).unwrap_or_default());
        }
        batch.terminal.push(id.into());
    }

    fn close(&mut self, id: &str, state: PlanState, now: Timestamp, batch: &mut Batch) {
        let inst = self.plans.get_mut(id).unwrap();
        let was_projected = inst.state == PlanState::SuspendedProjected;
        inst.state = state;
        inst.completed_at = Some(now);
        for s in core::mem::take(&mut inst.subs) {
            self.monitor.unsubscribe(&s);
        }
        if was_projected {
            let active = self.phr.active_units().contains(id);
            batch.stop(id, active);
        }
    }

    fn child_terminal(&mut self, child: &str, now: Timestamp, batch: &mut Batch) {
        let Some(parent) = self.kb.parent(child).cloned() else { return };
        if self.plans.get(&parent.id).is_none_or(|i| i.state != PlanState::Active) {
            return;
        }
        let idx = parent.children.iter().position(|c| c == child).unwrap_or(0);
        match parent.kind {
            PlanKind::Periodic => {
                let next = parent.children[(idx + 1) % parent.children.len()].clone();
                self.plans.get_mut(&parent.id).unwrap().cursor = (idx + 1) % parent.children.len();
                self.activate(&next, now, batch);
            }
            PlanKind::Sequential => match parent.children.get(idx + 1) {
                Some(next) => {
                    let next = next.clone();
                    self.plans.get_mut(&parent.id).unwrap().cursor = idx + 1;
                    self.activate(&next, now, batch);
                }
                None => self.finish(&parent.id, PlanState::Completed, now, batch),
            },
            PlanKind::Parallel => {
                let done = parent.children.iter().all(|c| {
                    self.kb.plan(c).is_some_and(|p| p.kind == PlanKind::Monitoring)
                        || self.plans.get(c).is_some_and(|i| i.state.is_terminal())
                });
                if done {
                    self.finish(&parent.id, PlanState::Completed, now, batch);
                }
            }
            PlanKind::Decision => self.finish(&parent.id, PlanState::Completed, now, batch),
            PlanKind::Monitoring | PlanKind::Action => {}
        }
    }

    fn settle(&mut self, now: Timestamp, batch: &mut Batch) {
        while !batch.terminal.is_empty() {
            let ids = core::mem::take(&mut batch.terminal);
            for id in ids {
                self.child_terminal(&id, now, batch);
            }
        }
    }

    fn deliver(&mut self, message_id: &str, now: Timestamp, batch: &mut Batch) {
        let Some(m) = self.kb.message(message_id).cloned() else { return };
        let needs_response = m.kind == MessageKind::Recommendation;
        let subtype = if needs_response { InteractionSubtype::Procedure } else { InteractionSubtype::Notification };
        match m.audience {
            Audience::Patient => {
                self.log(now, InteractionType::PatientRecommendation, subtype, false, &m.id);
                self.recommendations.insert(m.id.clone(), false);
                batch.out.push(BeOutput::Device(Downstream::Recommendation {
                    message_id: m.id.clone(),
                    text: m.text.clone(),
                    needs_response,
                }));
            }
            Audience::CareProvider => {
                self.log(now, InteractionType::CareGiverRecommendation, subtype, false, &m.id);
                batch.out.push(BeOutput::CareGiver { message_id: m.id.clone(), text: m.text.clone(), needs_response });
            }
        }
    }

    /// Reacts to a pattern firing, centrally detected or called back.
    fn on_pattern(&mut self, pattern: &str, now: Timestamp, batch: &mut Batch) {
        let monitors: Vec<String> = self
            .kb
            .plans()
            .iter()
            .filter(|p| p.kind == PlanKind::Monitoring && !p.is_projected && p.listens_to.as_deref() == Some(pattern))
            .filter(|p| self.plan_state(&p.id) == PlanState::Active)
            .map(|p| p.id.clone())
            .collect();
        let mut ids = monitors.clone();
        ids.sort();
        for m in ids {
            let children = self.kb.plan(&m).map(|p| p.children.clone()).unwrap_or_default();
            for c in children {
                self.activate(&c, now, batch);
            }
        }
        let mut conditioned: Vec<(String, PlanState)> = self
            .kb
            .plans()
            .iter()
            .filter(|p| self.plans.get(&p.id).is_some_and(|i| i.state.is_live()))
            .filter_map(|p| {
                if p.abort_condition.as_deref() == Some(pattern) {
                    Some((p.id.clone(), PlanState::Aborted))
                } else if p.complete_condition.as_deref() == Some(pattern) {
                    Some((p.id.clone(), PlanState::Completed))
                } else {
                    None
                }
            })
            .collect();
        conditioned.sort_by(|a, b| a.0.cmp(&b.0));
        for (id, state) in conditioned {
            self.finish(&id, state, now, batch);
        }
        self.settle(now, batch);
    }

    fn handle_firings(&mut self, firings: Vec<Firing>, now: Timestamp, batch: &mut Batch) {
        let patterns: BTreeSet<String> = firings.iter().map(|f| f.pattern_id.clone()).collect();
        for p in &patterns {
            self.log(now, InteractionType::DataNotification, InteractionSubtype::MonitoringTriggered, false, p);
            self.on_pattern(p, now, batch);
        }
        for f in &firings {
            self.monitor.acknowledge(&f.subscription, now);
        }
    }

    // ---- projection building ----

    fn fresh_projection_id(&mut self) -> String {
        self.projection_seq += 1;
        format!("{}", self.projection_seq)
    }

    /// Unit of a projected plan with thresholds substituted and, for
    /// personalized plans, the patient's preferred schedule for `context`.
    pub fn personalized_unit(&mut self, plan_id: &str, context: &str) -> Result<UnitProjection, BedssError> {
        let plan = self.kb.plan(plan_id).ok_or_else(|| BedssError::UnknownPlan(plan_id.into()))?;
        if !plan.is_projected {
            return Err(BedssError::NotProjected(plan_id.into()));
        }
        let personalized = plan.is_personalized;
        let text = self
            .kb
            .substituted_unit(plan_id, &self.thresholds)
            .ok_or_else(|| BedssError::NotProjected(plan_id.into()))?
            .map_err(|error| BedssError::Threshold { plan: plan_id.into(), error })?;
        let mut unit = lang::parse_unit(&text).map_err(|error| BedssError::Parse { plan: plan_id.into(), error })?;
        if personalized {
            let mut targets = Vec::new();
            let mut waiting = 0usize;
            lang::visit(&unit.body, &mut |s| match s {
                Statement::WaitPeriodic { .. } => {
                    targets.push(None);
                    waiting = targets.len();
                }
                Statement::PatientDataEntry { concept_id, .. } if waiting > 0 && targets[waiting - 1].is_none() => {
                    targets[waiting - 1] = Some(concept_id.clone());
                }
                _ => {}
            });
            let mut k = 0;
            let mut missing = Vec::new();
            let phr = &self.phr;
            lang::visit_mut(&mut unit.body, &mut |s| {
                if let Statement::WaitPeriodic { days, time, .. } = s {
                    if let Some(concept) = targets.get(k).cloned().flatten() {
                        match phr.preference(context, &concept) {
                            Some(p) => {
                                *time = Operand::Lit(p.reminder_time);
                                if let Some(d) = &p.days_of_week {
                                    *days = d.clone();
                                }
                            }
                            None => missing.push(concept),
                        }
                    }
                    k += 1;
                }
            });
            for concept in missing {
                self.diagnostics.push(format!(
                    "plan {plan_id}: no preference for concept {concept} in context {context}; using guideline default"
                ));
            }
        }
        unit.source = print_unit(&unit);
        Ok(unit)
    }

    /// Medication unit for a prescription, bounded to the days left on it.
    pub fn medication_unit(&self, p: &Prescription, today: Date) -> Option<UnitProjection> {
        if p.end_date < today {
            return None;
        }
        let first = p.start_date.max(today);
        let offset =
            calendar_days_between(today.and_time(Default::default()), p.start_date.and_time(Default::default())).max(0);
        let duration = (p.end_date - first).num_days() + 1;
        let days = Weekdays::all_from(iso_weekday(p.start_date));
        let name = format!("{}/{}/{}/{}", self.phr.patient_id, p.medication, p.start_date, p.end_date);
        let id = uuid::Uuid::new_v5(&uuid::Uuid::NAMESPACE_OID, name.as_bytes());
        let doses: Vec<String> = p.dose_per_time.iter().map(|(t, d)| format!("{}: {}", quote(t), quote(d))).collect();
        let leads: Vec<String> =
            p.dose_per_time.keys().map(|t| format!("{}: {}", quote(t), quote(&p.reminder_lead))).collect();
        let text = format!(
            "unitProjection(\"{id}\", \"Medication Take\") {{\n    var dosages = {{{}}};\n    var reminders = {{{}}};\n    while (true) {{\n        for (var time in dosages) {{\n            var dosage = dosages[time];\n            var reminder = reminders[time];\n            waitPeriodic(\"{days}\", time, reminder, \"{offset}\", \"{duration}\");\n            setProjectionGlobal({}, createUUID());\n            event = createEvent();\n            event.patientDataEntry({}, {} + dosage + \" \", \"boolean\", \"{MEDICATION_PROMPT_VALIDITY}\");\n            event.insert();\n        }}\n    }}\n}}\n",
            doses.join(", "),
            leads.join(", "),
            quote(&format!("{}DoseId", self.kb.name())),
            quote(&p.concept_id),
            quote(&format!("{}, ", p.prompt)),
        );
        let mut unit = lang::parse_unit(&text).ok()?;
        unit.source = text;
        Some(unit)
    }

    /// Quality items from concept ranges and personal-event reminders from
    /// DIRC rules and preferences.
    pub fn declarative(&self) -> DeclarativeSection {
        let mut qod_items = Vec::new();
        for c in &self.kb.doc.concepts {
            let Some((lo, hi)) = c.valid_range else { continue };
            qod_items.push(QodItem {
                quality_id: format!("{}-range", c.id),
                level: QodLevel::VeryLow,
                relate_to: alloc::vec![c.id.clone()],
                range: Some((lo, hi)),
            });
            if let Some(band) = c.guard_band.filter(|b| *b > 0.0) {
                qod_items.push(QodItem {
                    quality_id: format!("{}-guard", c.id),
                    level: QodLevel::Low,
                    relate_to: alloc::vec![c.id.clone()],
                    range: Some((lo + band, hi - band)),
                });
            }
        }
        let personal_events = self
            .phr
            .dircs()
            .iter()
            .map(|d| PersonalEvent {
                concept_id: d.personal_event_concept.clone(),
                event_name: d.personal_event.clone(),
                context: Some(d.induced_context.clone()),
                reminders: self
                    .phr
                    .preferences_for(&d.induced_context)
                    .into_iter()
                    .map(|p| Reminder {
                        value: p.reminder_time,
                        remind_lead_minutes: p.remind_lead_minutes.unwrap_or(0),
                        target_concept_id: p.target_concept_id.clone(),
                    })
                    .collect(),
            })
            .collect();
        DeclarativeSection { qod_items, personal_events }
    }

    /// Envelope stopping `stop` and starting the given plans and medication units.
    pub fn build_projection(
        &mut self,
        stop: &[String],
        start_plans: &[String],
        medications: &[UnitProjection],
        now: Timestamp,
    ) -> Result<ProjectionEnvelope, BedssError> {
        let context = self.context.clone();
        let mut units = Vec::new();
        for id in start_plans {
            units.push(self.personalized_unit(id, &context)?);
        }
        units.extend(medications.iter().cloned());
        let env = ProjectionEnvelope {
            gl_id: self.kb.id().into(),
            gl_name: self.kb.name().into(),
            current_context: context,
            projection_id: self.fresh_projection_id(),
            stop_list: stop.to_vec(),
            start_list: units.iter().map(|u| u.id.clone()).collect(),
            units,
            declarative: Some(self.declarative()),
        };
        env.check().map_err(BedssError::Envelope)?;
        let _ = now;
        Ok(env)
    }

    fn medication_units(&mut self, today: Date) -> Vec<UnitProjection> {
        let mut out = Vec::new();
        for (i, p) in self.phr.prescriptions().iter().enumerate() {
            if let Some(u) = self.medication_unit(p, today) {
                self.medications.insert(u.id.clone(), i);
                out.push(u);
            }
        }
        out
    }

    fn send(
        &mut self,
        env: ProjectionEnvelope,
        history: Vec<Event>,
        technical: bool,
        now: Timestamp,
        batch: &mut Batch,
    ) {
        if let Err(e) = self.phr.record_projection(&env.projection_id, &env.stop_list, &env.start_list, now) {
            self.diag(batch, format!("projection {}: {e}", env.projection_id));
            return;
        }
        for id in &env.stop_list {
            self.sent.remove(id);
        }
        for u in &env.units {
            self.sent.insert(u.id.clone(), u.clone());
        }
        self.log(now, InteractionType::Projection, InteractionSubtype::Procedure, technical, &env.projection_id);
        let text = env.to_text();
        if let Some(h) = &mut self.hosted {
            let outs = h.apply_envelope(&env, now);
            batch.out.extend(self.hosted_outputs(outs, now));
        }
        if self.policy != Policy::FullBeDss {
            batch.out.push(BeOutput::Device(Downstream::Projection {
                projection_id: env.projection_id,
                text,
                history,
            }));
        }
    }

    /// Turns accumulated plan changes into at most one envelope.
    fn flush(
        &mut self,
        medications: Vec<UnitProjection>,
        force_declarative: bool,
        now: Timestamp,
        mut batch: Batch,
    ) -> Vec<BeOutput> {
        let stop = core::mem::take(&mut batch.stop);
        let start = core::mem::take(&mut batch.start);
        if !stop.is_empty() || !start.is_empty() || !medications.is_empty() || force_declarative {
            match self.build_projection(&stop, &start, &medications, now) {
                Ok(env) => self.send(env, Vec::new(), false, now, &mut batch),
                Err(e) => self.diag(&mut batch, format!("{e}")),
            }
        }
        batch.out
    }

    // ---- entry points ----

    fn current_context(&self, now: Timestamp) -> String {
        match self.phr.induced_context(now) {
            Some(c) => c.into(),
            None => self.kb.default_context().map(|c| c.id.clone()).unwrap_or_default(),
        }
    }

    /// Instantiates the plan tree and projects the initial frontier.
    pub fn start_session(&mut self, now: Timestamp) -> Vec<BeOutput> {
        self.started = true;
        self.context = self.current_context(now);
        let mut batch = Batch::default();
        let root = self.kb.root().id.clone();
        self.activate(&root, now, &mut batch);
        self.settle(now, &mut batch);
        let meds = self.medication_units(now.date());
        self.flush(meds, false, now, batch)
    }

    pub fn receive(&mut self, up: Upstream, now: Timestamp) -> Vec<BeOutput> {
        let mut batch = Batch::default();
        match up {
            Upstream::Ack { .. } => {}
            Upstream::Nack { projection_id, diagnostics, .. } => {
                self.diag(&mut batch, format!("projection {projection_id} rejected: {diagnostics}"));
            }
            Upstream::Callback { callback_id, .. } => {
                self.log(
                    now,
                    InteractionType::DataNotification,
                    InteractionSubtype::CallbackTriggered,
                    false,
                    &callback_id,
                );
                match self.kb.callback(&callback_id).map(|c| c.trigger_pattern.clone()) {
                    None => self.diag(&mut batch, format!("unknown callback {callback_id} ignored")),
                    Some(_) if !self.central() => {}
                    Some(p) => self.on_pattern(&p, now, &mut batch),
                }
            }
            Upstream::Sync { event } => self.store(event, now, false, &mut batch),
            Upstream::Data { subtype, event, reference } => {
                self.log(now, InteractionType::DataNotification, subtype, false, reference.as_deref().unwrap_or(""));
                if subtype == InteractionSubtype::PatientAccepted || subtype == InteractionSubtype::PatientDeclined {
                    if let Some(r) = &reference {
                        self.mark_delivered(r);
                    }
                }
                if let Some(e) = event {
                    self.store(e, now, false, &mut batch);
                }
                if subtype == InteractionSubtype::ContextChanged {
                    return self.context_changed(now, batch);
                }
            }
        }
        self.flush(Vec::new(), false, now, batch)
    }

    fn store(&mut self, e: Event, now: Timestamp, mirror: bool, batch: &mut Batch) {
        if let Err(err) = self.phr.insert_event(e.clone()) {
            self.diag(batch, format!("event {} not stored: {err}", e.id));
            return;
        }
        let firings = self.monitor.insert(&e, now);
        if let Some(h) = &mut self.hosted {
            let outs = if self.policy == Policy::FullBeDss {
                h.local_event(&e.concept_id, e.value.clone(), now, e.source)
            } else {
                h.mirror_event(&e, now)
            };
            let outs = self.hosted_outputs(outs, now);
            batch.out.extend(outs);
        }
        if mirror && self.policy != Policy::FullBeDss {
            batch.out.push(BeOutput::Device(Downstream::Mirror { event: e }));
        }
        if self.central() {
            self.handle_firings(firings, now, batch);
        }
    }

    /// Data recorded centrally (hospital record, care giver); mirrored to the device.
    pub fn record_event(&mut self, e: Event, now: Timestamp) -> Vec<BeOutput> {
        let mut batch = Batch::default();
        self.store(e, now, true, &mut batch);
        self.flush(Vec::new(), false, now, batch)
    }

    pub fn care_giver_response(&mut self, message_id: &str, response: Response, now: Timestamp) -> Vec<BeOutput> {
        let subtype = match response {
            Response::Accept => InteractionSubtype::CareGiverAccepted,
            Response::Decline => InteractionSubtype::CareGiverDeclined,
        };
        self.log(now, InteractionType::DataNotification, subtype, false, message_id);
        Vec::new()
    }

    fn context_changed(&mut self, now: Timestamp, batch: Batch) -> Vec<BeOutput> {
        let next = self.current_context(now);
        if next == self.context {
            return self.flush(Vec::new(), false, now, batch);
        }
        self.context = next;
        let mut batch = batch;
        let active = self.phr.active_units();
        for id in &active {
            if self.kb.plan(id).is_some_and(|p| p.is_personalized) {
                batch.start(id);
            }
        }
        let meds: Vec<UnitProjection> =
            self.medication_units(now.date()).into_iter().filter(|u| active.contains(&u.id)).collect();
        self.flush(meds, true, now, batch)
    }

    /// Adds a prescription and projects its medication unit.
    pub fn add_prescription(&mut self, p: Prescription, now: Timestamp) -> Vec<BeOutput> {
        let mut batch = Batch::default();
        if let Err(e) = self.phr.add_prescription(p.clone()) {
            self.diag(&mut batch, format!("{e}"));
            return batch.out;
        }
        let unit = self.medication_unit(&p, now.date());
        if let Some(u) = &unit {
            self.medications.insert(u.id.clone(), self.phr.prescriptions().len() - 1);
        }
        self.flush(unit.into_iter().collect(), false, now, batch)
    }

    /// End of `completed`: evaluates central patterns and retires bounded
    /// units whose schedule ran out.
    pub fn rollover(&mut self, completed: Date) -> Vec<BeOutput> {
        let now = crate::time::end_of_day(completed);
        let mut batch = Batch::default();
        let tomorrow = completed.succ_opt().unwrap_or(completed);
        let mut expired = Vec::new();
        for id in self.phr.active_units() {
            let (Some(rec), Some(unit)) = (self.phr.active_record(&id), self.sent.get(&id)) else { continue };
            if bounded(unit)
                && shrink_unit(unit, calendar_days_between(rec.sent_date, tomorrow.and_time(Default::default())))
                    .is_none()
            {
                expired.push(id);
            }
        }
        if !expired.is_empty() {
            let pid = self.fresh_projection_id();
            let _ = self.phr.record_projection(&pid, &expired, &[], now);
            for id in &expired {
                self.sent.remove(id);
                if self.plans.get(id).is_some_and(|p| p.state == PlanState::SuspendedProjected) {
                    self.plans.get_mut(id).unwrap().state = PlanState::Completed;
                    batch.terminal.push(id.clone());
                }
            }
            self.settle(now, &mut batch);
        }
        if self.central() {
            let firings = self.monitor.rollover(completed);
            self.handle_firings(firings, now, &mut batch);
        }
        self.flush(Vec::new(), false, now, batch)
    }

    /// Resends every active unit after a device crash, with bounded
    /// schedules shortened by the whole days elapsed since they were sent.
    pub fn recover(&mut self, now: Timestamp) -> Vec<BeOutput> {
        let mut batch = Batch::default();
        let mut resend = Vec::new();
        let mut gone = Vec::new();
        for id in self.phr.active_units() {
            let (Some(rec), Some(unit)) = (self.phr.active_record(&id), self.sent.get(&id)) else {
                gone.push(id);
                continue;
            };
            match shrink_unit(unit, calendar_days_between(rec.sent_date, now)) {
                Some(mut u) => {
                    u.source = print_unit(&u);
                    resend.push(u)
                }
                None => gone.push(id),
            }
        }
        if resend.is_empty() && gone.is_empty() {
            return batch.out;
        }
        let env = ProjectionEnvelope {
            gl_id: self.kb.id().into(),
            gl_name: self.kb.name().into(),
            current_context: self.context.clone(),
            projection_id: self.fresh_projection_id(),
            stop_list: gone.clone(),
            start_list: resend.iter().map(|u| u.id.clone()).collect(),
            units: resend,
            declarative: Some(self.declarative()),
        };
        for id in &gone {
            if self.plans.get(id).is_some_and(|p| p.state == PlanState::SuspendedProjected) {
                self.plans.get_mut(id).unwrap().state = PlanState::Completed;
                batch.terminal.push(id.clone());
            }
        }
        if env.start_list.is_empty() {
            let _ = self.phr.record_projection(&env.projection_id, &env.stop_list, &[], now);
            for id in &gone {
                self.sent.remove(id);
            }
        } else {
            let history: Vec<Event> =
                self.phr.all_events().into_iter().filter(|e| e.valid_start <= now).cloned().collect();
            self.send(env, history, true, now, &mut batch);
        }
        self.settle(now, &mut batch);
        self.flush(Vec::new(), false, now, batch)
    }

    /// Advances the central copy of the device engine, if one runs.
    pub fn step(&mut self, now: Timestamp) -> Vec<BeOutput> {
        let Some(h) = &mut self.hosted else { return Vec::new() };
        let outs = h.step(now);
        let mut out = self.hosted_outputs(outs, now);
        let mut batch = Batch::default();
        batch.out.append(&mut out);
        self.flush(Vec::new(), false, now, batch)
    }

    /// Routes what the central copy of the device engine produced. Under
    /// full shadowing it only records decisions; under central execution
    /// its prompts and notifications go to the patient as direct messages
    /// and its callbacks are handled in place.
    fn hosted_outputs(&mut self, outs: Vec<Output>, now: Timestamp) -> Vec<BeOutput> {
        if self.policy != Policy::FullBeDss {
            return Vec::new();
        }
        let mut batch = Batch::default();
        for o in outs {
            match o {
                Output::Feed(Feed::Notification { message_id, text, .. }) => {
                    self.log(
                        now,
                        InteractionType::PatientRecommendation,
                        InteractionSubtype::Notification,
                        false,
                        &message_id,
                    );
                    batch.out.push(BeOutput::Device(Downstream::Recommendation {
                        message_id,
                        text,
                        needs_response: false,
                    }));
                }
                Output::Feed(Feed::Prompt { concept, label, .. }) => {
                    batch.out.push(BeOutput::Device(Downstream::Recommendation {
                        message_id: concept,
                        text: label,
                        needs_response: false,
                    }));
                }
                Output::Up(Upstream::Callback { callback_id, .. }) => {
                    self.log(
                        now,
                        InteractionType::DataNotification,
                        InteractionSubtype::CallbackTriggered,
                        false,
                        &callback_id,
                    );
                    if let Some(p) = self.kb.callback(&callback_id).map(|c| c.trigger_pattern.clone()) {
                        self.on_pattern(&p, now, &mut batch);
                    }
                }
                _ => {}
            }
        }
        let stop = core::mem::take(&mut batch.stop);
        let start = core::mem::take(&mut batch.start);
        if !stop.is_empty() || !start.is_empty() {
            match self.build_projection(&stop, &start, &[], now) {
                Ok(env) => {
                    let _ = self.phr.record_projection(&env.projection_id, &env.stop_list, &env.start_list, now);
                    self.log(
                        now,
                        InteractionType::Projection,
                        InteractionSubtype::Procedure,
                        false,
                        &env.projection_id,
                    );
                    if let Some(h) = &mut self.hosted {
                        h.apply_envelope(&env, now);
                    }
                }
                Err(e) => self.diag(&mut batch, format!("{e}")),
            }
        }
        batch.out
    }

    pub fn recommendation_deadline(now: Timestamp) -> Timestamp {
        now + TimeDelta::hours(RECOMMENDATION_VALIDITY_HOURS)
    }
}
