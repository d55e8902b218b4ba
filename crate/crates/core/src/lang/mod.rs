//! The projection language: unit-projections, envelopes and the declarative
//! section that travel from the central engine to the device.
//!
//! [`parse_envelope`] and [`parse_unit`] read text, [`print_envelope`] and
//! [`print_unit`] write the canonical form back. Printing then parsing
//! yields an equal AST; the original source text of a unit is kept but is
//! not part of equality.

mod ast;
mod lexer;
mod parser;
mod print;
mod subst;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ast::*;
pub use parser::{parse_envelope, parse_expr, parse_unit};
pub use print::{print_envelope, print_expr, print_unit, quote};
pub use subst::{substitute_thresholds, threshold_tokens, SubstError};

use crate::time::TimeOfDay;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ParseErrorKind {
    Syntax(String),
    UnknownIdentifier(String),
    CallbackOutsideUnit,
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: ", self.line, self.col)?;
        match &self.kind {
            ParseErrorKind::Syntax(m) => write!(f, "syntax error: {m}"),
            ParseErrorKind::UnknownIdentifier(name) => write!(f, "unknown identifier `{name}`"),
            ParseErrorKind::CallbackOutsideUnit => f.write_str("callback outside a unit projection"),
            ParseErrorKind::Invalid(m) => f.write_str(m),
        }
    }
}

/// One independently startable sub-plan.
#[derive(Debug, Clone)]
pub struct UnitProjection {
    pub id: String,
    pub name: String,
    pub source: String,
    pub body: Vec<Statement>,
}

impl PartialEq for UnitProjection {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.name == other.name && self.body == other.body
    }
}

impl UnitProjection {
    pub fn parse(source: &str) -> Result<Self, ParseError> {
        parse_unit(source)
    }

    /// Canonical text of this unit.
    pub fn to_text(&self) -> String {
        print_unit(self)
    }

    /// Concept ids this unit asks the patient for, in body order.
    pub fn data_entry_concepts(&self) -> Vec<String> {
        let mut out = Vec::new();
        visit(&self.body, &mut |s| {
            if let Statement::PatientDataEntry { concept_id, .. } = s {
                if !out.contains(concept_id) {
                    out.push(concept_id.clone());
                }
            }
        });
        out
    }

    pub fn callback_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        visit(&self.body, &mut |s| {
            if let Statement::Callback { callback_id, .. } = s {
                out.push(callback_id.clone());
            }
        });
        out
    }
}

/// Pre-order walk over a statement tree.
pub fn visit(body: &[Statement], f: &mut impl FnMut(&Statement)) {
    for s in body {
        f(s);
        match s {
            Statement::WhileTrue { body } | Statement::ForIn { body, .. } => visit(body, f),
            Statement::IfTemporalQuery { then_body, else_body, .. } => {
                visit(then_body, f);
                visit(else_body, f);
            }
            _ => {}
        }
    }
}

pub fn visit_mut(body: &mut [Statement], f: &mut impl FnMut(&mut Statement)) {
    for s in body.iter_mut() {
        f(s);
        match s {
            Statement::WhileTrue { body } | Statement::ForIn { body, .. } => visit_mut(body, f),
            Statement::IfTemporalQuery { then_body, else_body, .. } => {
                visit_mut(then_body, f);
                visit_mut(else_body, f);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QodLevel {
    Low,
    VeryLow,
}

impl QodLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            QodLevel::Low => "Low",
            QodLevel::VeryLow => "VeryLow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Low" => Some(QodLevel::Low),
            "VeryLow" | "Very Low" => Some(QodLevel::VeryLow),
            _ => None,
        }
    }
}

/// A quality-of-data rule. Values of the related concepts outside
/// `range` are marked with `level`; items without a range only tag the
/// concepts and leave grading to the device defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QodItem {
    pub quality_id: String,
    pub level: QodLevel,
    pub relate_to: Vec<String>,
    pub range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Reminder {
    pub value: TimeOfDay,
    pub remind_lead_minutes: i64,
    pub target_concept_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PersonalEvent {
    pub concept_id: String,
    pub event_name: String,
    /// Guideline context this personal event induces, when known.
    pub context: Option<String>,
    pub reminders: Vec<Reminder>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeclarativeSection {
    pub qod_items: Vec<QodItem>,
    pub personal_events: Vec<PersonalEvent>,
}

impl DeclarativeSection {
    /// Personal event whose reminders apply in `context`, matched by induced
    /// context first and by event name second.
    pub fn personal_event_for(&self, context: &str) -> Option<&PersonalEvent> {
        self.personal_events
            .iter()
            .find(|p| p.context.as_deref() == Some(context))
            .or_else(|| self.personal_events.iter().find(|p| p.event_name == context))
    }
}

/// The unit of knowledge shipped to the device.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionEnvelope {
    pub gl_id: String,
    pub gl_name: String,
    pub current_context: String,
    pub projection_id: String,
    pub stop_list: Vec<String>,
    pub start_list: Vec<String>,
    pub units: Vec<UnitProjection>,
    pub declarative: Option<DeclarativeSection>,
}

impl ProjectionEnvelope {
    pub fn check(&self) -> Result<(), String> {
        for (i, u) in self.units.iter().enumerate() {
            if self.units[..i].iter().any(|o| o.id == u.id) {
                return Err(alloc::format!("unit {} shipped twice", u.id));
            }
        }
        for (i, id) in self.start_list.iter().enumerate() {
            if self.start_list[..i].contains(id) {
                return Err(alloc::format!("unit {id} started twice"));
            }
            if !self.units.iter().any(|u| &u.id == id) {
                return Err(alloc::format!("started unit {id} has no body"));
            }
        }
        if let Some(u) = self.units.iter().find(|u| !self.start_list.contains(&u.id)) {
            return Err(alloc::format!("unit {} is shipped but not started", u.id));
        }
        if let Some(id) = self.stop_list.iter().find(|id| self.start_list.contains(id)) {
            return Err(alloc::format!("unit {id} is both stopped and started"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        parse_envelope(text)
    }

    pub fn to_text(&self) -> String {
        print_envelope(self)
    }

    pub fn unit(&self, id: &str) -> Option<&UnitProjection> {
        self.units.iter().find(|u| u.id == id)
    }
}
