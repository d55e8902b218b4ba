use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::time::{Span, TimeOfDay, Weekdays};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "==")]
    Eq,
}

impl CmpOp {
    pub const ALL: [CmpOp; 5] = [CmpOp::Ge, CmpOp::Gt, CmpOp::Le, CmpOp::Lt, CmpOp::Eq];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Ge => ">=",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Lt => "<",
            CmpOp::Eq => "==",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        CmpOp::ALL.into_iter().find(|op| op.symbol() == s)
    }

    pub fn holds<T: PartialOrd>(self, lhs: T, rhs: T) -> bool {
        match self {
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Eq => lhs == rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Aggregator {
    Count,
    Sum,
}

impl Aggregator {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Count => "count",
            Aggregator::Sum => "sum",
        }
    }
}

/// Right-hand side of an aggregate condition: a number, or a knowledge
/// threshold still waiting for substitution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Value(f64),
    Var(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggCondition {
    pub agg: Aggregator,
    pub cmp: CmpOp,
    pub threshold: Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalQuery {
    pub cond: AggCondition,
    pub target: String,
    pub window: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand<T> {
    Lit(T),
    Var(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ValueType {
    Numeric,
    Boolean,
    String,
}

impl ValueType {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::Numeric => "numeric",
            ValueType::Boolean => "boolean",
            ValueType::String => "string",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "numeric" => Some(ValueType::Numeric),
            "boolean" => Some(ValueType::Boolean),
            "string" => Some(ValueType::String),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AbstractionOp {
    Or,
    And,
}

impl AbstractionOp {
    pub fn as_str(self) -> &'static str {
        match self {
            AbstractionOp::Or => "or",
            AbstractionOp::And => "and",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Num(f64),
    Bool(bool),
    Str(String),
    Null,
    Var(String),
    Index { map: String, key: Box<Expr> },
    GetNumber(String),
    GetString(String),
    GetBoolean(String),
    CreateUuid,
    Threshold(String),
    Compare(Box<Expr>, CmpOp, Box<Expr>),
    Concat(Vec<Expr>),
    Map(Vec<(String, Expr)>),
}

impl Expr {
    /// Concept ids read through `event.get*` anywhere in the expression.
    pub fn concepts(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_concepts(&mut out);
        out
    }

    fn collect_concepts(&self, out: &mut Vec<String>) {
        match self {
            Expr::GetNumber(c) | Expr::GetString(c) | Expr::GetBoolean(c) => {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
            Expr::Index { key, .. } => key.collect_concepts(out),
            Expr::Compare(a, _, b) => {
                a.collect_concepts(out);
                b.collect_concepts(out);
            }
            Expr::Concat(parts) => parts.iter().for_each(|p| p.collect_concepts(out)),
            Expr::Map(entries) => entries.iter().for_each(|(_, e)| e.collect_concepts(out)),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Statement {
    WhileTrue {
        body: Vec<Statement>,
    },
    WaitPeriodic {
        days: Weekdays,
        time: Operand<TimeOfDay>,
        reminder: Option<Operand<Span>>,
        start_offset_days: Option<i64>,
        duration_days: Option<i64>,
    },
    CreateEvent,
    PatientDataEntry {
        concept_id: String,
        label: Expr,
        value_type: ValueType,
        validity: Span,
    },
    InsertEvent,
    AnnotateTemporal {
        op: AbstractionOp,
        exprs: Vec<Expr>,
        name: String,
    },
    WaitTemporalQuery {
        query: TemporalQuery,
    },
    IfTemporalQuery {
        query: TemporalQuery,
        then_body: Vec<Statement>,
        else_body: Vec<Statement>,
    },
    Callback {
        callback_id: String,
        message: String,
    },
    PatientNotification {
        message_id: String,
        text: String,
    },
    SetProjectionGlobal {
        name: String,
        expr: Expr,
    },
    VarDecl {
        name: String,
        init: Expr,
    },
    ForIn {
        var: String,
        map: String,
        body: Vec<Statement>,
    },
}
