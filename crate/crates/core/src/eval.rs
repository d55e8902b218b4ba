//! Expression values and evaluation, shared by the interpreter and the
//! abstraction evaluator.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use crate::lang::{CmpOp, Expr};
use crate::phr::DataValue;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Num(f64),
    Bool(bool),
    Str(String),
    Map(Vec<(String, Value)>),
}

impl Value {
    pub fn key(&self) -> String {
        match self {
            Value::Str(s) => s.clone(),
            other => other.to_string(),
        }
    }

    pub fn is_true(&self) -> bool {
        matches!(self, Value::Bool(true))
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Num(v) => write!(f, "{v}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Str(s) => f.write_str(s),
            Value::Map(entries) => {
                f.write_str("{")?;
                for (i, (k, v)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_str("}")
            }
        }
    }
}

impl From<&DataValue> for Value {
    fn from(v: &DataValue) -> Self {
        match v {
            DataValue::Number(n) => Value::Num(*n),
            DataValue::Bool(b) => Value::Bool(*b),
            DataValue::Text(s) => Value::Str(s.clone()),
        }
    }
}

/// What an expression can see.
pub trait Scope {
    fn var(&self, name: &str) -> Option<Value>;
    /// Value of `concept` in the event under evaluation, if any.
    fn field(&self, concept: &str) -> Option<&DataValue>;
    fn fresh_uuid(&mut self) -> String;
}

fn compare(a: &Value, op: CmpOp, b: &Value) -> bool {
    let ord = match (a, b) {
        (Value::Num(x), Value::Num(y)) => x.partial_cmp(y),
        (Value::Str(x), Value::Str(y)) => Some(x.cmp(y)),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        _ => None,
    };
    match ord {
        Some(o) => op.holds(o, Ordering::Equal),
        None => false,
    }
}

/// Evaluates `e`. Type mismatches yield `Null` or `false` rather than errors,
/// so evaluation is total.
pub fn eval(e: &Expr, scope: &mut impl Scope) -> Value {
    match e {
        Expr::Num(v) => Value::Num(*v),
        Expr::Bool(b) => Value::Bool(*b),
        Expr::Str(s) => Value::Str(s.clone()),
        Expr::Null | Expr::Threshold(_) => Value::Null,
        Expr::Var(v) => scope.var(v).unwrap_or(Value::Null),
        Expr::Index { map, key } => {
            let k = eval(key, scope).key();
            match scope.var(map) {
                Some(Value::Map(entries)) => {
                    entries.into_iter().find(|(name, _)| *name == k).map(|(_, v)| v).unwrap_or(Value::Null)
                }
                _ => Value::Null,
            }
        }
        Expr::GetNumber(c) => match scope.field(c) {
            Some(DataValue::Number(v)) => Value::Num(*v),
            _ => Value::Null,
        },
        Expr::GetString(c) => match scope.field(c) {
            Some(DataValue::Text(s)) => Value::Str(s.clone()),
            _ => Value::Null,
        },
        Expr::GetBoolean(c) => match scope.field(c) {
            Some(DataValue::Bool(b)) => Value::Bool(*b),
            _ => Value::Null,
        },
        Expr::CreateUuid => Value::Str(scope.fresh_uuid()),
        Expr::Compare(a, op, b) => {
            let a = eval(a, scope);
            let b = eval(b, scope);
            Value::Bool(compare(&a, *op, &b))
        }
        Expr::Concat(parts) => {
            let mut out = String::new();
            for p in parts {
                match eval(p, scope) {
                    Value::Null => {}
                    v => out.push_str(&format!("{v}")),
                }
            }
            Value::Str(out)
        }
        Expr::Map(entries) => Value::Map(entries.iter().map(|(k, v)| (k.clone(), eval(v, scope))).collect()),
    }
}

/// A scope holding one event's values and nothing else.
pub struct EventScope<'a> {
    pub concept: &'a str,
    pub value: &'a DataValue,
}

impl Scope for EventScope<'_> {
    fn var(&self, _: &str) -> Option<Value> {
        None
    }

    fn field(&self, concept: &str) -> Option<&DataValue> {
        (concept == self.concept).then_some(self.value)
    }

    fn fresh_uuid(&mut self) -> String {
        String::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::parse_expr;

    fn on(concept: &str, value: DataValue, src: &str) -> Value {
        let e = parse_expr(src).unwrap();
        eval(&e, &mut EventScope { concept, value: &value })
    }

    #[test]
    fn comparisons_against_event_fields() {
        assert_eq!(on("4986", DataValue::Number(160.0), "event.getNumber(4986)>=150"), Value::Bool(true));
        assert_eq!(on("4986", DataValue::Number(150.0), "event.getNumber(4986)>=150"), Value::Bool(true));
        assert_eq!(on("4986", DataValue::Number(149.0), "event.getNumber(4986)>=150"), Value::Bool(false));
        assert_eq!(on("4985", DataValue::Number(160.0), "event.getNumber(4986)>=150"), Value::Bool(false));
        assert_eq!(on("5021", DataValue::Text("++".into()), "event.getString(5021) == \"++\""), Value::Bool(true));
    }

    #[test]
    fn type_mismatch_is_false() {
        assert_eq!(on("5021", DataValue::Text("++".into()), "event.getNumber(5021) >= 1"), Value::Bool(false));
        assert_eq!(on("x", DataValue::Bool(true), "event.getBoolean(\"x\") == 1"), Value::Bool(false));
    }
}
