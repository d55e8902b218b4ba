use alloc::format;
use alloc::string::String;

use super::ast::*;
use super::{DeclarativeSection, ProjectionEnvelope, UnitProjection};
use crate::time::format_time_of_day;

const INDENT: &str = "    ";

pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn concept_arg(id: &str) -> String {
    if !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()) {
        String::from(id)
    } else {
        quote(id)
    }
}

pub fn print_expr(e: &Expr) -> String {
    match e {
        Expr::Num(v) => format!("{v}"),
        Expr::Bool(b) => format!("{b}"),
        Expr::Str(s) => quote(s),
        Expr::Null => "null".into(),
        Expr::Var(v) => v.clone(),
        Expr::Index { map, key } => format!("{map}[{}]", print_expr(key)),
        Expr::GetNumber(c) => format!("event.getNumber({})", concept_arg(c)),
        Expr::GetString(c) => format!("event.getString({})", concept_arg(c)),
        Expr::GetBoolean(c) => format!("event.getBoolean({})", concept_arg(c)),
        Expr::CreateUuid => "createUUID()".into(),
        Expr::Threshold(id) => format!("<${id}$>"),
        Expr::Compare(a, op, b) => {
            format!("{} {} {}", operand(a, false), op.symbol(), operand(b, false))
        }
        Expr::Concat(parts) => {
            let mut out = String::new();
            for (i, p) in parts.iter().enumerate() {
                if i > 0 {
                    out.push_str(" + ");
                }
                out.push_str(&operand(p, true));
            }
            out
        }
        Expr::Map(entries) => {
            let mut out = String::from("{");
            for (i, (k, v)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&format!("{}: {}", quote(k), print_expr(v)));
            }
            out.push('}');
            out
        }
    }
}

fn operand(e: &Expr, in_concat: bool) -> String {
    match e {
        Expr::Compare(..) => format!("({})", print_expr(e)),
        Expr::Concat(_) if in_concat => format!("({})", print_expr(e)),
        _ => print_expr(e),
    }
}

fn print_condition(c: &AggCondition) -> String {
    let thr = match &c.threshold {
        Threshold::Value(v) => format!("{v}"),
        Threshold::Var(id) => format!("<${id}$>"),
    };
    format!("{} {} {}", c.agg.as_str(), c.cmp.symbol(), thr)
}

fn query_args(q: &TemporalQuery) -> String {
    format!("{}, {}, {}", quote(&print_condition(&q.cond)), quote(&q.target), quote(&format!("{}", q.window)))
}

fn push_line(out: &mut String, depth: usize, text: &str) {
    for _ in 0..depth {
        out.push_str(INDENT);
    }
    out.push_str(text);
    out.push('\n');
}

fn print_block(out: &mut String, depth: usize, body: &[Statement]) {
    for s in body {
        print_statement(out, depth, s);
    }
}

fn print_statement(out: &mut String, depth: usize, s: &Statement) {
    match s {
        Statement::WhileTrue { body } => {
            push_line(out, depth, "while (true) {");
            print_block(out, depth + 1, body);
            push_line(out, depth, "}");
        }
        Statement::WaitPeriodic { days, time, reminder, start_offset_days, duration_days } => {
            let time = match time {
                Operand::Lit(t) => quote(&format_time_of_day(*t)),
                Operand::Var(v) => v.clone(),
            };
            let reminder = match reminder {
                None => "null".into(),
                Some(Operand::Lit(span)) => quote(&format!("{span}")),
                Some(Operand::Var(v)) => v.clone(),
            };
            let days_arg = |d: &Option<i64>| match d {
                Some(n) => quote(&format!("{n}")),
                None => "null".into(),
            };
            let mut line = format!("waitPeriodic({}, {time}, {reminder}", quote(&format!("{days}")));
            if start_offset_days.is_some() || duration_days.is_some() {
                line.push_str(&format!(", {}", days_arg(start_offset_days)));
            }
            if duration_days.is_some() {
                line.push_str(&format!(", {}", days_arg(duration_days)));
            }
            line.push_str(");");
            push_line(out, depth, &line);
        }
        Statement::CreateEvent => push_line(out, depth, "event = createEvent();"),
        Statement::PatientDataEntry { concept_id, label, value_type, validity } => push_line(
            out,
            depth,
            &format!(
                "event.patientDataEntry({}, {}, {}, {});",
                quote(concept_id),
                print_expr(label),
                quote(value_type.as_str()),
                quote(&format!("{validity}"))
            ),
        ),
        Statement::InsertEvent => push_line(out, depth, "event.insert();"),
        Statement::AnnotateTemporal { op, exprs, name } => {
            push_line(out, depth, &format!("annotateTemporal({}, new String[] {{", quote(op.as_str())));
            for (i, e) in exprs.iter().enumerate() {
                let sep = if i + 1 < exprs.len() { "," } else { "" };
                push_line(out, depth + 1, &format!("{}{sep}", quote(&print_expr(e))));
            }
            push_line(out, depth, &format!("}}, {}, \"date\");", quote(name)));
        }
        Statement::WaitTemporalQuery { query } => {
            push_line(out, depth, &format!("waitTemporalQuery({});", query_args(query)))
        }
        Statement::IfTemporalQuery { query, then_body, else_body } => {
            push_line(out, depth, &format!("if (temporalQuery({})) {{", query_args(query)));
            print_block(out, depth + 1, then_body);
            if else_body.is_empty() {
                push_line(out, depth, "}");
            } else {
                push_line(out, depth, "} else {");
                print_block(out, depth + 1, else_body);
                push_line(out, depth, "}");
            }
        }
        Statement::Callback { callback_id, message } => {
            push_line(out, depth, &format!("callback({}, {});", quote(callback_id), quote(message)))
        }
        Statement::PatientNotification { message_id, text } => {
            push_line(out, depth, &format!("patientNotification({}, {});", quote(message_id), quote(text)))
        }
        Statement::SetProjectionGlobal { name, expr } => {
            push_line(out, depth, &format!("setProjectionGlobal({}, {});", quote(name), print_expr(expr)))
        }
        Statement::VarDecl { name, init } => push_line(out, depth, &format!("var {name} = {};", print_expr(init))),
        Statement::ForIn { var, map, body } => {
            push_line(out, depth, &format!("for (var {var} in {map}) {{"));
            print_block(out, depth + 1, body);
            push_line(out, depth, "}");
        }
    }
}

pub fn print_unit(u: &UnitProjection) -> String {
    let mut out = format!("unitProjection({}, {}) {{\n", quote(&u.id), quote(&u.name));
    print_block(&mut out, 1, &u.body);
    out.push_str("}\n");
    out
}

fn print_declarative(out: &mut String, d: &DeclarativeSection) {
    out.push_str("declarative {\n");
    for q in &d.qod_items {
        let mut line =
            format!("quality({}, {}, {}", quote(&q.quality_id), quote(q.level.as_str()), quote(&q.relate_to.join(",")));
        if let Some((lo, hi)) = q.range {
            line.push_str(&format!(", {lo}, {hi}"));
        }
        line.push_str(");");
        push_line(out, 1, &line);
    }
    for p in &d.personal_events {
        let mut line = format!("personalEvent({}, {}", quote(&p.concept_id), quote(&p.event_name));
        if let Some(ctx) = &p.context {
            line.push_str(&format!(", context={}", quote(ctx)));
        }
        line.push_str(") {");
        push_line(out, 1, &line);
        for r in &p.reminders {
            push_line(
                out,
                2,
                &format!(
                    "reminder({}, {}, {});",
                    quote(&format_time_of_day(r.value)),
                    r.remind_lead_minutes,
                    quote(&r.target_concept_id)
                ),
            );
        }
        push_line(out, 1, "}");
    }
    out.push_str("}\n");
}

/// Canonical text: header lines, optional declarative block, then the
/// unit bodies in start-list order.
pub fn print_envelope(env: &ProjectionEnvelope) -> String {
    let mut out = format!("projection({}, id={});\n", quote(&env.gl_id), quote(&env.projection_id));
    out.push_str(&format!("stop({});\n", quote(&env.stop_list.join(","))));
    out.push_str(&format!("start({});\n", quote(&env.start_list.join(","))));
    if !env.gl_name.is_empty() || !env.current_context.is_empty() {
        out.push_str(&format!("guideline({}, context={});\n", quote(&env.gl_name), quote(&env.current_context)));
    }
    if let Some(d) = &env.declarative {
        out.push('\n');
        print_declarative(&mut out, d);
    }
    for id in &env.start_list {
        if let Some(u) = env.unit(id) {
            out.push('\n');
            out.push_str(&print_unit(u));
        }
    }
    out
}
