use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::ast::*;
use super::lexer::{tokenize, tokenize_at, Pos, Tok};
use super::{
    DeclarativeSection, ParseError, ParseErrorKind, PersonalEvent, ProjectionEnvelope, QodItem, QodLevel, Reminder,
    UnitProjection,
};
use crate::time::{parse_time_of_day, Span, Weekdays};

const MAX_DEPTH: u32 = 64;

pub fn parse_unit(source: &str) -> Result<UnitProjection, ParseError> {
    let mut p = Parser::new(source)?;
    if p.at_ident("callback") {
        return Err(p.pos().error(ParseErrorKind::CallbackOutsideUnit));
    }
    let unit = p.unit(source)?;
    p.expect(Tok::Eof, "end of input")?;
    Ok(unit)
}

pub fn parse_envelope(text: &str) -> Result<ProjectionEnvelope, ParseError> {
    let mut p = Parser::new(text)?;
    let head = p.pos();
    if p.at_ident("callback") {
        return Err(head.error(ParseErrorKind::CallbackOutsideUnit));
    }
    p.keyword("projection")?;
    p.expect(Tok::LParen, "`(`")?;
    let gl_id = p.string()?.0;
    p.expect(Tok::Comma, "`,`")?;
    p.keyword("id")?;
    p.expect(Tok::Assign, "`=`")?;
    let projection_id = p.string()?.0;
    p.expect(Tok::RParen, "`)`")?;
    p.expect(Tok::Semi, "`;`")?;

    let stop_list = p.id_list_call("stop")?;
    let start_list = p.id_list_call("start")?;

    let mut gl_name = String::new();
    let mut current_context = String::new();
    if p.at_ident("guideline") {
        p.next();
        p.expect(Tok::LParen, "`(`")?;
        gl_name = p.string()?.0;
        p.expect(Tok::Comma, "`,`")?;
        p.keyword("context")?;
        p.expect(Tok::Assign, "`=`")?;
        current_context = p.string()?.0;
        p.expect(Tok::RParen, "`)`")?;
        p.expect(Tok::Semi, "`;`")?;
    }

    let declarative = if p.at_ident("declarative") { Some(p.declarative()?) } else { None };

    let mut units = Vec::new();
    loop {
        if p.at_ident("unitProjection") {
            units.push(p.unit(text)?);
        } else if p.at_ident("callback") {
            return Err(p.pos().error(ParseErrorKind::CallbackOutsideUnit));
        } else if p.peek() == &Tok::Eof {
            break;
        } else {
            return Err(p.unexpected("`unitProjection`"));
        }
    }

    let mut env = ProjectionEnvelope {
        gl_id,
        gl_name,
        current_context,
        projection_id,
        stop_list,
        start_list,
        units,
        declarative,
    };
    env.check().map_err(|m| head.error(ParseErrorKind::Invalid(m)))?;
    let order = env.start_list.clone();
    env.units.sort_by_key(|u| order.iter().position(|id| id == &u.id).unwrap_or(usize::MAX));
    Ok(env)
}

/// Parse a standalone expression as written inside `annotateTemporal`.
pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(text)?;
    p.embedded = true;
    let e = p.expr()?;
    p.expect(Tok::Eof, "end of expression")?;
    Ok(e)
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    i: usize,
    depth: u32,
    scope: Vec<String>,
    /// Expressions embedded in strings may only read the event under test.
    embedded: bool,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => alloc::format!("`{s}`"),
        Tok::Str(_) => "string".into(),
        Tok::Num(_, s) => alloc::format!("number {s}"),
        Tok::Threshold(s) => alloc::format!("threshold <${s}$>"),
        Tok::Cmp(s) => alloc::format!("`{s}`"),
        Tok::Eof => "end of input".into(),
        other => alloc::format!("{other:?}"),
    }
}

impl Parser {
    fn new(text: &str) -> Result<Self, ParseError> {
        Ok(Parser { toks: tokenize(text)?, i: 0, depth: 0, scope: Vec::new(), embedded: false })
    }

    fn sub(text: &str, at: Pos) -> Result<Self, ParseError> {
        Ok(Parser { toks: tokenize_at(text, at)?, i: 0, depth: 0, scope: Vec::new(), embedded: true })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.i].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.i + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.i].1
    }

    fn next(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.i].clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn unexpected(&self, wanted: &str) -> ParseError {
        self.pos().syntax(alloc::format!("expected {wanted}, found {}", describe(self.peek())))
    }

    fn expect(&mut self, t: Tok, wanted: &str) -> Result<Pos, ParseError> {
        if self.peek() == &t {
            Ok(self.next().1)
        } else {
            Err(self.unexpected(wanted))
        }
    }

    fn at_ident(&self, name: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == name)
    }

    fn keyword(&mut self, name: &str) -> Result<Pos, ParseError> {
        if self.at_ident(name) {
            Ok(self.next().1)
        } else {
            Err(self.unexpected(&alloc::format!("`{name}`")))
        }
    }

    fn ident(&mut self) -> Result<(String, Pos), ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let p = self.next().1;
                Ok((s, p))
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn string(&mut self) -> Result<(String, Pos), ParseError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                let p = self.next().1;
                Ok((s, p))
            }
            _ => Err(self.unexpected("string")),
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.pos().syntax("nesting too deep"));
        }
        Ok(())
    }

    fn in_scope(&self, name: &str) -> bool {
        self.scope.iter().any(|s| s == name)
    }

    fn id_list_call(&mut self, name: &str) -> Result<Vec<String>, ParseError> {
        self.keyword(name)?;
        self.expect(Tok::LParen, "`(`")?;
        let (list, _) = self.string()?;
        self.expect(Tok::RParen, "`)`")?;
        self.expect(Tok::Semi, "`;`")?;
        Ok(split_ids(&list))
    }

    fn unit(&mut self, text: &str) -> Result<UnitProjection, ParseError> {
        let start = self.keyword("unitProjection")?;
        self.expect(Tok::LParen, "`(`")?;
        let id = self.string()?.0;
        self.expect(Tok::Comma, "`,`")?;
        let name = self.string()?.0;
        self.expect(Tok::RParen, "`)`")?;
        self.scope.clear();
        let body = self.block()?;
        let end = self.toks[self.i.saturating_sub(1)].1.off + 1;
        let source = text.get(start.off..end).unwrap_or_default().to_string();
        Ok(UnitProjection { id, name, source, body })
    }

    fn block(&mut self) -> Result<Vec<Statement>, ParseError> {
        self.enter()?;
        self.expect(Tok::LBrace, "`{`")?;
        let mark = self.scope.len();
        let mut out = Vec::new();
        while self.peek() != &Tok::RBrace {
            out.push(self.statement()?);
        }
        self.next();
        self.scope.truncate(mark);
        self.depth -= 1;
        Ok(out)
    }

    fn statement(&mut self) -> Result<Statement, ParseError> {
        let (name, at) = match self.peek().clone() {
            Tok::Ident(s) => (s, self.pos()),
            _ => return Err(self.unexpected("statement")),
        };
        self.next();
        let stmt = match name.as_str() {
            "while" => {
                self.expect(Tok::LParen, "`(`")?;
                self.keyword("true")?;
                self.expect(Tok::RParen, "`)`")?;
                return Ok(Statement::WhileTrue { body: self.block()? });
            }
            "waitPeriodic" => self.wait_periodic()?,
            "event" => {
                if self.peek() == &Tok::Assign {
                    self.next();
                    self.keyword("createEvent")?;
                    self.expect(Tok::LParen, "`(`")?;
                    self.expect(Tok::RParen, "`)`")?;
                    self.scope.push("event".into());
                    Statement::CreateEvent
                } else {
                    if !self.in_scope("event") {
                        return Err(at.error(ParseErrorKind::UnknownIdentifier("event".into())));
                    }
                    self.expect(Tok::Dot, "`.`")?;
                    let (method, mpos) = self.ident()?;
                    self.expect(Tok::LParen, "`(`")?;
                    match method.as_str() {
                        "insert" => {
                            self.expect(Tok::RParen, "`)`")?;
                            Statement::InsertEvent
                        }
                        "patientDataEntry" => {
                            let concept_id = self.string()?.0;
                            self.expect(Tok::Comma, "`,`")?;
                            let label = self.expr()?;
                            self.expect(Tok::Comma, "`,`")?;
                            let (vt, vpos) = self.string()?;
                            let value_type = ValueType::parse(&vt).ok_or_else(|| {
                                vpos.error(ParseErrorKind::Invalid(alloc::format!("unknown value type {vt:?}")))
                            })?;
                            self.expect(Tok::Comma, "`,`")?;
                            let validity = self.span_string()?;
                            self.expect(Tok::RParen, "`)`")?;
                            Statement::PatientDataEntry { concept_id, label, value_type, validity }
                        }
                        _ => return Err(mpos.error(ParseErrorKind::UnknownIdentifier(method))),
                    }
                }
            }
            "annotateTemporal" => {
                self.expect(Tok::LParen, "`(`")?;
                let (op, opos) = self.string()?;
                let op = match op.as_str() {
                    "or" => AbstractionOp::Or,
                    "and" => AbstractionOp::And,
                    _ => return Err(opos.error(ParseErrorKind::Invalid(alloc::format!("unknown operator {op:?}")))),
                };
                self.expect(Tok::Comma, "`,`")?;
                self.keyword("new")?;
                self.keyword("String")?;
                self.expect(Tok::LBracket, "`[`")?;
                self.expect(Tok::RBracket, "`]`")?;
                self.expect(Tok::LBrace, "`{`")?;
                let mut exprs = Vec::new();
                while self.peek() != &Tok::RBrace {
                    let (src, spos) = self.string()?;
                    exprs.push(embedded_expr(&src, spos)?);
                    if self.peek() == &Tok::Comma {
                        self.next();
                    } else {
                        break;
                    }
                }
                self.expect(Tok::RBrace, "`}`")?;
                if exprs.is_empty() {
                    return Err(opos.error(ParseErrorKind::Invalid("abstraction needs at least one expression".into())));
                }
                self.expect(Tok::Comma, "`,`")?;
                let name = self.string()?.0;
                self.expect(Tok::Comma, "`,`")?;
                let (gran, gpos) = self.string()?;
                if gran != "date" {
                    return Err(gpos.error(ParseErrorKind::Invalid(alloc::format!("unsupported granularity {gran:?}"))));
                }
                self.expect(Tok::RParen, "`)`")?;
                Statement::AnnotateTemporal { op, exprs, name }
            }
            "waitTemporalQuery" => {
                self.expect(Tok::LParen, "`(`")?;
                let query = self.temporal_query_args()?;
                self.expect(Tok::RParen, "`)`")?;
                Statement::WaitTemporalQuery { query }
            }
            "if" => {
                self.expect(Tok::LParen, "`(`")?;
                self.keyword("temporalQuery")?;
                self.expect(Tok::LParen, "`(`")?;
                let query = self.temporal_query_args()?;
                self.expect(Tok::RParen, "`)`")?;
                self.expect(Tok::RParen, "`)`")?;
                let then_body = self.block()?;
                let else_body = if self.at_ident("else") {
                    self.next();
                    self.block()?
                } else {
                    Vec::new()
                };
                return Ok(Statement::IfTemporalQuery { query, then_body, else_body });
            }
            "callback" => {
                self.expect(Tok::LParen, "`(`")?;
                let callback_id = self.string()?.0;
                self.expect(Tok::Comma, "`,`")?;
                let message = self.string()?.0;
                self.expect(Tok::RParen, "`)`")?;
                Statement::Callback { callback_id, message }
            }
            "patientNotification" => {
                self.expect(Tok::LParen, "`(`")?;
                let message_id = self.string()?.0;
                self.expect(Tok::Comma, "`,`")?;
                let text = self.string()?.0;
                self.expect(Tok::RParen, "`)`")?;
                Statement::PatientNotification { message_id, text }
            }
            "setProjectionGlobal" => {
                self.expect(Tok::LParen, "`(`")?;
                let name = self.string()?.0;
                self.expect(Tok::Comma, "`,`")?;
                let expr = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Statement::SetProjectionGlobal { name, expr }
            }
            "var" => {
                let (name, _) = self.ident()?;
                self.expect(Tok::Assign, "`=`")?;
                let init = self.expr()?;
                self.scope.push(name.clone());
                Statement::VarDecl { name, init }
            }
            "for" => {
                self.expect(Tok::LParen, "`(`")?;
                self.keyword("var")?;
                let (var, _) = self.ident()?;
                self.keyword("in")?;
                let (map, mpos) = self.ident()?;
                if !self.in_scope(&map) {
                    return Err(mpos.error(ParseErrorKind::UnknownIdentifier(map)));
                }
                self.expect(Tok::RParen, "`)`")?;
                self.scope.push(var.clone());
                let body = self.block();
                self.scope.pop();
                return Ok(Statement::ForIn { var, map, body: body? });
            }
            _ => return Err(at.error(ParseErrorKind::UnknownIdentifier(name))),
        };
        self.expect(Tok::Semi, "`;`")?;
        Ok(stmt)
    }

    fn wait_periodic(&mut self) -> Result<Statement, ParseError> {
        self.expect(Tok::LParen, "`(`")?;
        let (days, dpos) = self.string()?;
        let days = Weekdays::parse(&days).map_err(|e| dpos.error(ParseErrorKind::Invalid(e.to_string())))?;
        self.expect(Tok::Comma, "`,`")?;
        let time = match self.peek().clone() {
            Tok::Str(s) => {
                let p = self.next().1;
                Operand::Lit(parse_time_of_day(&s).map_err(|e| p.error(ParseErrorKind::Invalid(e.to_string())))?)
            }
            Tok::Ident(_) => Operand::Var(self.var_ref()?),
            _ => return Err(self.unexpected("time of day")),
        };
        self.expect(Tok::Comma, "`,`")?;
        let reminder = match self.peek().clone() {
            Tok::Ident(s) if s == "null" => {
                self.next();
                None
            }
            Tok::Str(_) => Some(Operand::Lit(self.span_string()?)),
            Tok::Ident(_) => Some(Operand::Var(self.var_ref()?)),
            _ => return Err(self.unexpected("reminder lead")),
        };
        let mut start_offset_days = None;
        let mut duration_days = None;
        if self.peek() == &Tok::Comma {
            self.next();
            start_offset_days = self.opt_days()?;
            if self.peek() == &Tok::Comma {
                self.next();
                duration_days = self.opt_days()?;
            }
        }
        self.expect(Tok::RParen, "`)`")?;
        Ok(Statement::WaitPeriodic { days, time, reminder, start_offset_days, duration_days })
    }

    fn opt_days(&mut self) -> Result<Option<i64>, ParseError> {
        let (tok, p) = self.next();
        let bad = |p: Pos| p.error(ParseErrorKind::Invalid("expected a whole number of days".into()));
        match tok {
            Tok::Ident(s) if s == "null" => Ok(None),
            Tok::Str(s) => s.trim().parse::<i64>().map(Some).map_err(|_| bad(p)),
            Tok::Num(_, raw) => raw.parse::<i64>().map(Some).map_err(|_| bad(p)),
            _ => Err(bad(p)),
        }
    }

    fn var_ref(&mut self) -> Result<String, ParseError> {
        let (name, p) = self.ident()?;
        if self.embedded || !self.in_scope(&name) {
            return Err(p.error(ParseErrorKind::UnknownIdentifier(name)));
        }
        Ok(name)
    }

    fn span_string(&mut self) -> Result<Span, ParseError> {
        let (s, p) = self.string()?;
        Span::parse(&s).map_err(|e| p.error(ParseErrorKind::Invalid(e.to_string())))
    }

    fn temporal_query_args(&mut self) -> Result<TemporalQuery, ParseError> {
        let (cond, cpos) = self.string()?;
        let cond = agg_condition(&cond, cpos)?;
        self.expect(Tok::Comma, "`,`")?;
        let target = self.string()?.0;
        self.expect(Tok::Comma, "`,`")?;
        let window = self.span_string()?;
        if window.minutes < crate::time::MINUTES_PER_DAY || window.minutes % crate::time::MINUTES_PER_DAY != 0 {
            return Err(cpos.error(ParseErrorKind::Invalid("query window must be a whole number of days".into())));
        }
        Ok(TemporalQuery { cond, target, window })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let lhs = self.concat()?;
        let out = if let Tok::Cmp(sym) = *self.peek() {
            self.next();
            let rhs = self.concat()?;
            let op = CmpOp::from_symbol(sym).expect("lexer only yields known operators");
            Expr::Compare(Box::new(lhs), op, Box::new(rhs))
        } else {
            lhs
        };
        self.depth -= 1;
        Ok(out)
    }

    fn concat(&mut self) -> Result<Expr, ParseError> {
        let first = self.primary()?;
        if self.peek() != &Tok::Plus {
            return Ok(first);
        }
        let mut parts = alloc::vec![first];
        while self.peek() == &Tok::Plus {
            self.next();
            parts.push(self.primary()?);
        }
        Ok(Expr::Concat(parts))
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let (tok, at) = self.next();
        Ok(match tok {
            Tok::Num(v, _) => Expr::Num(v),
            Tok::Str(s) => Expr::Str(s),
            Tok::Threshold(id) => Expr::Threshold(id),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                e
            }
            Tok::LBrace => {
                let mut entries = Vec::new();
                while self.peek() != &Tok::RBrace {
                    let key = self.string()?.0;
                    self.expect(Tok::Colon, "`:`")?;
                    let value = self.expr()?;
                    entries.push((key, value));
                    if self.peek() == &Tok::Comma {
                        self.next();
                    } else {
                        break;
                    }
                }
                self.expect(Tok::RBrace, "`}`")?;
                Expr::Map(entries)
            }
            Tok::Ident(name) => match name.as_str() {
                "true" => Expr::Bool(true),
                "false" => Expr::Bool(false),
                "null" => Expr::Null,
                "createUUID" => {
                    self.expect(Tok::LParen, "`(`")?;
                    self.expect(Tok::RParen, "`)`")?;
                    Expr::CreateUuid
                }
                "event" if self.peek() == &Tok::Dot => {
                    self.next();
                    let (method, mpos) = self.ident()?;
                    self.expect(Tok::LParen, "`(`")?;
                    let concept = match self.next() {
                        (Tok::Num(_, raw), _) => raw,
                        (Tok::Str(s), _) => s,
                        (_, p) => return Err(p.syntax("expected concept id")),
                    };
                    self.expect(Tok::RParen, "`)`")?;
                    match method.as_str() {
                        "getNumber" => Expr::GetNumber(concept),
                        "getString" => Expr::GetString(concept),
                        "getBoolean" => Expr::GetBoolean(concept),
                        _ => return Err(mpos.error(ParseErrorKind::UnknownIdentifier(method))),
                    }
                }
                _ => {
                    if self.embedded || !self.in_scope(&name) {
                        return Err(at.error(ParseErrorKind::UnknownIdentifier(name)));
                    }
                    if self.peek() == &Tok::LBracket && !matches!(self.peek2(), Tok::RBracket) {
                        self.next();
                        let key = self.expr()?;
                        self.expect(Tok::RBracket, "`]`")?;
                        Expr::Index { map: name, key: Box::new(key) }
                    } else {
                        Expr::Var(name)
                    }
                }
            },
            other => return Err(at.syntax(alloc::format!("expected expression, found {}", describe(&other)))),
        })
    }

    fn declarative(&mut self) -> Result<DeclarativeSection, ParseError> {
        self.keyword("declarative")?;
        self.expect(Tok::LBrace, "`{`")?;
        let mut section = DeclarativeSection::default();
        loop {
            if self.at_ident("quality") {
                self.next();
                self.expect(Tok::LParen, "`(`")?;
                let quality_id = self.string()?.0;
                self.expect(Tok::Comma, "`,`")?;
                let (lvl, lpos) = self.string()?;
                let level = QodLevel::parse(&lvl).ok_or_else(|| {
                    lpos.error(ParseErrorKind::Invalid(alloc::format!("unknown quality level {lvl:?}")))
                })?;
                self.expect(Tok::Comma, "`,`")?;
                let relate_to = split_ids(&self.string()?.0);
                let range = if self.peek() == &Tok::Comma {
                    self.next();
                    let lo = self.number()?;
                    self.expect(Tok::Comma, "`,`")?;
                    let hi = self.number()?;
                    Some((lo, hi))
                } else {
                    None
                };
                self.expect(Tok::RParen, "`)`")?;
                self.expect(Tok::Semi, "`;`")?;
                section.qod_items.push(QodItem { quality_id, level, relate_to, range });
            } else if self.at_ident("personalEvent") {
                self.next();
                self.expect(Tok::LParen, "`(`")?;
                let concept_id = self.string()?.0;
                self.expect(Tok::Comma, "`,`")?;
                let event_name = self.string()?.0;
                let context = if self.peek() == &Tok::Comma {
                    self.next();
                    self.keyword("context")?;
                    self.expect(Tok::Assign, "`=`")?;
                    Some(self.string()?.0)
                } else {
                    None
                };
                self.expect(Tok::RParen, "`)`")?;
                self.expect(Tok::LBrace, "`{`")?;
                let mut reminders = Vec::new();
                while self.at_ident("reminder") {
                    self.next();
                    self.expect(Tok::LParen, "`(`")?;
                    let (v, vpos) = self.string()?;
                    let value =
                        parse_time_of_day(&v).map_err(|e| vpos.error(ParseErrorKind::Invalid(e.to_string())))?;
                    self.expect(Tok::Comma, "`,`")?;
                    let lead = self.number()?;
                    if lead != (lead as i64) as f64 {
                        return Err(vpos.error(ParseErrorKind::Invalid("reminder lead must be whole minutes".into())));
                    }
                    self.expect(Tok::Comma, "`,`")?;
                    let target_concept_id = self.string()?.0;
                    self.expect(Tok::RParen, "`)`")?;
                    self.expect(Tok::Semi, "`;`")?;
                    reminders.push(Reminder { value, remind_lead_minutes: lead as i64, target_concept_id });
                }
                self.expect(Tok::RBrace, "`}`")?;
                section.personal_events.push(PersonalEvent { concept_id, event_name, context, reminders });
            } else {
                break;
            }
        }
        self.expect(Tok::RBrace, "`}`")?;
        Ok(section)
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        match self.peek().clone() {
            Tok::Num(v, _) => {
                self.next();
                Ok(v)
            }
            _ => Err(self.unexpected("number")),
        }
    }
}

fn split_ids(list: &str) -> Vec<String> {
    list.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn embedded_expr(src: &str, at: Pos) -> Result<Expr, ParseError> {
    let mut p = Parser::sub(src, at)?;
    let e = p.expr()?;
    p.expect(Tok::Eof, "end of expression")?;
    Ok(e)
}

fn agg_condition(src: &str, at: Pos) -> Result<AggCondition, ParseError> {
    let mut p = Parser::sub(src, at)?;
    let (agg, apos) = p.ident()?;
    let agg = match agg.as_str() {
        "count" => Aggregator::Count,
        "sum" => Aggregator::Sum,
        _ => return Err(apos.error(ParseErrorKind::UnknownIdentifier(agg))),
    };
    let cmp = match p.next() {
        (Tok::Cmp(sym), _) => CmpOp::from_symbol(sym).expect("known operator"),
        (_, pos) => return Err(pos.syntax("expected comparison operator")),
    };
    let threshold = match p.next() {
        (Tok::Num(v, _), _) => Threshold::Value(v),
        (Tok::Threshold(id), _) => Threshold::Var(id),
        (_, pos) => return Err(pos.syntax("expected threshold")),
    };
    p.expect(Tok::Eof, "end of condition")?;
    Ok(AggCondition { agg, cmp, threshold })
}
