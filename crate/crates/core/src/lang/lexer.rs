use alloc::string::String;
use alloc::vec::Vec;

use super::{ParseError, ParseErrorKind};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Ident(String),
    Str(String),
    /// Parsed value plus the text as written; concept ids keep the text.
    Num(f64, String),
    /// `<$ID$>`
    Threshold(String),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Semi,
    Comma,
    Dot,
    Colon,
    Assign,
    Plus,
    Cmp(&'static str),
    Eof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Pos {
    pub line: u32,
    pub col: u32,
    /// Byte offset into the tokenized text.
    pub off: usize,
}

impl Pos {
    pub fn error(self, kind: ParseErrorKind) -> ParseError {
        ParseError { line: self.line, col: self.col, kind }
    }

    pub fn syntax(self, msg: impl Into<String>) -> ParseError {
        self.error(ParseErrorKind::Syntax(msg.into()))
    }
}

struct Cursor<'a> {
    chars: core::iter::Peekable<core::str::Chars<'a>>,
    pos: Pos,
}

impl Cursor<'_> {
    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        self.pos.off += c.len_utf8();
        if c == '\n' {
            self.pos.line += 1;
            self.pos.col = 1;
        } else {
            self.pos.col += 1;
        }
        Some(c)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.bump();
            true
        } else {
            false
        }
    }
}

pub(crate) fn tokenize(src: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    tokenize_at(src, Pos { line: 1, col: 1, off: 0 })
}

/// Tokenize text that itself sits inside a string literal starting at `origin`.
pub(crate) fn tokenize_at(src: &str, origin: Pos) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let mut cur = Cursor { chars: src.chars().peekable(), pos: origin };
    let mut out = Vec::new();
    loop {
        // whitespace and comments
        loop {
            match cur.peek() {
                Some(c) if c.is_whitespace() => {
                    cur.bump();
                }
                Some('/') => {
                    let mut look = cur.chars.clone();
                    look.next();
                    match look.peek() {
                        Some('/') => {
                            while let Some(c) = cur.bump() {
                                if c == '\n' {
                                    break;
                                }
                            }
                        }
                        Some('*') => {
                            let start = cur.pos;
                            cur.bump();
                            cur.bump();
                            let mut closed = false;
                            while let Some(c) = cur.bump() {
                                if c == '*' && cur.eat('/') {
                                    closed = true;
                                    break;
                                }
                            }
                            if !closed {
                                return Err(start.syntax("unterminated comment"));
                            }
                        }
                        _ => break,
                    }
                }
                _ => break,
            }
        }
        let pos = cur.pos;
        let Some(c) = cur.bump() else {
            out.push((Tok::Eof, pos));
            return Ok(out);
        };
        let tok = match c {
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '{' => Tok::LBrace,
            '}' => Tok::RBrace,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ';' => Tok::Semi,
            ',' => Tok::Comma,
            '.' => Tok::Dot,
            ':' => Tok::Colon,
            '+' => Tok::Plus,
            '=' => {
                if cur.eat('=') {
                    Tok::Cmp("==")
                } else {
                    Tok::Assign
                }
            }
            '>' => {
                if cur.eat('=') {
                    Tok::Cmp(">=")
                } else {
                    Tok::Cmp(">")
                }
            }
            '<' => {
                if cur.eat('$') {
                    let mut id = String::new();
                    loop {
                        match cur.bump() {
                            Some('$') if cur.eat('>') => break,
                            Some(c) if c != '\n' && c != '"' => id.push(c),
                            _ => return Err(pos.syntax("unterminated threshold variable")),
                        }
                    }
                    if id.is_empty() {
                        return Err(pos.syntax("empty threshold variable"));
                    }
                    Tok::Threshold(id)
                } else if cur.eat('=') {
                    Tok::Cmp("<=")
                } else {
                    Tok::Cmp("<")
                }
            }
            '"' => {
                let mut s = String::new();
                loop {
                    match cur.bump() {
                        None => return Err(pos.syntax("unterminated string")),
                        Some('"') => break,
                        Some('\\') => match cur.bump() {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            _ => return Err(pos.syntax("bad escape in string")),
                        },
                        Some(c) => s.push(c),
                    }
                }
                Tok::Str(s)
            }
            c if c.is_ascii_digit() || (c == '-' && cur.peek().is_some_and(|d| d.is_ascii_digit())) => {
                let mut text = String::new();
                text.push(c);
                while let Some(d) = cur.peek() {
                    if d.is_ascii_digit() || d == '.' {
                        text.push(d);
                        cur.bump();
                    } else {
                        break;
                    }
                }
                let value: f64 = text.parse().map_err(|_| pos.syntax("malformed number"))?;
                Tok::Num(value, text)
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut name = String::new();
                name.push(c);
                while let Some(d) = cur.peek() {
                    if d.is_alphanumeric() || d == '_' {
                        name.push(d);
                        cur.bump();
                    } else {
                        break;
                    }
                }
                Tok::Ident(name)
            }
            other => return Err(pos.syntax(alloc::format!("unexpected character {other:?}"))),
        };
        out.push((tok, pos));
    }
}
