//! Recursive-descent parser for the expression grammar:
//!
//! ```text
//! expr   := ['-'] term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := base ('^' integer)?
//! base   := number | ident | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! `ident` must be one of the caller-supplied variable names; `func` is one
//! of `sin cos exp log sqrt tanh`. Exponents are (possibly negative) integer
//! literals. Errors carry the byte offset of the offending token.

use super::{ScalarExpr, UnaryFn};
use crate::error::{Error, Result};

/// Parse an infix expression over the given variable names.
pub fn parse_expr<S: AsRef<str>>(text: &str, vars: &[S]) -> Result<ScalarExpr> {
    let mut parser = Parser {
        src: text.as_bytes(),
        pos: 0,
        vars,
    };
    let expr = parser.expr()?;
    parser.skip_ws();
    if parser.pos != parser.src.len() {
        return Err(parser.error("unexpected trailing input"));
    }
    Ok(expr)
}

struct Parser<'a, S: AsRef<str>> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [S],
}

impl<'a, S: AsRef<str>> Parser<'a, S> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.to_owned(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, byte: u8) -> bool {
        if self.peek() == Some(byte) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<ScalarExpr> {
        self.skip_ws();
        let negate = self.eat(b'-');
        let first = self.term()?;
        let mut acc = if negate {
            ScalarExpr::neg(&first)
        } else {
            first
        };
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = ScalarExpr::add(&acc, &rhs);
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    acc = ScalarExpr::sub(&acc, &rhs);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<ScalarExpr> {
        let mut acc = self.factor()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    acc = ScalarExpr::mul(&acc, &rhs);
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    acc = ScalarExpr::div(&acc, &rhs);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn factor(&mut self) -> Result<ScalarExpr> {
        let base = self.base()?;
        self.skip_ws();
        if self.eat(b'^') {
            let exp = self.integer_exponent()?;
            Ok(ScalarExpr::powi(&base, exp))
        } else {
            Ok(base)
        }
    }

    fn integer_exponent(&mut self) -> Result<i32> {
        self.skip_ws();
        let start = self.pos;
        let negative = self.eat(b'-');
        let digits_start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(Error::NonIntegerExponent { offset: start });
        }
        // A decimal point or identifier tail makes the exponent non-integer.
        if matches!(self.peek(), Some(b'.')) {
            return Err(Error::NonIntegerExponent { offset: start });
        }
        let text = std::str::from_utf8(&self.src[digits_start..self.pos]).unwrap();
        let magnitude: i32 = text
            .parse()
            .map_err(|_| Error::NonIntegerExponent { offset: start })?;
        Ok(if negative { -magnitude } else { magnitude })
    }

    fn base(&mut self) -> Result<ScalarExpr> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.skip_ws();
                if !self.eat(b')') {
                    return Err(self.error("expected ')'"));
                }
                Ok(inner)
            }
            Some(b) if b.is_ascii_digit() => self.number(),
            Some(b) if b.is_ascii_alphabetic() || b == b'_' => self.ident(),
            _ => Err(self.error("expected a number, identifier or '('")),
        }
    }

    fn number(&mut self) -> Result<ScalarExpr> {
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.eat(b'.') {
            while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            let exp_digits = self.pos;
            while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == exp_digits {
                // Not an exponent suffix after all (e.g. "2*e1" style idents
                // are impossible here, so treat as malformed number).
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| Error::Parse {
            offset: start,
            message: format!("malformed number literal `{text}`"),
        })?;
        Ok(ScalarExpr::constant(value))
    }

    fn ident(&mut self) -> Result<ScalarExpr> {
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_alphanumeric() || b == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .to_owned();
        self.skip_ws();
        if self.peek() == Some(b'(') {
            let func = UnaryFn::from_name(&name).ok_or(Error::UnknownIdentifier {
                name: name.clone(),
                offset: start,
            })?;
            self.pos += 1;
            let arg = self.expr()?;
            self.skip_ws();
            if !self.eat(b')') {
                return Err(self.error("expected ')'"));
            }
            Ok(ScalarExpr::func(func, &arg))
        } else {
            if self.vars.iter().any(|v| v.as_ref() == name) {
                Ok(ScalarExpr::variable(&name))
            } else {
                Err(Error::UnknownIdentifier {
                    name,
                    offset: start,
                })
            }
        }
    }
}
