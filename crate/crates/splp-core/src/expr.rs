//! Small expression trees for user-supplied dynamics and costs.
//!
//! Grammar: `+ - * / ^` with usual precedence, unary minus, parentheses,
//! `min(a, b)` / `max(a, b)`, numeric literals, and the variables
//! `u1..`, `y1..`, `z1..` (1-based). Exponents must be nonnegative integers.

use std::fmt;

use thiserror::Error;

/// Variable group inside an expression: control, fast state or slow state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarGroup {
    U,
    Y,
    Z,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// 0-based index into the group's coordinate vector.
    Var(VarGroup, usize),
    Neg(std::boxed::Box<Expr>),
    Add(std::boxed::Box<Expr>, std::boxed::Box<Expr>),
    Sub(std::boxed::Box<Expr>, std::boxed::Box<Expr>),
    Mul(std::boxed::Box<Expr>, std::boxed::Box<Expr>),
    Div(std::boxed::Box<Expr>, std::boxed::Box<Expr>),
    Pow(std::boxed::Box<Expr>, u32),
    Min(std::boxed::Box<Expr>, std::boxed::Box<Expr>),
    Max(std::boxed::Box<Expr>, std::boxed::Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("unexpected character `{0}` at byte {1}")]
    UnexpectedChar(char, usize),
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("expected `{0}` at byte {1}")]
    Expected(char, usize),
    #[error("exponent must be a nonnegative integer literal at byte {0}")]
    BadExponent(usize),
    #[error("unknown identifier `{0}` at byte {1}")]
    UnknownIdent(String, usize),
    #[error("trailing input at byte {0}")]
    TrailingInput(usize),
}

impl Expr {
    /// Parses an expression from text.
    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        let mut p = Parser {
            bytes: text.as_bytes(),
            pos: 0,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(ParseError::TrailingInput(p.pos));
        }
        Ok(e)
    }

    /// Evaluates at a point split into the three variable groups.
    pub fn eval(&self, u: &[f64], y: &[f64], z: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(g, i) => match g {
                VarGroup::U => u[*i],
                VarGroup::Y => y[*i],
                VarGroup::Z => z[*i],
            },
            Expr::Neg(a) => -a.eval(u, y, z),
            Expr::Add(a, b) => a.eval(u, y, z) + b.eval(u, y, z),
            Expr::Sub(a, b) => a.eval(u, y, z) - b.eval(u, y, z),
            Expr::Mul(a, b) => a.eval(u, y, z) * b.eval(u, y, z),
            Expr::Div(a, b) => a.eval(u, y, z) / b.eval(u, y, z),
            Expr::Pow(a, n) => a.eval(u, y, z).powi(*n as i32),
            Expr::Min(a, b) => a.eval(u, y, z).min(b.eval(u, y, z)),
            Expr::Max(a, b) => a.eval(u, y, z).max(b.eval(u, y, z)),
        }
    }

    /// Largest 1-based index used per variable group, as (u, y, z).
    pub fn max_indices(&self) -> (usize, usize, usize) {
        let mut m = (0, 0, 0);
        self.visit_vars(&mut |g, i| match g {
            VarGroup::U => m.0 = m.0.max(i + 1),
            VarGroup::Y => m.1 = m.1.max(i + 1),
            VarGroup::Z => m.2 = m.2.max(i + 1),
        });
        m
    }

    fn visit_vars(&self, f: &mut impl FnMut(VarGroup, usize)) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(g, i) => f(*g, *i),
            Expr::Neg(a) | Expr::Pow(a, _) => a.visit_vars(f),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(g, i) => {
                let tag = match g {
                    VarGroup::U => "u",
                    VarGroup::Y => "y",
                    VarGroup::Z => "z",
                };
                write!(f, "{tag}{}", i + 1)
            }
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, n) => write!(f, "{a}^{n}"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
        }
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ParseError::Expected(c as char, self.pos))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Add(lhs.into(), rhs.into());
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Sub(lhs.into(), rhs.into());
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Mul(lhs.into(), rhs.into());
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Div(lhs.into(), rhs.into());
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.factor()?;
            return Ok(Expr::Neg(inner.into()));
        }
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(ParseError::BadExponent(start));
            }
            let n: u32 = std::str::from_utf8(&self.bytes[start..self.pos])
                .unwrap()
                .parse()
                .map_err(|_| ParseError::BadExponent(start))?;
            return Ok(Expr::Pow(base.into(), n));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(ParseError::UnexpectedEnd),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(c) => Err(ParseError::UnexpectedChar(c as char, self.pos)),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E')
                && self.pos > start
                && self
                    .bytes
                    .get(self.pos + 1)
                    .is_some_and(|&d| d.is_ascii_digit() || d == b'+' || d == b'-')
            {
                self.pos += 2;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                break;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| ParseError::UnexpectedChar(text.chars().next().unwrap_or('?'), start))
    }

    fn ident(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        match name {
            "min" | "max" => {
                self.expect(b'(')?;
                let a = self.expr()?;
                self.expect(b',')?;
                let b = self.expr()?;
                self.expect(b')')?;
                Ok(if name == "min" {
                    Expr::Min(a.into(), b.into())
                } else {
                    Expr::Max(a.into(), b.into())
                })
            }
            _ => {
                let (group, digits) = match name.as_bytes().first() {
                    Some(b'u') => (VarGroup::U, &name[1..]),
                    Some(b'y') => (VarGroup::Y, &name[1..]),
                    Some(b'z') => (VarGroup::Z, &name[1..]),
                    _ => return Err(ParseError::UnknownIdent(name.to_string(), start)),
                };
                let idx: usize = digits
                    .parse()
                    .map_err(|_| ParseError::UnknownIdent(name.to_string(), start))?;
                if idx == 0 {
                    return Err(ParseError::UnknownIdent(name.to_string(), start));
                }
                Ok(Expr::Var(group, idx - 1))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(text: &str, u: &[f64], y: &[f64], z: &[f64]) -> f64 {
        Expr::parse(text).unwrap().eval(u, y, z)
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(ev("1 + 2*3", &[], &[], &[]), 7.0);
        assert_eq!(ev("(1 + 2)*3", &[], &[], &[]), 9.0);
        assert_eq!(ev("2^3 + 1", &[], &[], &[]), 9.0);
        assert_eq!(ev("-2^2", &[], &[], &[]), -4.0);
        assert_eq!(ev("6/3/2", &[], &[], &[]), 1.0);
        assert_eq!(ev("1.5e1 - 5", &[], &[], &[]), 10.0);
    }

    #[test]
    fn variables_and_minmax() {
        let u = [0.5, -1.0];
        let y = [2.0];
        let z = [3.0, 4.0];
        assert_eq!(ev("u1^2 + u2^2", &u, &y, &z), 1.25);
        assert_eq!(ev("-y1*u2 + z2*u1", &u, &y, &z), 4.0);
        assert_eq!(ev("min(z1, z2) + max(u1, u2)", &u, &y, &z), 3.5);
    }

    #[test]
    fn example1_expressions_match_closed_form() {
        let f1 = Expr::parse("-y1 + u1").unwrap();
        let g = Expr::parse("-y1*u2 + y2*u1").unwrap();
        let cost = Expr::parse("u1^2 + u2^2 + y1^2 + y2^2 + z1^2").unwrap();
        let (u, y, z) = ([1.0, 0.0], [0.0, 1.0], [2.0]);
        assert_eq!(f1.eval(&u, &y, &z), 1.0);
        assert_eq!(g.eval(&u, &y, &z), 1.0);
        assert_eq!(cost.eval(&u, &y, &z), 6.0);
        assert_eq!(cost.max_indices(), (2, 2, 1));
    }

    #[test]
    fn parse_errors() {
        assert!(Expr::parse("u0").is_err());
        assert!(Expr::parse("q1 + 2").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("x^y").is_err());
        assert!(Expr::parse("1 2").is_err());
    }
}
