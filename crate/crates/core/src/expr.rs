//! A small arithmetic expression language for scenario coefficients.
//!
//! The grammar is a fixed whitelist:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | variable | constant | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Variables are `x1`, `x2`, `t` and `theta` (the fiber angle, only meaningful
//! for sphere-bundle data). Constants are `pi` and `e`. Functions are `sin`,
//! `cos` and `exp`. Nothing else is accepted, so a scenario file can never
//! execute arbitrary code.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Values bound to the expression variables.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Vars {
    pub x1: f64,
    pub x2: f64,
    pub t: f64,
    pub theta: f64,
}

impl Vars {
    pub fn at(x: [f64; 2], t: f64) -> Self {
        Vars { x1: x[0], x2: x[1], t, theta: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X1,
    X2,
    T,
    Theta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, v: &Vars) -> f64 {
        match self {
            Node::Num(c) => *c,
            Node::Var(Var::X1) => v.x1,
            Node::Var(Var::X2) => v.x2,
            Node::Var(Var::T) => v.t,
            Node::Var(Var::Theta) => v.theta,
            Node::Neg(a) => -a.eval(v),
            Node::Add(a, b) => a.eval(v) + b.eval(v),
            Node::Sub(a, b) => a.eval(v) - b.eval(v),
            Node::Mul(a, b) => a.eval(v) * b.eval(v),
            Node::Div(a, b) => a.eval(v) / b.eval(v),
            Node::Pow(a, b) => {
                let base = a.eval(v);
                let exp = b.eval(v);
                if exp.fract() == 0.0 && exp.abs() < 1e9 {
                    base.powi(exp as i32)
                } else {
                    base.powf(exp)
                }
            }
            Node::Call(Func::Sin, a) => a.eval(v).sin(),
            Node::Call(Func::Cos, a) => a.eval(v).cos(),
            Node::Call(Func::Exp, a) => a.eval(v).exp(),
        }
    }

    fn uses(&self, var: Var) -> bool {
        match self {
            Node::Num(_) => false,
            Node::Var(w) => *w == var,
            Node::Neg(a) | Node::Call(_, a) => a.uses(var),
            Node::Add(a, b)
            | Node::Sub(a, b)
            | Node::Mul(a, b)
            | Node::Div(a, b)
            | Node::Pow(a, b) => a.uses(var) || b.uses(var),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part: 1e-3, 2.5E+4
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value = text
                .parse::<f64>()
                .map_err(|_| Error::Expr(format!("bad number '{text}' in '{src}'")))?;
            out.push(Token::Num(value));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else if c == '(' {
            out.push(Token::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Token::RParen);
            i += 1;
        } else {
            return Err(Error::Expr(format!("unexpected character '{c}' in '{src}'")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err(&self, what: &str) -> Error {
        Error::Expr(format!("{what} at token {} in '{}'", self.pos, self.src))
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Node::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(Token::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Node::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if let Some(Token::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if let Some(Token::Op('+')) = self.peek() {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(Token::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next() {
            Some(Token::Num(c)) => Ok(Node::Num(c)),
            Some(Token::LParen) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err(self.err("expected ')'")),
                }
            }
            Some(Token::Ident(name)) => {
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    _ => None,
                };
                if let Some(func) = func {
                    if self.next() != Some(Token::LParen) {
                        return Err(self.err(&format!("expected '(' after {name}")));
                    }
                    let arg = self.expr()?;
                    if self.next() != Some(Token::RParen) {
                        return Err(self.err("expected ')'"));
                    }
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                match name.as_str() {
                    "x1" => Ok(Node::Var(Var::X1)),
                    "x2" => Ok(Node::Var(Var::X2)),
                    "t" => Ok(Node::Var(Var::T)),
                    "theta" => Ok(Node::Var(Var::Theta)),
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    other => Err(Error::Expr(format!(
                        "unknown identifier '{other}' in '{}' (allowed: x1, x2, t, theta, pi, e, sin, cos, exp)",
                        self.src
                    ))),
                }
            }
            Some(tok) => Err(self.err(&format!("unexpected token {tok:?}"))),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

/// A parsed, whitelisted arithmetic expression.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = tokenize(src)?;
        if tokens.is_empty() {
            return Err(Error::Expr("empty expression".into()));
        }
        let mut p = Parser { tokens, pos: 0, src };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.err("trailing input"));
        }
        Ok(Expr { source: src.to_string(), root })
    }

    pub fn constant(c: f64) -> Self {
        Expr { source: format!("{c:?}"), root: Node::Num(c) }
    }

    pub fn eval(&self, v: &Vars) -> f64 {
        self.root.eval(v)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses(&self, var: Var) -> bool {
        self.root.uses(var)
    }

    /// Value when the expression depends on no variable at all.
    pub fn as_constant(&self) -> Option<f64> {
        let free = [Var::X1, Var::X2, Var::T, Var::Theta].iter().any(|&v| self.uses(v));
        (!free).then(|| self.eval(&Vars::default()))
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        // Accept either a string or a bare JSON number.
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::String(s) => Expr::parse(&s).map_err(serde::de::Error::custom),
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(Expr::constant)
                .ok_or_else(|| serde::de::Error::custom("non-finite number")),
            other => Err(serde::de::Error::custom(format!(
                "expected expression string or number, got {other}"
            ))),
        }
    }
}

/// A scalar function of `(x1, x2, t, theta)`: either a parsed expression or
/// native code (used by tests and by library callers).
#[derive(Clone)]
pub enum ScalarFn {
    Expr(Expr),
    Native(Arc<dyn Fn(&Vars) -> f64 + Send + Sync>),
}

impl ScalarFn {
    pub fn constant(c: f64) -> Self {
        ScalarFn::Expr(Expr::constant(c))
    }

    pub fn parse(src: &str) -> Result<Self> {
        Expr::parse(src).map(ScalarFn::Expr)
    }

    pub fn native(f: impl Fn(&Vars) -> f64 + Send + Sync + 'static) -> Self {
        ScalarFn::Native(Arc::new(f))
    }

    /// Native function of the spatial point only.
    pub fn spatial(f: impl Fn([f64; 2]) -> f64 + Send + Sync + 'static) -> Self {
        ScalarFn::Native(Arc::new(move |v: &Vars| f([v.x1, v.x2])))
    }

    #[inline]
    pub fn eval(&self, v: &Vars) -> f64 {
        match self {
            ScalarFn::Expr(e) => e.eval(v),
            ScalarFn::Native(f) => f(v),
        }
    }

    #[inline]
    pub fn at(&self, x: [f64; 2], t: f64) -> f64 {
        self.eval(&Vars::at(x, t))
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            ScalarFn::Expr(e) => e.as_constant(),
            ScalarFn::Native(_) => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ScalarFn::Expr(e) => e.source().to_string(),
            ScalarFn::Native(_) => "<native>".to_string(),
        }
    }
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarFn({})", self.describe())
    }
}

impl From<Expr> for ScalarFn {
    fn from(e: Expr) -> Self {
        ScalarFn::Expr(e)
    }
}
