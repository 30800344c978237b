//! Scalar expressions over torus coordinates.
//!
//! Expressions are written in a small infix language (`x1..xd`, numeric
//! literals, `pi`, `+ - * / ^`, `sin`, `cos`, `exp`) and parsed into an
//! immutable [`Expr`] tree that can be evaluated in any [`Scalar`] type and
//! differentiated symbolically. Powers take integer exponents only, which
//! keeps differentiation closed over the node set.
//!
//! Precedence, tightest first: `^`, unary `-`, `* /`, `+ -`. All binary
//! operators are left-associative, so `-x1^2` is `-(x1^2)` and `x1^2^3` is
//! `(x1^2)^3`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("variable x{index} at offset {offset} exceeds dimension {dim}")]
    VariableOutOfRange { index: usize, dim: usize, offset: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::VariableOutOfRange { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("variable x{0} not supplied by the evaluation point")]
    MissingVariable(usize),
}

/// Expression tree. Variables are stored zero-based (`Var(0)` is `x1`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    Quotient(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn one() -> Expr {
        Expr::Const(1.0)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 1.0)
    }

    /// Negation with literal folding.
    pub fn neg(e: Expr) -> Expr {
        match e {
            Expr::Const(c) => Expr::Const(-c),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    /// Sum with literal zeros dropped.
    pub fn sum(terms: Vec<Expr>) -> Expr {
        let mut kept: Vec<Expr> = terms.into_iter().filter(|t| !t.is_zero()).collect();
        match kept.len() {
            0 => Expr::zero(),
            1 => kept.pop().unwrap(),
            _ => Expr::Sum(kept),
        }
    }

    /// Product with literal ones dropped and literal zeros absorbing.
    pub fn product(factors: Vec<Expr>) -> Expr {
        if factors.iter().any(Expr::is_zero) {
            return Expr::zero();
        }
        let mut kept: Vec<Expr> = factors.into_iter().filter(|f| !f.is_one()).collect();
        match kept.len() {
            0 => Expr::one(),
            1 => kept.pop().unwrap(),
            _ => Expr::Product(kept),
        }
    }

    pub fn quotient(num: Expr, den: Expr) -> Expr {
        if num.is_zero() {
            return Expr::zero();
        }
        if den.is_one() {
            return num;
        }
        Expr::Quotient(Box::new(num), Box::new(den))
    }

    pub fn pow(base: Expr, exponent: i32) -> Expr {
        match exponent {
            0 => Expr::one(),
            1 => base,
            n => Expr::Pow(Box::new(base), n),
        }
    }

    /// Largest variable index referenced, plus one (0 for closed expressions).
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(j) => j + 1,
            Expr::Neg(e) | Expr::Pow(e, _) | Expr::Sin(e) | Expr::Cos(e) | Expr::Exp(e) => e.arity(),
            Expr::Sum(v) | Expr::Product(v) => v.iter().map(Expr::arity).max().unwrap_or(0),
            Expr::Quotient(a, b) => a.arity().max(b.arity()),
        }
    }

    pub fn is_constant(&self) -> bool {
        self.arity() == 0
    }

    /// Evaluates at `x` (zero-based coordinates).
    pub fn eval<T: Scalar>(&self, x: &[T]) -> Result<T, EvalError> {
        Ok(match self {
            Expr::Const(c) => T::lit(*c),
            Expr::Var(j) => *x.get(*j).ok_or(EvalError::MissingVariable(j + 1))?,
            Expr::Neg(e) => -e.eval(x)?,
            Expr::Sum(v) => {
                let mut acc = T::zero();
                for t in v {
                    acc = acc + t.eval(x)?;
                }
                acc
            }
            Expr::Product(v) => {
                let mut acc = T::one();
                for f in v {
                    acc = acc * f.eval(x)?;
                }
                acc
            }
            Expr::Quotient(a, b) => {
                let den = b.eval(x)?;
                if den == T::zero() {
                    return Err(EvalError::DivisionByZero);
                }
                a.eval(x)? / den
            }
            Expr::Pow(e, n) => {
                let base = e.eval(x)?;
                if *n < 0 && base == T::zero() {
                    return Err(EvalError::DivisionByZero);
                }
                base.powi(*n)
            }
            Expr::Sin(e) => e.eval(x)?.sin(),
            Expr::Cos(e) => e.eval(x)?.cos(),
            Expr::Exp(e) => e.eval(x)?.exp(),
        })
    }

    /// Exact partial derivative with respect to the zero-based coordinate `j`.
    pub fn differentiate(&self, j: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Var(k) => {
                if *k == j {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Neg(e) => Expr::neg(e.differentiate(j)),
            Expr::Sum(v) => Expr::sum(v.iter().map(|t| t.differentiate(j)).collect()),
            Expr::Product(v) => {
                let mut terms = Vec::with_capacity(v.len());
                for (i, f) in v.iter().enumerate() {
                    let df = f.differentiate(j);
                    if df.is_zero() {
                        continue;
                    }
                    let mut factors = v.clone();
                    factors[i] = df;
                    terms.push(Expr::product(factors));
                }
                Expr::sum(terms)
            }
            Expr::Quotient(a, b) => {
                let da = a.differentiate(j);
                let db = b.differentiate(j);
                if db.is_zero() {
                    return Expr::quotient(da, (**b).clone());
                }
                let num = Expr::sum(vec![
                    Expr::product(vec![da, (**b).clone()]),
                    Expr::neg(Expr::product(vec![(**a).clone(), db])),
                ]);
                Expr::quotient(num, Expr::pow((**b).clone(), 2))
            }
            Expr::Pow(e, n) => {
                let de = e.differentiate(j);
                if de.is_zero() {
                    return Expr::zero();
                }
                Expr::product(vec![Expr::Const(f64::from(*n)), Expr::pow((**e).clone(), n - 1), de])
            }
            Expr::Sin(e) => Expr::product(vec![Expr::Cos(e.clone()), e.differentiate(j)]),
            Expr::Cos(e) => {
                let de = e.differentiate(j);
                if de.is_zero() {
                    return Expr::zero();
                }
                Expr::neg(Expr::product(vec![Expr::Sin(e.clone()), de]))
            }
            Expr::Exp(e) => Expr::product(vec![Expr::Exp(e.clone()), e.differentiate(j)]),
        }
    }

    /// Flattens the tree into a postfix program for hot loops.
    pub fn compile(&self) -> Program {
        let mut ops = Vec::new();
        self.emit(&mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Var(_) => depth += 1,
                Op::Add(n) | Op::Mul(n) => depth -= n - 1,
                Op::Div => depth -= 1,
                _ => {}
            }
            max_depth = max_depth.max(depth);
        }
        Program { ops, max_depth, arity: self.arity() }
    }

    fn emit(&self, ops: &mut Vec<Op>) {
        match self {
            Expr::Const(c) => ops.push(Op::Const(*c)),
            Expr::Var(j) => ops.push(Op::Var(*j)),
            Expr::Neg(e) => {
                e.emit(ops);
                ops.push(Op::Neg);
            }
            Expr::Sum(v) => {
                v.iter().for_each(|t| t.emit(ops));
                ops.push(Op::Add(v.len()));
            }
            Expr::Product(v) => {
                v.iter().for_each(|t| t.emit(ops));
                ops.push(Op::Mul(v.len()));
            }
            Expr::Quotient(a, b) => {
                a.emit(ops);
                b.emit(ops);
                ops.push(Op::Div);
            }
            Expr::Pow(e, n) => {
                e.emit(ops);
                ops.push(Op::Powi(*n));
            }
            Expr::Sin(e) => {
                e.emit(ops);
                ops.push(Op::Sin);
            }
            Expr::Cos(e) => {
                e.emit(ops);
                ops.push(Op::Cos);
            }
            Expr::Exp(e) => {
                e.emit(ops);
                ops.push(Op::Exp);
            }
        }
    }
}

impl fmt::Display for Expr {
    /// Canonical, fully parenthesised form accepted back by [`parse`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "(-{})", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Expr::Var(j) => write!(f, "x{}", j + 1),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Sum(v) => write_joined(f, v, " + "),
            Expr::Product(v) => write_joined(f, v, " * "),
            Expr::Quotient(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(e, n) => write!(f, "({e})^{n}"),
            Expr::Sin(e) => write!(f, "sin({e})"),
            Expr::Cos(e) => write!(f, "cos({e})"),
            Expr::Exp(e) => write!(f, "exp({e})"),
        }
    }
}

fn write_joined(f: &mut fmt::Formatter<'_>, items: &[Expr], sep: &str) -> fmt::Result {
    f.write_str("(")?;
    for (i, it) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(sep)?;
        }
        write!(f, "{it}")?;
    }
    f.write_str(")")
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text, usize::MAX).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Var(usize),
    Neg,
    Add(usize),
    Mul(usize),
    Div,
    Powi(i32),
    Sin,
    Cos,
    Exp,
}

/// Postfix form of an [`Expr`]; evaluates without recursion or allocation
/// beyond a caller-provided stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    max_depth: usize,
    arity: usize,
}

impl Program {
    pub fn arity(&self) -> usize {
        self.arity
    }

    /// Returns the value if the program is a closed constant.
    pub fn as_constant(&self) -> Option<f64> {
        match self.ops.as_slice() {
            [Op::Const(c)] => Some(*c),
            _ => None,
        }
    }

    pub fn eval<T: Scalar>(&self, x: &[T], stack: &mut Vec<T>) -> Result<T, EvalError> {
        if x.len() < self.arity {
            return Err(EvalError::MissingVariable(self.arity));
        }
        stack.clear();
        stack.reserve(self.max_depth);
        for op in &self.ops {
            match *op {
                Op::Const(c) => stack.push(T::lit(c)),
                Op::Var(j) => stack.push(x[j]),
                Op::Neg => {
                    let v = stack.last_mut().unwrap();
                    *v = -*v;
                }
                Op::Add(n) => {
                    let start = stack.len() - n;
                    let s = stack[start..].iter().fold(T::zero(), |a, &b| a + b);
                    stack.truncate(start);
                    stack.push(s);
                }
                Op::Mul(n) => {
                    let start = stack.len() - n;
                    let p = stack[start..].iter().fold(T::one(), |a, &b| a * b);
                    stack.truncate(start);
                    stack.push(p);
                }
                Op::Div => {
                    let den = stack.pop().unwrap();
                    if den == T::zero() {
                        return Err(EvalError::DivisionByZero);
                    }
                    let v = stack.last_mut().unwrap();
                    *v = *v / den;
                }
                Op::Powi(n) => {
                    let v = stack.last_mut().unwrap();
                    if n < 0 && *v == T::zero() {
                        return Err(EvalError::DivisionByZero);
                    }
                    *v = v.powi(n);
                }
                Op::Sin => {
                    let v = stack.last_mut().unwrap();
                    *v = v.sin();
                }
                Op::Cos => {
                    let v = stack.last_mut().unwrap();
                    *v = v.cos();
                }
                Op::Exp => {
                    let v = stack.last_mut().unwrap();
                    *v = v.exp();
                }
            }
        }
        Ok(stack[0])
    }
}

/// Parses `text` as an expression over `x1..x{dim}`.
pub fn parse(text: &str, dim: usize) -> Result<Expr, ParseError> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0, dim, end: text.len() };
    let e = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(p.syntax(t.offset, format!("unexpected {}", t.kind.describe())));
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64, bool),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl TokKind {
    fn describe(&self) -> String {
        match self {
            TokKind::Num(v, _) => format!("number {v}"),
            TokKind::Ident(s) => format!("identifier '{s}'"),
            TokKind::Plus => "'+'".into(),
            TokKind::Minus => "'-'".into(),
            TokKind::Star => "'*'".into(),
            TokKind::Slash => "'/'".into(),
            TokKind::Caret => "'^'".into(),
            TokKind::LParen => "'('".into(),
            TokKind::RParen => "')'".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    offset: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => TokKind::Plus,
            b'-' => TokKind::Minus,
            b'*' => TokKind::Star,
            b'/' => TokKind::Slash,
            b'^' => TokKind::Caret,
            b'(' => TokKind::LParen,
            b')' => TokKind::RParen,
            b'0'..=b'9' | b'.' => {
                let mut integral = true;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    if bytes[i] == b'.' {
                        integral = false;
                    }
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        integral = false;
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit = &text[start..i];
                let v: f64 = lit
                    .parse()
                    .map_err(|_| ParseError::Syntax { offset: start, message: format!("malformed number '{lit}'") })?;
                out.push(Token { kind: TokKind::Num(v, integral), offset: start });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push(Token { kind: TokKind::Ident(text[start..i].to_string()), offset: start });
                continue;
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax { offset: start, message: format!("unexpected character '{ch}'") });
            }
        };
        out.push(Token { kind, offset: start });
        i += 1;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    dim: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat(&mut self, kind: &TokKind) -> bool {
        if self.peek().map(|t| &t.kind) == Some(kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn here(&self) -> usize {
        self.peek().map(|t| t.offset).unwrap_or(self.end)
    }

    fn syntax(&self, offset: usize, message: impl Into<String>) -> ParseError {
        ParseError::Syntax { offset, message: message.into() }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut terms = vec![self.term()?];
        loop {
            if self.eat(&TokKind::Plus) {
                terms.push(self.term()?);
            } else if self.eat(&TokKind::Minus) {
                terms.push(Expr::Neg(Box::new(self.term()?)));
            } else {
                break;
            }
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Expr::Sum(terms) })
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat(&TokKind::Star) {
                let rhs = self.unary()?;
                acc = match acc {
                    Expr::Product(mut v) => {
                        v.push(rhs);
                        Expr::Product(v)
                    }
                    other => Expr::Product(vec![other, rhs]),
                };
            } else if self.eat(&TokKind::Slash) {
                let rhs = self.unary()?;
                acc = Expr::Quotient(Box::new(acc), Box::new(rhs));
            } else {
                break;
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat(&TokKind::Minus) {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let mut base = self.primary()?;
        while self.eat(&TokKind::Caret) {
            let n = self.exponent()?;
            base = Expr::Pow(Box::new(base), n);
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<i32, ParseError> {
        let paren = self.eat(&TokKind::LParen);
        let neg = self.eat(&TokKind::Minus);
        let at = self.here();
        let n = match self.next() {
            Some(Token { kind: TokKind::Num(v, integral), offset }) => {
                if !integral || v.fract() != 0.0 {
                    return Err(self.syntax(offset, "only integer exponents are supported"));
                }
                if v > f64::from(i32::MAX) {
                    return Err(self.syntax(offset, "exponent too large"));
                }
                v as i32
            }
            Some(t) => {
                return Err(self.syntax(t.offset, format!("expected integer exponent, found {}", t.kind.describe())))
            }
            None => return Err(self.syntax(at, "expected integer exponent, found end of input")),
        };
        if paren && !self.eat(&TokKind::RParen) {
            return Err(self.syntax(self.here(), "expected ')' after exponent"));
        }
        Ok(if neg { -n } else { n })
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let at = self.here();
        let tok = match self.next() {
            Some(t) => t,
            None => return Err(self.syntax(at, "unexpected end of input")),
        };
        match tok.kind {
            TokKind::Num(v, _) => Ok(Expr::Const(v)),
            TokKind::LParen => {
                let e = self.expr()?;
                if !self.eat(&TokKind::RParen) {
                    return Err(self.syntax(self.here(), "expected ')'"));
                }
                Ok(e)
            }
            TokKind::Ident(name) => self.identifier(&name, tok.offset),
            other => Err(self.syntax(tok.offset, format!("unexpected {}", other.describe()))),
        }
    }

    fn identifier(&mut self, name: &str, offset: usize) -> Result<Expr, ParseError> {
        match name {
            "pi" => return Ok(Expr::Const(std::f64::consts::PI)),
            "sin" | "cos" | "exp" => {
                if !self.eat(&TokKind::LParen) {
                    return Err(self.syntax(self.here(), format!("expected '(' after {name}")));
                }
                let arg = Box::new(self.expr()?);
                if !self.eat(&TokKind::RParen) {
                    return Err(self.syntax(self.here(), "expected ')'"));
                }
                return Ok(match name {
                    "sin" => Expr::Sin(arg),
                    "cos" => Expr::Cos(arg),
                    _ => Expr::Exp(arg),
                });
            }
            _ => {}
        }
        if let Some(digits) = name.strip_prefix('x') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = digits.parse().map_err(|_| self.syntax(offset, format!("bad variable '{name}'")))?;
                if index == 0 {
                    return Err(self.syntax(offset, "variables are numbered from x1"));
                }
                if index > self.dim {
                    return Err(ParseError::VariableOutOfRange { index, dim: self.dim, offset });
                }
                return Ok(Expr::Var(index - 1));
            }
        }
        Err(self.syntax(offset, format!("unknown identifier '{name}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ev(e: &Expr, x: &[f64]) -> f64 {
        e.eval(x).unwrap()
    }

    #[test]
    fn parses_and_evaluates_basic_forms() {
        let e = parse("sin(x3 - 1)", 3).unwrap();
        assert_eq!(ev(&e, &[0.0, 0.0, 1.0]), 0.0);
        let e = parse("cos(x3)", 3).unwrap();
        assert_eq!(ev(&e, &[0.0, 0.0, 0.0]), 1.0);
        let e = parse("1 - sin(x3-1)", 3).unwrap();
        assert!(ev(&e, &[0.0, 0.0, 1.0 + PI / 2.0]).abs() < 1e-15);
        let e = parse("sin(x3-1)", 3).unwrap();
        assert!(ev(&e, &[0.0, 0.0, 1.0 + PI]).abs() < 1e-15);
    }

    #[test]
    fn syntax_error_reports_offset() {
        let err = parse("x1 + * 2", 3).unwrap_err();
        assert_eq!(err.offset(), 5);
        assert!(matches!(err, ParseError::Syntax { .. }));
    }

    #[test]
    fn rejects_out_of_range_variable() {
        let err = parse("x1 + x4", 3).unwrap_err();
        assert_eq!(err, ParseError::VariableOutOfRange { index: 4, dim: 3, offset: 5 });
        assert!(parse("x0", 3).is_err());
    }

    #[test]
    fn rejects_fractional_powers() {
        let err = parse("x1^0.5", 1).unwrap_err();
        assert_eq!(err.offset(), 3);
        assert!(parse("x1^x1", 1).is_err());
        assert_eq!(ev(&parse("x1^-2", 1).unwrap(), &[2.0]), 0.25);
        assert_eq!(ev(&parse("x1^(-1)", 1).unwrap(), &[4.0]), 0.25);
    }

    #[test]
    fn precedence_and_associativity() {
        let x = [3.0];
        assert_eq!(ev(&parse("-x1^2", 1).unwrap(), &x), -9.0);
        assert_eq!(ev(&parse("x1^2^2", 1).unwrap(), &x), 81.0);
        assert_eq!(ev(&parse("8 / 4 / 2", 1).unwrap(), &x), 1.0);
        assert_eq!(ev(&parse("8 - 4 - 2", 1).unwrap(), &x), 2.0);
        assert_eq!(ev(&parse("2 + 3 * x1", 1).unwrap(), &x), 11.0);
        assert_eq!(ev(&parse("--x1", 1).unwrap(), &x), 3.0);
        assert_eq!(ev(&parse("2*pi", 1).unwrap(), &x), 2.0 * PI);
        assert_eq!(ev(&parse("1.5e1 + 2E-1", 1).unwrap(), &x), 15.2);
    }

    #[test]
    fn trailing_garbage_and_unbalanced_parens() {
        assert!(parse("(x1", 1).is_err());
        assert!(parse("x1)", 1).is_err());
        assert!(parse("sin x1", 1).is_err());
        assert!(parse("", 1).is_err());
        assert!(parse("foo(x1)", 1).is_err());
        assert!(parse("x1 $ 2", 1).is_err());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let e = parse("x1/x1", 3).unwrap();
        assert_eq!(e.eval(&[0.0, 0.0, 0.0]), Err(EvalError::DivisionByZero));
        let p = e.compile();
        assert_eq!(p.eval(&[0.0, 0.0, 0.0], &mut Vec::new()), Err(EvalError::DivisionByZero));
        let e = parse("x1^-1", 1).unwrap();
        assert_eq!(e.eval(&[0.0]), Err(EvalError::DivisionByZero));
    }

    #[test]
    fn derivatives_of_named_examples() {
        let d = parse("cos(x3)", 3).unwrap().differentiate(2);
        for &t in &[0.0, 0.3, 1.7, -2.0] {
            assert!((ev(&d, &[0.0, 0.0, t]) + t.sin()).abs() < 1e-15);
        }
        let d = parse("sin(x3-1)", 3).unwrap().differentiate(2);
        assert_eq!(ev(&d, &[0.0, 0.0, 1.0]), 1.0);
        let d = parse("x1*x2", 2).unwrap().differentiate(0);
        assert_eq!(d, Expr::Var(1));
        assert!(parse("3.5", 2).unwrap().differentiate(1).is_zero());
    }

    #[test]
    fn generic_evaluation_in_f32() {
        let e = parse("exp(x1) * cos(x2)", 2).unwrap();
        let v32: f32 = e.eval(&[0.5f32, 0.25]).unwrap();
        let v64: f64 = e.eval(&[0.5f64, 0.25]).unwrap();
        assert!((f64::from(v32) - v64).abs() < 1e-6);
    }

    #[test]
    fn serde_uses_canonical_text() {
        let e = parse("sin(x3 - 1) * 2", 3).unwrap();
        let json = serde_json::to_string(&e).unwrap();
        let back: Expr = serde_json::from_str(&json).unwrap();
        assert_eq!(e, back);
    }

    /// Expressions whose values and derivatives stay moderate on [-3, 3]^3.
    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(|c| Expr::Const((c * 100.0).round() / 100.0)),
            (0usize..3).prop_map(Expr::Var),
        ];
        leaf.prop_recursive(4, 24, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                prop::collection::vec(inner.clone(), 2..4).prop_map(Expr::Sum),
                prop::collection::vec(inner.clone(), 2..3).prop_map(Expr::Product),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                    // denominator 2 + sin(b) stays in [1, 3]
                    let den = Expr::Sum(vec![Expr::Const(2.0), Expr::Sin(Box::new(b))]);
                    Expr::Quotient(Box::new(a), Box::new(den))
                }),
                (inner.clone(), 0i32..4).prop_map(|(e, n)| Expr::Pow(Box::new(e), n)),
                inner.clone().prop_map(|e| Expr::Sin(Box::new(e))),
                inner.clone().prop_map(|e| Expr::Cos(Box::new(e))),
                inner.prop_map(|e| Expr::Exp(Box::new(Expr::Sin(Box::new(e))))),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn derivative_matches_central_difference(
            e in arb_expr(),
            x in prop::array::uniform3(-3.0f64..3.0),
            j in 0usize..3,
        ) {
            let d = e.differentiate(j);
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (ev(&e, &xp) - ev(&e, &xm)) / (2.0 * h);
            let exact = ev(&d, &x);
            prop_assert!(
                (exact - fd).abs() <= 1e-6 * (1.0 + exact.abs()),
                "{} d/dx{}: exact {} fd {}", e, j + 1, exact, fd
            );
        }

        #[test]
        fn printed_form_round_trips(
            e in arb_expr(),
            pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 100),
        ) {
            let text = e.to_string();
            let back = parse(&text, 3).unwrap();
            let prog = e.compile();
            let mut stack = Vec::new();
            for x in &pts {
                let a = ev(&e, x);
                prop_assert_eq!(a, ev(&back, x));
                prop_assert_eq!(a, prog.eval(x, &mut stack).unwrap());
            }
        }
    }
}
