//! Scalar field expressions over the coordinates `x1..xn`.
//!
//! Expressions are parsed once into an immutable tree. Plain evaluation
//! returns an `f64`; [`FieldExpr::eval_jet`] additionally propagates first and
//! second derivatives in forward mode so metric families can form Christoffel
//! symbols and their Jacobians without nested finite differences.

use std::fmt;

use thiserror::Error;

/// Smallest admissible magnitude of a denominator.
pub const DIV_GUARD: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("syntax error at column {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at column {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("variable x{index} at column {pos} exceeds dimension {dim}")]
    VariableOutOfRange { index: usize, dim: usize, pos: usize },
    #[error("unsupported dimension {0} (expected 2, 3 or 4)")]
    Dimension(usize),
    #[error("point has {got} coordinates but the expression expects {expected}")]
    PointDimension { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Sin,
    Cos,
    Sqrt,
    Tanh,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Zero-based coordinate index.
    Var(usize),
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldExpr {
    source: String,
    dim: usize,
    ast: Expr,
}

/// Parse `source` as a field on `dim`-dimensional points.
pub fn parse_field(source: &str, dim: usize) -> Result<FieldExpr, FieldError> {
    if !(2..=4).contains(&dim) {
        return Err(FieldError::Dimension(dim));
    }
    let tokens = lex(source)?;
    let mut p = Parser { tokens, at: 0, dim, len: source.len() };
    let ast = p.expr()?;
    if let Some(t) = p.peek() {
        return Err(FieldError::Syntax { pos: t.pos, msg: format!("unexpected {}", t.kind) });
    }
    Ok(FieldExpr { source: source.to_string(), dim, ast })
}

/// Evaluate `expr` at `point`.
pub fn eval_field(expr: &FieldExpr, point: &[f64]) -> Result<f64, FieldError> {
    expr.eval(point)
}

impl FieldExpr {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    /// True when the tree contains no variables.
    pub fn is_constant(&self) -> bool {
        !has_var(&self.ast)
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, FieldError> {
        self.check_point(point)?;
        let v = eval_node(&self.ast, point)?;
        finite(v, "non-finite result")
    }

    /// Value, gradient and Hessian at `point`.
    pub fn eval_jet(&self, point: &[f64]) -> Result<Jet, FieldError> {
        self.check_point(point)?;
        let j = jet_node(&self.ast, point, self.dim)?;
        if !j.is_finite() {
            return Err(FieldError::Domain("non-finite derivative".into()));
        }
        Ok(j)
    }

    fn check_point(&self, point: &[f64]) -> Result<(), FieldError> {
        if point.len() != self.dim {
            return Err(FieldError::PointDimension { expected: self.dim, got: point.len() });
        }
        Ok(())
    }
}

impl fmt::Display for FieldExpr {
    /// Fully parenthesised form; parsing it back gives an identical tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(&self.ast, f)
    }
}

fn write_expr(e: &Expr, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match e {
        Expr::Num(v) => {
            // Debug output of f64 round-trips exactly; negative literals come
            // from folding and are wrapped so they re-parse as a negation.
            if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                write!(f, "(-{:?})", -v)
            } else {
                write!(f, "{v:?}")
            }
        }
        Expr::Var(i) => write!(f, "x{}", i + 1),
        Expr::Neg(a) => {
            write!(f, "(-")?;
            write_expr(a, f)?;
            write!(f, ")")
        }
        Expr::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_expr(a, f)?;
            write!(f, ")")
        }
        Expr::Bin(op, a, b) => {
            write!(f, "(")?;
            write_expr(a, f)?;
            write!(f, " {} ", op.symbol())?;
            write_expr(b, f)?;
            write!(f, ")")
        }
    }
}

fn finite(v: f64, what: &str) -> Result<f64, FieldError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FieldError::Domain(what.into()))
    }
}

fn checked_div(a: f64, b: f64) -> Result<f64, FieldError> {
    if b.abs() < DIV_GUARD {
        return Err(FieldError::Domain("division by zero".into()));
    }
    Ok(a / b)
}

fn checked_pow(a: f64, b: f64) -> Result<f64, FieldError> {
    if a < 0.0 && b.fract() != 0.0 {
        return Err(FieldError::Domain(format!("negative base {a} raised to non-integer power {b}")));
    }
    if a == 0.0 && b < 0.0 {
        return Err(FieldError::Domain("division by zero".into()));
    }
    finite(a.powf(b), "overflow in power")
}

fn apply(func: Func, a: f64) -> Result<f64, FieldError> {
    let v = match func {
        Func::Exp => a.exp(),
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Sqrt => {
            if a < 0.0 {
                return Err(FieldError::Domain(format!("sqrt of negative value {a}")));
            }
            a.sqrt()
        }
        Func::Tanh => a.tanh(),
    };
    finite(v, "overflow in function")
}

fn eval_node(e: &Expr, p: &[f64]) -> Result<f64, FieldError> {
    Ok(match e {
        Expr::Num(v) => *v,
        Expr::Var(i) => p[*i],
        Expr::Neg(a) => -eval_node(a, p)?,
        Expr::Call(func, a) => apply(*func, eval_node(a, p)?)?,
        Expr::Bin(op, a, b) => {
            let (x, y) = (eval_node(a, p)?, eval_node(b, p)?);
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => checked_div(x, y)?,
                BinOp::Pow => checked_pow(x, y)?,
            }
        }
    })
}

/// Second-order forward-mode value over at most four variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: [f64; 4],
    pub hess: [[f64; 4]; 4],
    n: usize,
}

impl Jet {
    pub fn constant(value: f64, n: usize) -> Jet {
        Jet { value, grad: [0.0; 4], hess: [[0.0; 4]; 4], n }
    }

    pub fn variable(value: f64, index: usize, n: usize) -> Jet {
        let mut j = Jet::constant(value, n);
        j.grad[index] = 1.0;
        j
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && (0..self.n).all(|i| self.grad[i].is_finite() && (0..self.n).all(|k| self.hess[i][k].is_finite()))
    }

    /// Compose with a scalar function given its value and first two derivatives.
    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Jet {
        let mut out = Jet::constant(f0, self.n);
        for i in 0..self.n {
            out.grad[i] = f1 * self.grad[i];
            for k in 0..self.n {
                out.hess[i][k] = f2 * self.grad[i] * self.grad[k] + f1 * self.hess[i][k];
            }
        }
        out
    }

    fn add(&self, o: &Jet, sign: f64) -> Jet {
        let mut out = *self;
        out.value += sign * o.value;
        for i in 0..self.n {
            out.grad[i] += sign * o.grad[i];
            for k in 0..self.n {
                out.hess[i][k] += sign * o.hess[i][k];
            }
        }
        out
    }

    fn mul(&self, o: &Jet) -> Jet {
        let mut out = Jet::constant(self.value * o.value, self.n);
        for i in 0..self.n {
            out.grad[i] = self.value * o.grad[i] + o.value * self.grad[i];
            for k in 0..self.n {
                out.hess[i][k] = self.value * o.hess[i][k]
                    + o.value * self.hess[i][k]
                    + self.grad[i] * o.grad[k]
                    + o.grad[i] * self.grad[k];
            }
        }
        out
    }

    fn recip(&self) -> Result<Jet, FieldError> {
        let v = self.value;
        if v.abs() < DIV_GUARD {
            return Err(FieldError::Domain("division by zero".into()));
        }
        Ok(self.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v)))
    }

    fn powc(&self, c: f64) -> Result<Jet, FieldError> {
        let v = self.value;
        if c == 0.0 {
            return Ok(Jet::constant(1.0, self.n));
        }
        if c == 1.0 {
            return Ok(*self);
        }
        if c.fract() == 0.0 && c.abs() < 1e9 {
            let k = c as i32;
            if v == 0.0 && k < 0 {
                return Err(FieldError::Domain("division by zero".into()));
            }
            let d2 = if k == 2 { 2.0 } else { c * (c - 1.0) * v.powi(k - 2) };
            return Ok(self.chain(v.powi(k), c * v.powi(k - 1), d2));
        }
        if v <= 0.0 {
            return Err(FieldError::Domain(format!(
                "non-integer power {c} of non-positive value {v} is not differentiable"
            )));
        }
        Ok(self.chain(v.powf(c), c * v.powf(c - 1.0), c * (c - 1.0) * v.powf(c - 2.0)))
    }

    fn apply(&self, func: Func) -> Result<Jet, FieldError> {
        let v = self.value;
        Ok(match func {
            Func::Exp => {
                let e = v.exp();
                self.chain(e, e, e)
            }
            Func::Sin => self.chain(v.sin(), v.cos(), -v.sin()),
            Func::Cos => self.chain(v.cos(), -v.sin(), -v.cos()),
            Func::Sqrt => {
                if v <= 0.0 {
                    return Err(FieldError::Domain(format!("sqrt of non-positive value {v} in derivative")));
                }
                let r = v.sqrt();
                self.chain(r, 0.5 / r, -0.25 / (r * v))
            }
            Func::Tanh => {
                let t = v.tanh();
                let d = 1.0 - t * t;
                self.chain(t, d, -2.0 * t * d)
            }
        })
    }
}

fn has_var(e: &Expr) -> bool {
    match e {
        Expr::Num(_) => false,
        Expr::Var(_) => true,
        Expr::Neg(a) | Expr::Call(_, a) => has_var(a),
        Expr::Bin(_, a, b) => has_var(a) || has_var(b),
    }
}

fn jet_node(e: &Expr, p: &[f64], n: usize) -> Result<Jet, FieldError> {
    Ok(match e {
        Expr::Num(v) => Jet::constant(*v, n),
        Expr::Var(i) => Jet::variable(p[*i], *i, n),
        Expr::Neg(a) => Jet::constant(0.0, n).add(&jet_node(a, p, n)?, -1.0),
        Expr::Call(func, a) => jet_node(a, p, n)?.apply(*func)?,
        Expr::Bin(op, a, b) => {
            let x = jet_node(a, p, n)?;
            match op {
                BinOp::Add => x.add(&jet_node(b, p, n)?, 1.0),
                BinOp::Sub => x.add(&jet_node(b, p, n)?, -1.0),
                BinOp::Mul => x.mul(&jet_node(b, p, n)?),
                BinOp::Div => x.mul(&jet_node(b, p, n)?.recip()?),
                BinOp::Pow => {
                    let y = jet_node(b, p, n)?;
                    if !has_var(b) {
                        x.powc(y.value)?
                    } else {
                        if x.value <= 0.0 {
                            return Err(FieldError::Domain("variable exponent needs a positive base".into()));
                        }
                        // a^b = exp(b ln a)
                        let ln = x.chain(x.value.ln(), 1.0 / x.value, -1.0 / (x.value * x.value));
                        y.mul(&ln).apply(Func::Exp)?
                    }
                }
            }
        }
    })
}

// ---------------------------------------------------------------- lexer

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Num(v) => write!(f, "number {v}"),
            Kind::Ident(s) => write!(f, "identifier `{s}`"),
            Kind::Op(c) => write!(f, "operator `{c}`"),
            Kind::LParen => write!(f, "`(`"),
            Kind::RParen => write!(f, "`)`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Kind,
    pos: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, FieldError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let pos = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            // optional exponent, only when followed by digits
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[pos..i];
            let v: f64 =
                text.parse().map_err(|_| FieldError::Syntax { pos, msg: format!("malformed number `{text}`") })?;
            out.push(Token { kind: Kind::Num(v), pos });
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { kind: Kind::Ident(src[pos..i].to_string()), pos });
        } else {
            let kind = match c {
                '+' | '-' | '*' | '/' | '^' => Kind::Op(c),
                '(' => Kind::LParen,
                ')' => Kind::RParen,
                _ => {
                    let ch = src[pos..].chars().next().unwrap_or(c);
                    return Err(FieldError::Syntax { pos, msg: format!("unexpected character `{ch}`") });
                }
            };
            out.push(Token { kind, pos });
            i += 1;
        }
    }
    Ok(out)
}

// --------------------------------------------------------------- parser

struct Parser {
    tokens: Vec<Token>,
    at: usize,
    dim: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.at)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.at).cloned();
        self.at += 1;
        t
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token { kind: Kind::Op(c), .. }) if ops.contains(c) => {
                let c = *c;
                self.at += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Expr, FieldError> {
        let mut lhs = self.term()?;
        while let Some(c) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, FieldError> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // -a^b parses as -(a^b)
    fn unary(&mut self) -> Result<Expr, FieldError> {
        if self.eat_op(&['-']).is_some() {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op(&['+']).is_some() {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, FieldError> {
        let base = self.primary()?;
        if self.eat_op(&['^']).is_some() {
            let exponent = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, FieldError> {
        let end = self.len;
        let Some(tok) = self.next() else {
            return Err(FieldError::Syntax { pos: end, msg: "unexpected end of input".into() });
        };
        match tok.kind {
            Kind::Num(v) => Ok(Expr::Num(v)),
            Kind::LParen => {
                let e = self.expr()?;
                self.expect_rparen(tok.pos)?;
                Ok(e)
            }
            Kind::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    match self.next() {
                        Some(Token { kind: Kind::LParen, pos }) => {
                            let arg = self.expr()?;
                            self.expect_rparen(pos)?;
                            Ok(Expr::Call(func, Box::new(arg)))
                        }
                        other => Err(FieldError::Syntax {
                            pos: other.map_or(end, |t| t.pos),
                            msg: format!("expected `(` after `{name}`"),
                        }),
                    }
                } else if let Some(index) = variable_index(&name) {
                    if index == 0 || index > self.dim {
                        return Err(FieldError::VariableOutOfRange { index, dim: self.dim, pos: tok.pos });
                    }
                    Ok(Expr::Var(index - 1))
                } else {
                    Err(FieldError::UnknownIdentifier { name, pos: tok.pos })
                }
            }
            other => Err(FieldError::Syntax { pos: tok.pos, msg: format!("unexpected {other}") }),
        }
    }

    fn expect_rparen(&mut self, open: usize) -> Result<(), FieldError> {
        match self.next() {
            Some(Token { kind: Kind::RParen, .. }) => Ok(()),
            Some(t) => Err(FieldError::Syntax { pos: t.pos, msg: format!("expected `)`, found {}", t.kind) }),
            None => Err(FieldError::Syntax { pos: open, msg: "unclosed `(`".into() }),
        }
    }
}

fn variable_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}
