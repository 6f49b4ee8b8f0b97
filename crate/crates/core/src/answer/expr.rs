//! Tokenizer, parser, and evaluator for the closed-form answer grammar.
//!
//! The grammar is deliberately small: rational constants, at most one symbol,
//! `+ - * /`, integer powers, square roots, `\frac`, and implicit
//! multiplication (`2n`, `n(n+1)`).

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

use super::surd::Surd;

const MAX_DEPTH: usize = 96;
const MAX_EXPONENT: i64 = 64;
const MAX_TOKENS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(BigRational),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Sqrt(Box<Expr>),
}

impl Expr {
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Sqrt(a) => a.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Evaluates with the (single) free symbol bound to `point`.
    pub fn eval(&self, point: Option<&BigRational>) -> Result<Value, EvalError> {
        match self {
            Expr::Num(r) => Ok(Value::Exact(Surd::rational(r.clone()))),
            Expr::Var(_) => point
                .map(|p| Value::Exact(Surd::rational(p.clone())))
                .ok_or(EvalError::Unbound),
            Expr::Neg(a) => Ok(a.eval(point)?.neg()),
            Expr::Add(a, b) => Value::add(a.eval(point)?, b.eval(point)?),
            Expr::Sub(a, b) => Value::add(a.eval(point)?, b.eval(point)?.neg()),
            Expr::Mul(a, b) => Value::mul(a.eval(point)?, b.eval(point)?),
            Expr::Div(a, b) => Value::div(a.eval(point)?, b.eval(point)?),
            Expr::Pow(a, e) => a.eval(point)?.pow(*e),
            Expr::Sqrt(a) => a.eval(point)?.sqrt(),
        }
    }
}

/// Fully parenthesized rendering; re-parsing the output yields an
/// expression that renders identically.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(r) => {
                if r.is_negative() {
                    write!(f, "(-{})", fmt_ratio(&-r.clone()))
                } else {
                    write!(f, "{}", fmt_ratio(r))
                }
            }
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a}+{b})"),
            Expr::Sub(a, b) => write!(f, "({a}-{b})"),
            Expr::Mul(a, b) => write!(f, "({a}*{b})"),
            Expr::Div(a, b) => write!(f, "({a}/{b})"),
            Expr::Pow(a, e) => {
                if *e < 0 {
                    write!(f, "({a}^(-{}))", -(*e as i64))
                } else {
                    write!(f, "({a}^{e})")
                }
            }
            Expr::Sqrt(a) => write!(f, "sqrt({a})"),
        }
    }
}

fn fmt_ratio(r: &BigRational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("({}/{})", r.numer(), r.denom())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalError {
    Pole,
    Domain,
    Unbound,
}

/// Result of evaluating an expression: exact `q·√d` when the arithmetic
/// stays inside that form, otherwise a double.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Exact(Surd),
    Approx(f64),
}

impl Value {
    pub fn to_f64(&self) -> f64 {
        match self {
            Value::Exact(s) => s.to_f64(),
            Value::Approx(x) => *x,
        }
    }

    fn exact_or_approx(s: Surd) -> Value {
        if s.is_oversized() {
            Value::Approx(s.to_f64())
        } else {
            Value::Exact(s)
        }
    }

    fn approx(x: f64) -> Result<Value, EvalError> {
        if x.is_finite() {
            Ok(Value::Approx(x))
        } else {
            Err(EvalError::Pole)
        }
    }

    fn neg(self) -> Value {
        match self {
            Value::Exact(s) => Value::Exact(s.neg()),
            Value::Approx(x) => Value::Approx(-x),
        }
    }

    fn add(a: Value, b: Value) -> Result<Value, EvalError> {
        if let (Value::Exact(x), Value::Exact(y)) = (&a, &b) {
            if let Some(s) = x.checked_add(y) {
                return Ok(Value::exact_or_approx(s));
            }
        }
        Value::approx(a.to_f64() + b.to_f64())
    }

    fn mul(a: Value, b: Value) -> Result<Value, EvalError> {
        match (&a, &b) {
            (Value::Exact(x), Value::Exact(y)) => match x.checked_mul(y) {
                Some(s) => Ok(Value::exact_or_approx(s)),
                None => Value::approx(x.to_f64() * y.to_f64()),
            },
            _ => Value::approx(a.to_f64() * b.to_f64()),
        }
    }

    fn div(a: Value, b: Value) -> Result<Value, EvalError> {
        match (&a, &b) {
            (_, Value::Exact(y)) if y.is_zero() => Err(EvalError::Pole),
            (Value::Exact(x), Value::Exact(y)) => match x.checked_div(y) {
                Some(s) => Ok(Value::exact_or_approx(s)),
                None => Value::approx(x.to_f64() / y.to_f64()),
            },
            _ => {
                let d = b.to_f64();
                if d == 0.0 {
                    Err(EvalError::Pole)
                } else {
                    Value::approx(a.to_f64() / d)
                }
            }
        }
    }

    fn pow(self, e: i32) -> Result<Value, EvalError> {
        if e < 0 {
            let base = Value::div(Value::Exact(Surd::one()), self)?;
            return base.pow(-e);
        }
        let mut acc = Value::Exact(Surd::one());
        for _ in 0..e {
            acc = Value::mul(acc, self.clone())?;
        }
        Ok(acc)
    }

    fn sqrt(self) -> Result<Value, EvalError> {
        match &self {
            Value::Exact(s) => {
                if s.is_negative() {
                    return Err(EvalError::Domain);
                }
                match s.sqrt() {
                    Some(r) => Ok(Value::Exact(r)),
                    None => Value::approx(s.to_f64().sqrt()),
                }
            }
            Value::Approx(x) if *x < 0.0 => Err(EvalError::Domain),
            Value::Approx(x) => Value::approx(x.sqrt()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(BigRational),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Frac,
    Sqrt,
}

fn tokenize(input: &str) -> Option<Vec<Token>> {
    let chars: Vec<char> = input.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if out.len() > MAX_TOKENS {
            return None;
        }
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                let lit: String = chars[start..i].iter().collect();
                out.push(Token::Num(parse_decimal_literal(&lit)?));
            }
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' | '\u{2212}' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' | '\u{00d7}' | '\u{00b7}' | '\u{22c5}' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' | '\u{00f7}' => {
                out.push(Token::Slash);
                i += 1;
            }
            '^' => {
                out.push(Token::Caret);
                i += 1;
            }
            '(' | '[' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' | ']' => {
                out.push(Token::RParen);
                i += 1;
            }
            '{' => {
                out.push(Token::LBrace);
                i += 1;
            }
            '}' => {
                out.push(Token::RBrace);
                i += 1;
            }
            '\u{221a}' => {
                out.push(Token::Sqrt);
                i += 1;
            }
            '\u{03c0}' => {
                out.push(Token::Ident("\\pi".into()));
                i += 1;
            }
            '\\' => {
                let start = i + 1;
                let mut j = start;
                while j < chars.len() && chars[j].is_ascii_alphabetic() {
                    j += 1;
                }
                if j == start {
                    return None;
                }
                let name: String = chars[start..j].iter().collect();
                i = j;
                match name.as_str() {
                    "frac" | "dfrac" | "tfrac" => out.push(Token::Frac),
                    "sqrt" => out.push(Token::Sqrt),
                    "cdot" | "times" => out.push(Token::Star),
                    "div" => out.push(Token::Slash),
                    "left" | "right" => {}
                    n if is_greek(n) => out.push(Token::Ident(format!("\\{n}"))),
                    _ => return None,
                }
            }
            c if c.is_ascii_alphabetic() => {
                if chars[i..].starts_with(&['s', 'q', 'r', 't']) {
                    out.push(Token::Sqrt);
                    i += 4;
                } else {
                    out.push(Token::Ident(c.to_string()));
                    i += 1;
                }
            }
            _ => return None,
        }
    }
    Some(out)
}

fn is_greek(name: &str) -> bool {
    matches!(
        name,
        "alpha"
            | "beta"
            | "gamma"
            | "delta"
            | "theta"
            | "lambda"
            | "mu"
            | "pi"
            | "phi"
            | "omega"
            | "tau"
            | "sigma"
    )
}

/// Exact value of a plain decimal literal such as `12`, `0.25`, or `.5`.
pub fn parse_decimal_literal(lit: &str) -> Option<BigRational> {
    let (int_part, frac_part) = match lit.split_once('.') {
        Some((a, b)) => (a, b),
        None => (lit, ""),
    };
    if frac_part.contains('.') || (int_part.is_empty() && frac_part.is_empty()) {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let numer: BigInt = if digits.is_empty() { BigInt::zero() } else { digits.parse().ok()? };
    let denom = num_traits::pow(BigInt::from(10), frac_part.len());
    Some(BigRational::new(numer, denom))
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    depth: usize,
}

/// Parses a normalized answer string into an expression tree.
pub fn parse_expr(input: &str) -> Option<Expr> {
    let tokens = tokenize(input)?;
    if tokens.is_empty() {
        return None;
    }
    let mut p = Parser { tokens, pos: 0, depth: 0 };
    let e = p.expr()?;
    if p.pos == p.tokens.len() {
        Some(e)
    } else {
        None
    }
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, t: &Token) -> bool {
        if self.peek() == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn enter(&mut self) -> Option<()> {
        self.depth += 1;
        (self.depth <= MAX_DEPTH).then_some(())
    }

    fn expr(&mut self) -> Option<Expr> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            if self.eat(&Token::Plus) {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(&Token::Minus) {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                break;
            }
        }
        self.depth -= 1;
        Some(lhs)
    }

    fn term(&mut self) -> Option<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(&Token::Star) {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(&Token::Slash) {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else if self.starts_implicit_factor() {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.power()?));
            } else {
                break;
            }
        }
        Some(lhs)
    }

    fn starts_implicit_factor(&self) -> bool {
        matches!(
            self.peek(),
            Some(Token::Ident(_) | Token::LParen | Token::LBrace | Token::Frac | Token::Sqrt)
        )
    }

    fn unary(&mut self) -> Option<Expr> {
        self.enter()?;
        let out = if self.eat(&Token::Minus) {
            Some(Expr::Neg(Box::new(self.unary()?)))
        } else if self.eat(&Token::Plus) {
            self.unary()
        } else {
            self.power()
        };
        self.depth -= 1;
        out
    }

    fn power(&mut self) -> Option<Expr> {
        let base = self.atom()?;
        if self.eat(&Token::Caret) {
            let exp = self.exponent()?;
            return Some(Expr::Pow(Box::new(base), exp));
        }
        Some(base)
    }

    fn exponent(&mut self) -> Option<i32> {
        let e = match self.peek()? {
            Token::Minus => {
                self.pos += 1;
                Expr::Neg(Box::new(self.atom()?))
            }
            _ => self.atom()?,
        };
        if !e.variables().is_empty() {
            return None;
        }
        match e.eval(None).ok()? {
            Value::Exact(s) => {
                let r = s.as_rational()?;
                if !r.is_integer() {
                    return None;
                }
                let v = r.to_integer().to_i64()?;
                (v.abs() <= MAX_EXPONENT).then_some(v as i32)
            }
            Value::Approx(_) => None,
        }
    }

    fn atom(&mut self) -> Option<Expr> {
        self.enter()?;
        let tok = self.peek()?.clone();
        self.pos += 1;
        let out = match tok {
            Token::Num(r) => Some(Expr::Num(r)),
            Token::Ident(name) => Some(Expr::Var(name)),
            Token::LParen => {
                let e = self.expr()?;
                self.eat(&Token::RParen).then_some(e)
            }
            Token::LBrace => {
                let e = self.expr()?;
                self.eat(&Token::RBrace).then_some(e)
            }
            Token::Frac => {
                let num = self.frac_arg()?;
                let den = self.frac_arg()?;
                Some(Expr::Div(Box::new(num), Box::new(den)))
            }
            Token::Sqrt => {
                let arg = match self.peek()? {
                    Token::LBrace | Token::LParen => self.atom()?,
                    _ => self.power()?,
                };
                Some(Expr::Sqrt(Box::new(arg)))
            }
            _ => None,
        };
        self.depth -= 1;
        out
    }

    /// `\frac{a}{b}` or the shorthand `\frac12`.
    fn frac_arg(&mut self) -> Option<Expr> {
        match self.peek()? {
            Token::LBrace => self.atom(),
            Token::Num(r) if r.is_integer() => {
                let digits = r.numer().to_string();
                let first = digits.chars().next()?;
                let rest = &digits[1..];
                let d: BigInt = BigInt::from(first.to_digit(10)?);
                if rest.is_empty() {
                    self.pos += 1;
                } else {
                    let tail: BigInt = rest.parse().ok()?;
                    self.tokens[self.pos] = Token::Num(BigRational::from_integer(tail));
                }
                Some(Expr::Num(BigRational::from_integer(d)))
            }
            Token::Ident(_) => self.atom(),
            _ => None,
        }
    }
}
