//! Final-answer normalization and equivalence.
//!
//! [`parse_answer`] turns a boxed answer string into an [`AnswerForm`] with a
//! canonical rendering; [`answers_equivalent`] decides whether two forms name
//! the same answer.

mod expr;
mod surd;

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use expr::{parse_expr, EvalError, Expr, Value};
pub use surd::{ratio_to_f64, squarefree_split_u64, Surd};

/// Relative tolerance for comparisons that leave exact arithmetic.
pub const RELATIVE_TOLERANCE: f64 = 1e-9;

/// Points at which single-variable answers are compared.
pub const SAMPLE_POINTS: [i64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Minimum number of pole-free sample points for a symbolic comparison.
pub const MIN_VALID_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Integer,
    Rational,
    Decimal,
    Radical,
    BooleanYesNo,
    ChoiceLetter,
    SymbolicExpr,
}

impl AnswerKind {
    pub const ALL: [AnswerKind; 7] = [
        AnswerKind::Integer,
        AnswerKind::Rational,
        AnswerKind::Decimal,
        AnswerKind::Radical,
        AnswerKind::BooleanYesNo,
        AnswerKind::ChoiceLetter,
        AnswerKind::SymbolicExpr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerKind::Integer => "integer",
            AnswerKind::Rational => "rational",
            AnswerKind::Decimal => "decimal",
            AnswerKind::Radical => "radical",
            AnswerKind::BooleanYesNo => "boolean_yes_no",
            AnswerKind::ChoiceLetter => "choice_letter",
            AnswerKind::SymbolicExpr => "symbolic_expr",
        }
    }
}

impl fmt::Display for AnswerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Numeric content of an answer, when it has one.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericValue {
    /// Integers, fractions, and decimals (decimals keep their exact digits).
    Rational(BigRational),
    /// `coeff·√radicand` with a squarefree radicand greater than one.
    Radical(Surd),
    /// Constant closed forms outside the two exact shapes above.
    Real(f64),
}

impl NumericValue {
    pub fn to_f64(&self) -> f64 {
        match self {
            NumericValue::Rational(r) => ratio_to_f64(r),
            NumericValue::Radical(s) => s.to_f64(),
            NumericValue::Real(x) => *x,
        }
    }

    fn as_surd(&self) -> Option<Surd> {
        match self {
            NumericValue::Rational(r) => Some(Surd::rational(r.clone())),
            NumericValue::Radical(s) => Some(s.clone()),
            NumericValue::Real(_) => None,
        }
    }
}

/// A parsed, canonicalized final answer.
#[derive(Debug, Clone)]
pub struct AnswerForm {
    kind: AnswerKind,
    canonical: String,
    value: Option<NumericValue>,
    variables: BTreeSet<String>,
    expr: Option<Expr>,
    unit: Option<String>,
}

impl AnswerForm {
    pub fn kind(&self) -> AnswerKind {
        self.kind
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn numeric_value(&self) -> Option<&NumericValue> {
        self.value.as_ref()
    }

    pub fn variables(&self) -> &BTreeSet<String> {
        &self.variables
    }

    /// Trailing unit token removed during parsing (`"5 cm"` → `"cm"`).
    pub fn stripped_unit(&self) -> Option<&str> {
        self.unit.as_deref()
    }

    fn simple(kind: AnswerKind, canonical: String, value: Option<NumericValue>) -> Self {
        AnswerForm { kind, canonical, value, variables: BTreeSet::new(), expr: None, unit: None }
    }

    fn from_rational(r: BigRational) -> Self {
        let (kind, canonical) = if r.is_integer() {
            (AnswerKind::Integer, r.numer().to_string())
        } else {
            (AnswerKind::Rational, format!("{}/{}", r.numer(), r.denom()))
        };
        AnswerForm::simple(kind, canonical, Some(NumericValue::Rational(r)))
    }

    fn from_surd(s: Surd) -> Self {
        if let Some(r) = s.as_rational() {
            return AnswerForm::from_rational(r.clone());
        }
        let canonical = render_radical(&s);
        AnswerForm::simple(AnswerKind::Radical, canonical, Some(NumericValue::Radical(s)))
    }
}

/// Equality of parsed forms is equality of their canonical rendering.
impl PartialEq for AnswerForm {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.canonical == other.canonical && self.unit == other.unit
    }
}

impl Eq for AnswerForm {}

impl fmt::Display for AnswerForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

#[derive(Serialize, Deserialize)]
struct AnswerRepr {
    kind: AnswerKind,
    canonical: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<String>,
}

impl Serialize for AnswerForm {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        AnswerRepr { kind: self.kind, canonical: self.canonical.clone(), unit: self.unit.clone() }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AnswerForm {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = AnswerRepr::deserialize(deserializer)?;
        let mut form = parse_answer(&repr.canonical).ok_or_else(|| {
            serde::de::Error::custom(format!("unparseable canonical answer {:?}", repr.canonical))
        })?;
        if form.kind != repr.kind {
            return Err(serde::de::Error::custom(format!(
                "canonical answer {:?} parses as {}, not {}",
                repr.canonical, form.kind, repr.kind
            )));
        }
        form.unit = repr.unit;
        Ok(form)
    }
}

fn render_radical(s: &Surd) -> String {
    let q = s.coeff();
    let d = s.radicand();
    let neg = if q.is_negative() { "-" } else { "" };
    let a = q.numer().abs();
    let b = q.denom();
    let root = format!("\\sqrt{{{d}}}");
    let top = if a.is_one() { root } else { format!("{a}{root}") };
    if b.is_one() {
        format!("{neg}{top}")
    } else {
        format!("{neg}\\frac{{{top}}}{{{b}}}")
    }
}

fn render_decimal(lit: &str) -> Option<String> {
    let (neg, body) = match lit.as_bytes().first()? {
        b'-' => (true, &lit[1..]),
        b'+' => (false, &lit[1..]),
        _ => (false, lit),
    };
    let (int_part, frac_part) = body.split_once('.')?;
    let int_trim = int_part.trim_start_matches('0');
    let int_norm = if int_trim.is_empty() { "0" } else { int_trim };
    let frac_trim = frac_part.trim_end_matches('0');
    let frac_norm = if frac_trim.is_empty() { "0" } else { frac_trim };
    let is_zero = int_norm == "0" && frac_norm == "0";
    let sign = if neg && !is_zero { "-" } else { "" };
    Some(format!("{sign}{int_norm}.{frac_norm}"))
}

fn is_decimal_literal(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    match body.split_once('.') {
        Some((a, b)) => {
            (!a.is_empty() || !b.is_empty())
                && a.chars().all(|c| c.is_ascii_digit())
                && b.chars().all(|c| c.is_ascii_digit())
                && !b.is_empty()
        }
        None => false,
    }
}

fn integer_literal(s: &str) -> Option<BigInt> {
    let (sign, body) = match s.as_bytes().first()? {
        b'-' => ("-", &s[1..]),
        b'+' => ("", &s[1..]),
        _ => ("", s),
    };
    if body.is_empty() {
        return None;
    }
    let digits: String = if body.contains(',') {
        let groups: Vec<&str> = body.split(',').collect();
        let first_ok = (1..=3).contains(&groups[0].len());
        let rest_ok = groups[1..].iter().all(|g| g.len() == 3);
        if !first_ok || !rest_ok {
            return None;
        }
        groups.concat()
    } else {
        body.to_string()
    };
    if !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    format!("{sign}{digits}").parse().ok()
}

/// Content of a `\cmd{...}` wrapper spanning the whole string.
fn unwrap_command<'a>(s: &'a str, commands: &[&str]) -> Option<&'a str> {
    for cmd in commands {
        if let Some(rest) = s.strip_prefix(cmd) {
            let rest = rest.trim_start();
            if rest.starts_with('{') {
                let close = matching_brace(rest, 0)?;
                if close == rest.len() - 1 {
                    return Some(&rest[1..close]);
                }
            }
        }
    }
    None
}

/// Byte index of the `}` closing the `{` at `open`.
pub(crate) fn matching_brace(s: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in s[open..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(open + i);
                }
            }
            _ => {}
        }
    }
    None
}

const TEXT_COMMANDS: [&str; 5] = ["\\text", "\\textbf", "\\mathrm", "\\mbox", "\\textrm"];

/// Strips delimiters, spacing commands, and a trailing unit.
fn normalize(text: &str) -> (String, Option<String>) {
    let mut s = text.trim().replace('\u{2212}', "-");
    for (from, to) in [("\\!", ""), ("\\,", ""), ("\\;", ""), ("\\:", ""), ("\\ ", " "), ("{,}", ","), ("\\dfrac", "\\frac"), ("\\tfrac", "\\frac")] {
        s = s.replace(from, to);
    }
    loop {
        let t = s.trim();
        let next = if let Some(inner) = t.strip_prefix("$$").and_then(|x| x.strip_suffix("$$")) {
            inner
        } else if let Some(inner) = t.strip_prefix('$').and_then(|x| x.strip_suffix('$')) {
            inner
        } else if let Some(inner) = t.strip_prefix("\\(").and_then(|x| x.strip_suffix("\\)")) {
            inner
        } else if let Some(inner) = t.strip_prefix("\\[").and_then(|x| x.strip_suffix("\\]")) {
            inner
        } else if let Some(inner) = unwrap_command(t, &["\\boxed", "\\fbox"]) {
            inner
        } else if let Some(inner) = unwrap_command(t, &TEXT_COMMANDS) {
            inner
        } else if t.len() > 1 && t.ends_with('.') && !t[..t.len() - 1].ends_with('.') {
            &t[..t.len() - 1]
        } else {
            break;
        };
        s = next.to_string();
    }
    let mut s = s.trim().to_string();
    // `x = 5` → `5`
    if let Some((lhs, rhs)) = s.split_once('=') {
        let lhs = lhs.trim();
        if lhs.len() == 1 && lhs.chars().all(|c| c.is_ascii_alphabetic()) && !rhs.contains('=') {
            s = rhs.trim().to_string();
        }
    }
    let (body, unit) = strip_unit(&s);
    (body.trim().to_string(), unit)
}

fn strip_unit(s: &str) -> (String, Option<String>) {
    for suffix in ["^\\circ", "^{\\circ}", "\u{00b0}", "\\degree"] {
        if let Some(body) = s.strip_suffix(suffix) {
            if !body.trim().is_empty() {
                return (body.to_string(), Some("degrees".into()));
            }
        }
    }
    for suffix in ["\\%", "%"] {
        if let Some(body) = s.strip_suffix(suffix) {
            if !body.trim().is_empty() {
                return (body.to_string(), Some("%".into()));
            }
        }
    }
    if s.ends_with('}') {
        for cmd in TEXT_COMMANDS {
            if let Some(pos) = s.rfind(cmd) {
                let after = &s[pos + cmd.len()..];
                let open = pos + cmd.len() + (after.len() - after.trim_start().len());
                if s[open..].starts_with('{') && matching_brace(s, open) == Some(s.len() - 1) {
                    let body = &s[..pos];
                    let unit = s[open + 1..s.len() - 1].trim();
                    if !body.trim().is_empty() && !unit.is_empty() {
                        return (body.to_string(), Some(unit.to_string()));
                    }
                }
            }
        }
    }
    if let Some((body, last)) = s.rsplit_once(char::is_whitespace) {
        let is_word = last.len() >= 2 && last.chars().all(|c| c.is_ascii_alphabetic());
        if is_word && !body.trim().is_empty() && last != "sqrt" {
            return (body.to_string(), Some(last.to_string()));
        }
    }
    (s.to_string(), None)
}

/// Parses an answer string. Returns `None` for anything outside the answer
/// grammar (multi-variable expressions, prose, proofs).
pub fn parse_answer(text: &str) -> Option<AnswerForm> {
    if text.len() > 2048 {
        return None;
    }
    let (body, unit) = normalize(text);
    let mut form = classify(&body)?;
    if unit.is_some() && !form.variables.is_empty() {
        return None;
    }
    form.unit = unit;
    Some(form)
}

fn classify(s: &str) -> Option<AnswerForm> {
    if s.is_empty() {
        return None;
    }
    if let Some(letter) = choice_letter(s) {
        return Some(AnswerForm::simple(AnswerKind::ChoiceLetter, letter.to_string(), None));
    }
    match s.to_ascii_lowercase().as_str() {
        "yes" | "true" => return Some(AnswerForm::simple(AnswerKind::BooleanYesNo, "yes".into(), None)),
        "no" | "false" => return Some(AnswerForm::simple(AnswerKind::BooleanYesNo, "no".into(), None)),
        _ => {}
    }
    if let Some(n) = integer_literal(s) {
        return Some(AnswerForm::from_rational(BigRational::from_integer(n)));
    }
    if is_decimal_literal(s) {
        let canonical = render_decimal(s)?;
        let body = canonical.strip_prefix('-');
        let magnitude = expr::parse_decimal_literal(body.unwrap_or(&canonical))?;
        let value = if body.is_some() { -magnitude } else { magnitude };
        return Some(AnswerForm::simple(AnswerKind::Decimal, canonical, Some(NumericValue::Rational(value))));
    }
    let e = parse_expr(s)?;
    let variables = e.variables();
    match variables.len() {
        0 => match e.eval(None).ok()? {
            Value::Exact(surd) => Some(AnswerForm::from_surd(surd)),
            Value::Approx(x) => Some(AnswerForm {
                kind: AnswerKind::SymbolicExpr,
                canonical: e.to_string(),
                value: Some(NumericValue::Real(x)),
                variables,
                expr: Some(e),
                unit: None,
            }),
        },
        1 => Some(AnswerForm {
            kind: AnswerKind::SymbolicExpr,
            canonical: e.to_string(),
            value: None,
            variables,
            expr: Some(e),
            unit: None,
        }),
        _ => None,
    }
}

fn choice_letter(s: &str) -> Option<char> {
    let inner = s
        .strip_prefix('(')
        .and_then(|x| x.strip_suffix(')'))
        .unwrap_or(s);
    let mut chars = inner.chars();
    let c = chars.next()?;
    (chars.next().is_none() && ('A'..='D').contains(&c)).then_some(c)
}

fn within_tolerance(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    if !a.is_finite() || !b.is_finite() {
        return false;
    }
    (a - b).abs() <= RELATIVE_TOLERANCE * a.abs().max(b.abs())
}

fn values_match(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Exact(x), Value::Exact(y)) => x == y,
        _ => within_tolerance(a.to_f64(), b.to_f64()),
    }
}

/// Compares two single-variable expressions at the fixed sample points.
/// Points where either side has a pole or leaves the real domain are
/// skipped; fewer than [`MIN_VALID_POINTS`] usable points means "not
/// equivalent".
pub fn symbolic_equivalent(a: &Expr, b: &Expr) -> bool {
    let mut valid = 0;
    for p in SAMPLE_POINTS {
        let x = BigRational::from_integer(BigInt::from(p));
        let (va, vb) = match (a.eval(Some(&x)), b.eval(Some(&x))) {
            (Ok(va), Ok(vb)) => (va, vb),
            _ => continue,
        };
        valid += 1;
        if !values_match(&va, &vb) {
            return false;
        }
    }
    valid >= MIN_VALID_POINTS
}

/// Decides whether two parsed answers are the same answer.
pub fn answers_equivalent(a: &AnswerForm, b: &AnswerForm) -> bool {
    use AnswerKind::*;
    match (a.kind, b.kind) {
        (BooleanYesNo, BooleanYesNo) | (ChoiceLetter, ChoiceLetter) => a.canonical == b.canonical,
        (BooleanYesNo | ChoiceLetter, _) | (_, BooleanYesNo | ChoiceLetter) => false,
        _ if !a.variables.is_empty() || !b.variables.is_empty() => {
            if a.variables != b.variables {
                return false;
            }
            match (&a.expr, &b.expr) {
                (Some(x), Some(y)) => symbolic_equivalent(x, y),
                _ => false,
            }
        }
        _ => {
            let (Some(va), Some(vb)) = (&a.value, &b.value) else {
                return false;
            };
            let inexact = a.kind == Decimal || b.kind == Decimal;
            match (va.as_surd(), vb.as_surd()) {
                (Some(x), Some(y)) if !inexact => x == y,
                _ => within_tolerance(va.to_f64(), vb.to_f64()),
            }
        }
    }
}
