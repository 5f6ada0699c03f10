//! S-expression reading and canonical printing for guards, bodies and formulas.

use lexpr::Value;
use thiserror::Error;

use crate::mc::Formula;
use crate::skeleton::{Body, Branch, GuardExpr, Pid, PropRef};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("s-expression syntax: {0}")]
    Syntax(String),
    #[error("malformed {what}: {text}")]
    Malformed { what: &'static str, text: String },
}

fn malformed(what: &'static str, v: &Value) -> ParseError {
    ParseError::Malformed { what, text: v.to_string() }
}

fn read(text: &str) -> Result<Value, ParseError> {
    lexpr::from_str(text).map_err(|e| ParseError::Syntax(e.to_string()))
}

/// Symbols, numbers and strings all read as plain tokens.
fn atom(v: &Value) -> Option<String> {
    match v {
        Value::Symbol(s) => Some(s.to_string()),
        Value::String(s) => Some(s.to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Keyword(k) => Some(k.to_string()),
        Value::Bool(b) => Some(if *b { "true".into() } else { "false".into() }),
        _ => None,
    }
}

/// Splits `(head arg ...)` into the head token and arguments.
fn form(v: &Value) -> Option<(String, Vec<&Value>)> {
    let mut it = v.list_iter()?;
    let head = atom(it.next()?)?;
    Some((head, it.collect()))
}

pub fn parse_guard(text: &str) -> Result<GuardExpr, ParseError> {
    guard_from_value(&read(text)?)
}

fn guard_from_value(v: &Value) -> Result<GuardExpr, ParseError> {
    if let Some(a) = atom(v) {
        return match a.as_str() {
            "true" => Ok(GuardExpr::True),
            "false" => Ok(GuardExpr::False),
            _ => Err(malformed("guard", v)),
        };
    }
    let (head, args) = form(v).ok_or_else(|| malformed("guard", v))?;
    match (head.as_str(), args.as_slice()) {
        ("prop", [p, n]) => {
            let (p, n) = (atom(p), atom(n));
            match (p, n) {
                (Some(p), Some(n)) => Ok(GuardExpr::Prop(PropRef::new(p, n))),
                _ => Err(malformed("guard", v)),
            }
        }
        ("eq", [x, val]) => match (atom(x), atom(val)) {
            (Some(x), Some(val)) => Ok(GuardExpr::VarEq { var: x, value: val }),
            _ => Err(malformed("guard", v)),
        },
        ("not", [g]) => Ok(GuardExpr::not(guard_from_value(g)?)),
        ("and", gs) => Ok(GuardExpr::And(gs.iter().map(|g| guard_from_value(g)).collect::<Result<_, _>>()?)),
        ("or", gs) => Ok(GuardExpr::Or(gs.iter().map(|g| guard_from_value(g)).collect::<Result<_, _>>()?)),
        _ => Err(malformed("guard", v)),
    }
}

pub fn guard_to_string(g: &GuardExpr) -> String {
    match g {
        GuardExpr::True => "true".into(),
        GuardExpr::False => "false".into(),
        GuardExpr::Prop(p) => format!("(prop {} {})", p.owner, p.name),
        GuardExpr::VarEq { var, value } => format!("(eq {var} {value})"),
        GuardExpr::Not(h) => format!("(not {})", guard_to_string(h)),
        GuardExpr::And(gs) => nary("and", gs.iter().map(guard_to_string)),
        GuardExpr::Or(gs) => nary("or", gs.iter().map(guard_to_string)),
    }
}

fn nary(head: &str, parts: impl Iterator<Item = String>) -> String {
    let mut s = format!("({head}");
    for p in parts {
        s.push(' ');
        s.push_str(&p);
    }
    s.push(')');
    s
}

pub fn parse_body(text: &str) -> Result<Body, ParseError> {
    let v = read(text)?;
    let (head, args) = form(&v).ok_or_else(|| malformed("body", &v))?;
    if head != "set" {
        return Err(malformed("body", &v));
    }
    let mut out = Body::empty();
    for a in args {
        let (x, rest) = form(a).ok_or_else(|| malformed("body", &v))?;
        match rest.as_slice() {
            [val] => {
                let val = atom(val).ok_or_else(|| malformed("body", &v))?;
                if out.0.insert(x, val).is_some() {
                    return Err(malformed("body (variable assigned twice)", &v));
                }
            }
            _ => return Err(malformed("body", &v)),
        }
    }
    Ok(out)
}

pub fn body_to_string(b: &Body) -> String {
    nary("set", b.0.iter().map(|(k, v)| format!("({k} {v})")))
}

/// Canonical form of a branch; defines the branch order inside a guarded command.
pub fn branch_to_string(b: &Branch) -> String {
    format!("{} {}", guard_to_string(&b.guard), body_to_string(&b.body))
}

pub fn parse_formula(text: &str) -> Result<Formula, ParseError> {
    formula_from_value(&read(text)?)
}

fn formula_from_value(v: &Value) -> Result<Formula, ParseError> {
    use Formula as F;
    if let Some(a) = atom(v) {
        return match a.as_str() {
            "true" => Ok(F::True),
            "false" => Ok(F::False),
            _ => Err(malformed("formula", v)),
        };
    }
    let (head, args) = form(v).ok_or_else(|| malformed("formula", v))?;
    let sub = |x: &Value| formula_from_value(x).map(Box::new);
    let pid = |x: &Value| atom(x).map(Pid).ok_or_else(|| malformed("formula", v));
    Ok(match (head.as_str(), args.as_slice()) {
        ("prop", [p, n]) => match (atom(p), atom(n)) {
            (Some(p), Some(n)) => F::Prop(PropRef::new(p, n)),
            _ => return Err(malformed("formula", v)),
        },
        ("eq", [x, val]) => match (atom(x), atom(val)) {
            (Some(x), Some(val)) => F::VarEq { var: x, value: val },
            _ => return Err(malformed("formula", v)),
        },
        ("not", [p]) => {
            let inner = formula_from_value(p)?;
            inner.negate_propositional().ok_or_else(|| malformed("formula (negation of a temporal formula)", v))?
        }
        ("implies", [a, b]) => {
            let na = formula_from_value(a)?
                .negate_propositional()
                .ok_or_else(|| malformed("formula (temporal antecedent)", v))?;
            F::Or(vec![na, formula_from_value(b)?])
        }
        ("and", fs) => F::And(fs.iter().map(|x| formula_from_value(x)).collect::<Result<_, _>>()?),
        ("or", fs) => F::Or(fs.iter().map(|x| formula_from_value(x)).collect::<Result<_, _>>()?),
        ("AG", [f]) => F::AG(sub(f)?),
        ("AF", [f]) => F::AF(sub(f)?),
        ("EF", [f]) => F::EF(sub(f)?),
        ("AX", [p, f]) => F::AX(pid(p)?, sub(f)?),
        ("EX", [p, f]) => F::EX(pid(p)?, sub(f)?),
        ("AU", [f, g]) => F::AU(sub(f)?, sub(g)?),
        ("AUw", [f, g]) => F::AUw(sub(f)?, sub(g)?),
        ("leads-weak", [f, g]) => F::LeadsToWeak(sub(f)?, sub(g)?),
        ("leads", [f, g]) => F::LeadsTo(sub(f)?, sub(g)?),
        _ => return Err(malformed("formula", v)),
    })
}

pub fn formula_to_string(f: &Formula) -> String {
    use Formula as F;
    let s = formula_to_string;
    match f {
        F::True => "true".into(),
        F::False => "false".into(),
        F::Prop(p) => format!("(prop {} {})", p.owner, p.name),
        F::NegProp(p) => format!("(not (prop {} {}))", p.owner, p.name),
        F::VarEq { var, value } => format!("(eq {var} {value})"),
        F::NegVarEq { var, value } => format!("(not (eq {var} {value}))"),
        F::And(fs) => nary("and", fs.iter().map(s)),
        F::Or(fs) => nary("or", fs.iter().map(s)),
        F::AX(j, g) => format!("(AX {j} {})", s(g)),
        F::EX(j, g) => format!("(EX {j} {})", s(g)),
        F::AU(a, b) => format!("(AU {} {})", s(a), s(b)),
        F::AUw(a, b) => format!("(AUw {} {})", s(a), s(b)),
        F::AG(g) => format!("(AG {})", s(g)),
        F::AF(g) => format!("(AF {})", s(g)),
        F::EF(g) => format!("(EF {})", s(g)),
        F::LeadsToWeak(a, b) => format!("(leads-weak {} {})", s(a), s(b)),
        F::LeadsTo(a, b) => format!("(leads {} {})", s(a), s(b)),
    }
}
