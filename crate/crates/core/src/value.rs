//! Record values.
//!
//! A value is one of five variants; floats must be finite. The canonical
//! text form (`f:`, `i:`, `s:`, `b:`, `x:` prefixes) is what snapshots,
//! scenarios, and policy documents use, and it round-trips exactly: floats
//! print in shortest round-trip form, strings are quoted only when they
//! contain characters outside the bare charset.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    #[serde(rename = "f")]
    F64(f64),
    #[serde(rename = "i")]
    I64(i64),
    #[serde(rename = "s")]
    Str(String),
    #[serde(rename = "b")]
    Bool(bool),
    #[serde(rename = "x")]
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ValueKind {
    Float,
    Int,
    Str,
    Bool,
    Bytes,
}

impl ValueKind {
    pub fn name(&self) -> &'static str {
        match self {
            ValueKind::Float => "float",
            ValueKind::Int => "int",
            ValueKind::Str => "string",
            ValueKind::Bool => "bool",
            ValueKind::Bytes => "bytes",
        }
    }

    pub fn parse(s: &str) -> Result<ValueKind> {
        match s {
            "float" => Ok(ValueKind::Float),
            "int" => Ok(ValueKind::Int),
            "string" => Ok(ValueKind::Str),
            "bool" => Ok(ValueKind::Bool),
            "bytes" => Ok(ValueKind::Bytes),
            other => Err(Error::InvalidValue(format!("unknown value kind {other}"))),
        }
    }
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::F64(_) => ValueKind::Float,
            Value::I64(_) => ValueKind::Int,
            Value::Str(_) => ValueKind::Str,
            Value::Bool(_) => ValueKind::Bool,
            Value::Bytes(_) => ValueKind::Bytes,
        }
    }

    /// Boundary check applied by every write path: floats must be finite.
    pub fn validate(&self) -> Result<()> {
        if let Value::F64(f) = self {
            if !f.is_finite() {
                return Err(Error::InvalidValue(format!("non-finite float {f}")));
            }
        }
        Ok(())
    }

    /// Numeric view used by summarization; integers widen to f64.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::F64(f) => Some(*f),
            Value::I64(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn canonical_text(&self) -> String {
        match self {
            Value::F64(f) => format!("f:{f}"),
            Value::I64(i) => format!("i:{i}"),
            Value::Str(s) => format!("s:{}", quote_if_needed(s)),
            Value::Bool(b) => format!("b:{b}"),
            Value::Bytes(b) => {
                let hex: String = b.iter().map(|x| format!("{x:02x}")).collect();
                format!("x:{hex}")
            }
        }
    }

    pub fn parse_canonical(text: &str) -> Result<Value> {
        let (tag, rest) = text
            .split_once(':')
            .ok_or_else(|| Error::InvalidValue(format!("missing tag in value {text:?}")))?;
        match tag {
            "f" => {
                let f: f64 = rest
                    .parse()
                    .map_err(|_| Error::InvalidValue(format!("bad float {rest:?}")))?;
                let v = Value::F64(f);
                v.validate()?;
                Ok(v)
            }
            "i" => rest
                .parse()
                .map(Value::I64)
                .map_err(|_| Error::InvalidValue(format!("bad int {rest:?}"))),
            "s" => Ok(Value::Str(unquote(rest)?)),
            "b" => match rest {
                "true" => Ok(Value::Bool(true)),
                "false" => Ok(Value::Bool(false)),
                _ => Err(Error::InvalidValue(format!("bad bool {rest:?}"))),
            },
            "x" => {
                if rest.len() % 2 != 0 || !rest.chars().all(|c| c.is_ascii_hexdigit()) {
                    return Err(Error::InvalidValue(format!("bad hex {rest:?}")));
                }
                let bytes = (0..rest.len())
                    .step_by(2)
                    .map(|i| u8::from_str_radix(&rest[i..i + 2], 16).unwrap())
                    .collect();
                Ok(Value::Bytes(bytes))
            }
            other => Err(Error::InvalidValue(format!("unknown value tag {other:?}"))),
        }
    }
}

/// Characters that may appear unquoted in canonical text (keys and strings).
pub fn is_bare(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "_./:@#+-".contains(c))
}

/// Quote a string for canonical output unless it is bare.
pub fn quote_if_needed(s: &str) -> String {
    if is_bare(s) {
        s.to_string()
    } else {
        let mut out = String::with_capacity(s.len() + 2);
        out.push('"');
        for c in s.chars() {
            match c {
                '"' => out.push_str("\\\""),
                '\\' => out.push_str("\\\\"),
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                '\t' => out.push_str("\\t"),
                '\0' => out.push_str("\\0"),
                c => out.push(c),
            }
        }
        out.push('"');
        out
    }
}

/// Inverse of [`quote_if_needed`].
pub fn unquote(s: &str) -> Result<String> {
    if !s.starts_with('"') {
        return Ok(s.to_string());
    }
    if s.len() < 2 || !s.ends_with('"') {
        return Err(Error::InvalidValue(format!("unterminated quote in {s:?}")));
    }
    let inner = &s[1..s.len() - 1];
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('"') => out.push('"'),
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some('t') => out.push('\t'),
                Some('0') => out.push('\0'),
                other => {
                    return Err(Error::InvalidValue(format!("bad escape {other:?}")));
                }
            }
        } else if c == '"' {
            return Err(Error::InvalidValue(format!("stray quote in {s:?}")));
        } else {
            out.push(c);
        }
    }
    Ok(out)
}
