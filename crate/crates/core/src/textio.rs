//! Small helpers shared by the line-oriented text formats.

use std::str::FromStr;

/// A parse failure with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct LineError {
    pub line: usize,
    pub msg: String,
}

impl LineError {
    pub fn new(line: usize, msg: impl Into<String>) -> Self {
        Self { line, msg: msg.into() }
    }
}

/// Iterates non-empty, non-comment lines as `(line_number, trimmed_text)`.
pub fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_num<T: FromStr>(tok: &str, line: usize, what: &str) -> Result<T, LineError> {
    tok.trim()
        .parse::<T>()
        .map_err(|_| LineError::new(line, format!("invalid {what}: {tok:?}")))
}

/// Parses a finite `f64`.
pub fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64, LineError> {
    let v: f64 = parse_num(tok, line, what)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LineError::new(line, format!("{what} is not finite")))
    }
}

/// Formats microseconds as seconds with exactly six decimals.
pub fn fmt_micros(us: i64) -> String {
    let sign = if us < 0 { "-" } else { "" };
    let a = us.unsigned_abs();
    format!("{sign}{}.{:06}", a / 1_000_000, a % 1_000_000)
}

/// Inverse of [`fmt_micros`]; rejects anything but `[-]digits.digits{6}`.
pub fn parse_micros(tok: &str, line: usize) -> Result<i64, LineError> {
    let bad = || LineError::new(line, format!("invalid timestamp: {tok:?}"));
    let (neg, body) = match tok.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, tok),
    };
    let (secs, frac) = body.split_once('.').ok_or_else(bad)?;
    if secs.is_empty()
        || frac.len() != 6
        || !secs.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(bad());
    }
    let s: i64 = secs.parse().map_err(|_| bad())?;
    let f: i64 = frac.parse().map_err(|_| bad())?;
    let v = s.checked_mul(1_000_000).and_then(|v| v.checked_add(f)).ok_or_else(bad)?;
    Ok(if neg { -v } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micros_round_trip() {
        for us in [0, 1, 999_999, 1_000_000, 20_000, 123_456_789, -5] {
            assert_eq!(parse_micros(&fmt_micros(us), 1).unwrap(), us);
        }
        assert!(parse_micros("1.5", 1).is_err());
        assert!(parse_micros("x.000000", 1).is_err());
        assert!(parse_micros("99999999999999999.000000", 1).is_err());
    }
}
