//! Shared helpers for the line-oriented record formats.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::str::FromStr;

/// Formats a float with 17 significant digits, which round-trips exactly.
pub(crate) fn exact(x: f64) -> String {
    format!("{:.16e}", x)
}

pub(crate) fn parse<T: FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field
        .trim()
        .parse::<T>()
        .map_err(|_| Error::format(line, format!("non-numeric {what}: {field:?}")))
}

/// Parses a `magic k=v k=v ...` header line.
pub(crate) fn parse_header(
    text: &str,
    magic: &str,
    version: &str,
) -> Result<BTreeMap<String, String>> {
    let mut tokens = text.split_whitespace();
    match tokens.next() {
        Some(m) if m == magic => {}
        _ => return Err(Error::format(1, format!("expected `{magic}` header"))),
    }
    let mut map = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::format(1, format!("malformed header field {tok:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    match map.get("v").map(String::as_str) {
        Some(v) if v == version => Ok(map),
        Some(v) => Err(Error::format(
            1,
            format!("unsupported version {v}, expected {version}"),
        )),
        None => Err(Error::format(1, "missing version field")),
    }
}

pub(crate) fn header_field<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::format(1, format!("missing header field `{key}`")))?;
    parse(raw, 1, key)
}

pub(crate) fn join_exact(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(exact).collect::<Vec<_>>().join(",")
}
