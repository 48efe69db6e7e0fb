//! Small helpers shared by the plain-text file formats.

use std::path::Path;

use crate::error::{Error, Result};

/// Shortest representation that parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn join_floats<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values.into_iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

pub fn parse_floats(text: &str, path: &Path, line: usize) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| Error::parse(path, line, format!("bad number `{tok}`: {e}")))
        })
        .collect()
}

/// Parses `k1=v1 k2=v2 ...` with exactly the given keys in order.
pub fn parse_header<'a>(text: &'a str, keys: &[&str], path: &Path, line: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != keys.len() {
        return Err(Error::parse(
            path,
            line,
            format!("header needs fields {}", keys.join(", ")),
        ));
    }
    fields
        .iter()
        .zip(keys)
        .map(|(field, key)| {
            field
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .ok_or_else(|| Error::parse(path, line, format!("expected `{key}=...`, found `{field}`")))
        })
        .collect()
}

pub fn parse_value<T: std::str::FromStr>(text: &str, key: &str, path: &Path, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    text.parse::<T>()
        .map_err(|e| Error::parse(path, line, format!("bad value for {key}: {e}")))
}
