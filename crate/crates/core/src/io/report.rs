//! Flat `key value` text records, one pair per line.

use std::path::Path;

use crate::error::{Error, Result};

use super::{read_file, write_file};

pub fn format_report<K: AsRef<str>, V: AsRef<str>>(entries: &[(K, V)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k.as_ref());
        s.push(' ');
        s.push_str(v.as_ref());
        s.push('\n');
    }
    s
}

pub fn parse_report(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Config(format!("report line {}: expected `key value`", i + 1)))?;
            Ok((k.to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn write_report<K: AsRef<str>, V: AsRef<str>>(path: impl AsRef<Path>, entries: &[(K, V)]) -> Result<()> {
    write_file(path.as_ref(), format_report(entries).as_bytes())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let bytes = read_file(path.as_ref())?;
    parse_report(&String::from_utf8_lossy(&bytes))
}
