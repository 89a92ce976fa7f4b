//! Line-oriented `key=value` reports used by the CLI stats and bench output.

use std::collections::BTreeMap;
use std::fmt::{self, Display};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        let key = key.into();
        debug_assert!(!key.contains('=') && !key.contains('\n'));
        self.entries.push((key, value.to_string()));
        self
    }

    pub fn push_list<T: Display>(&mut self, key: impl Into<String>, values: &[T]) -> &mut Self {
        let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        self.push(key, joined)
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

impl Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Parse `key=value` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_report(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed("report", format!("line {} has no '='", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Look up and parse one value.
pub fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::malformed("report", format!("missing key {key}")))?
        .parse()
        .map_err(|_| Error::malformed("report", format!("unparsable value for {key}")))
}

/// Parse a comma-separated list value.
pub fn get_list<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::malformed("report", format!("missing key {key}")))?;
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::malformed("report", format!("unparsable list item in {key}")))
        })
        .collect()
}
