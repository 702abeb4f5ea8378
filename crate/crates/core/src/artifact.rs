//! Header line and tab-separated helpers shared by every artifact writer.

use std::fmt;

use sha2::{Digest, Sha256};

pub const TOOL_NAME: &str = "codesearch";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance line written at the top of every artifact file.
///
/// Rendered as `# codesearch <version> config=<hash> seed=<seed>`. Readers skip
/// any line starting with `#`, so headers never interfere with parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl ArtifactHeader {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn parse(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# ")?.strip_prefix(TOOL_NAME)?.trim();
        let mut parts = rest.split_whitespace();
        let tool_version = parts.next()?.to_string();
        let config_hash = parts.next()?.strip_prefix("config=")?.to_string();
        let seed = parts.next()?.strip_prefix("seed=")?.parse().ok()?;
        Some(Self {
            tool_version,
            config_hash,
            seed,
        })
    }
}

impl fmt::Display for ArtifactHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "# {TOOL_NAME} {} config={} seed={}",
            self.tool_version, self.config_hash, self.seed
        )
    }
}

/// Stable hash of a configuration given as key/value pairs (order-insensitive).
pub fn config_hash<K, V, I>(entries: I) -> String
where
    K: AsRef<str>,
    V: AsRef<str>,
    I: IntoIterator<Item = (K, V)>,
{
    let mut lines: Vec<String> = entries
        .into_iter()
        .map(|(k, v)| format!("{}={}\n", k.as_ref(), v.as_ref()))
        .collect();
    lines.sort();
    let mut hasher = Sha256::new();
    for l in &lines {
        hasher.update(l.as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_comment(line: &str) -> bool {
    line.starts_with('#')
}

/// Escape a field for tab-separated output (`\t`, `\n`, `\r`, `\\`).
pub fn tsv_escape(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    for c in field.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn tsv_unescape(field: &str) -> String {
    let mut out = String::with_capacity(field.len());
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_round_trip() {
        let h = ArtifactHeader::new("deadbeef", 42);
        let line = h.to_string();
        assert!(line.starts_with("# codesearch "));
        assert_eq!(ArtifactHeader::parse(&line), Some(h));
    }

    #[test]
    fn config_hash_ignores_order() {
        let a = config_hash([("seed", "1"), ("lr", "0.1")]);
        let b = config_hash([("lr", "0.1"), ("seed", "1")]);
        assert_eq!(a, b);
        assert_ne!(a, config_hash([("lr", "0.2"), ("seed", "1")]));
    }

    proptest! {
        #[test]
        fn tsv_escape_round_trips(s in "\\PC*") {
            let e = tsv_escape(&s);
            prop_assert!(!e.contains('\t') && !e.contains('\n'));
            prop_assert_eq!(tsv_unescape(&e), s);
        }
    }
}
