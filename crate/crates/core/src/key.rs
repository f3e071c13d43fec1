//! Hierarchical data keys and the wildcard patterns that select them.
//!
//! A key is two or more dot-separated segments, coarse to fine, optionally
//! followed by `:name=value,name=value` specifications:
//!
//! ```text
//! network.traffic_capture.sonata.tcp:flag=syn
//! ```
//!
//! Segments, spec names and spec values use lowercase ASCII alphanumerics,
//! `_` and `-`; spec values may be empty. Specs take part in key identity but
//! never in pattern matching. Patterns use `*` for exactly one segment and a
//! trailing `**` for any number of remaining segments (including none).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

/// Longest accepted key or pattern text, so it always fits a u16-prefixed wire string.
pub const MAX_KEY_LEN: usize = u16::MAX as usize;

/// Reasons a key or pattern fails to parse. Every variant is a malformed key.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyError {
    #[error("malformed key: empty input")]
    Empty,
    #[error("malformed key: longer than {MAX_KEY_LEN} bytes")]
    TooLong,
    #[error("malformed key: empty segment at position {0}")]
    EmptySegment(usize),
    #[error("malformed key: illegal character {ch:?} at byte {at}")]
    IllegalChar { ch: char, at: usize },
    #[error("malformed key: bad specification {0:?}")]
    MalformedSpec(String),
    #[error("malformed key: specification {0:?} given twice")]
    DuplicateSpec(String),
    #[error("malformed key: need at least 2 segments, got {0}")]
    TooFewSegments(usize),
    #[error("malformed pattern: `**` is only allowed as the last element")]
    MisplacedMultiWildcard,
}

pub(crate) fn is_key_char(b: u8) -> bool {
    b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-'
}

fn check_word(text: &str, offset: usize) -> Result<(), KeyError> {
    for (i, ch) in text.char_indices() {
        if !ch.is_ascii() || !is_key_char(ch as u8) {
            return Err(KeyError::IllegalChar { ch, at: offset + i });
        }
    }
    Ok(())
}

/// Validates the part after `:` and returns the number of pairs.
fn check_specs(specs: &str) -> Result<usize, KeyError> {
    if specs.is_empty() {
        return Err(KeyError::MalformedSpec(String::new()));
    }
    let mut names: Vec<&str> = Vec::new();
    for pair in specs.split(',') {
        let mut parts = pair.splitn(2, '=');
        let name = parts.next().unwrap_or_default();
        let Some(value) = parts.next() else {
            return Err(KeyError::MalformedSpec(pair.into()));
        };
        if name.is_empty()
            || !name.bytes().all(is_key_char)
            || !value.bytes().all(is_key_char)
        {
            return Err(KeyError::MalformedSpec(pair.into()));
        }
        if names.contains(&name) {
            return Err(KeyError::DuplicateSpec(name.into()));
        }
        names.push(name);
    }
    Ok(names.len())
}

/// A validated data key in canonical text form.
///
/// The text is stored once; segments and specs are views into it, so equality,
/// ordering and hashing are those of the canonical string.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DataKey {
    text: String,
    base_len: usize,
}

impl DataKey {
    pub fn parse(text: &str) -> Result<Self, KeyError> {
        if text.is_empty() {
            return Err(KeyError::Empty);
        }
        if text.len() > MAX_KEY_LEN {
            return Err(KeyError::TooLong);
        }
        let (base, specs) = match text.find(':') {
            Some(i) => (&text[..i], Some(&text[i + 1..])),
            None => (text, None),
        };
        let mut count = 0;
        let mut offset = 0;
        for (i, seg) in base.split('.').enumerate() {
            if seg.is_empty() {
                return Err(KeyError::EmptySegment(i));
            }
            check_word(seg, offset)?;
            offset += seg.len() + 1;
            count += 1;
        }
        if count < 2 {
            return Err(KeyError::TooFewSegments(count));
        }
        if let Some(specs) = specs {
            check_specs(specs)?;
        }
        Ok(Self {
            text: text.into(),
            base_len: base.len(),
        })
    }

    /// Builds a key from its parts, validating them exactly as [`DataKey::parse`] would.
    pub fn from_parts(segments: &[&str], specs: &[(&str, &str)]) -> Result<Self, KeyError> {
        let mut text = segments.join(".");
        if !specs.is_empty() {
            text.push(':');
            for (i, (name, value)) in specs.iter().enumerate() {
                if i > 0 {
                    text.push(',');
                }
                text.push_str(name);
                text.push('=');
                text.push_str(value);
            }
        }
        // Reject pieces that smuggle separators in; parse alone would re-split them.
        for seg in segments {
            if seg.contains(['.', ':', ',', '=']) {
                return Err(KeyError::IllegalChar {
                    ch: seg.chars().find(|c| ".:,=".contains(*c)).unwrap_or('.'),
                    at: 0,
                });
            }
        }
        for (name, value) in specs {
            if name.contains([',', '=', ':']) || value.contains([',', '=', ':']) {
                return Err(KeyError::MalformedSpec(alloc::format!("{name}={value}")));
            }
        }
        Self::parse(&text)
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// The segment part, without specifications.
    pub fn base(&self) -> &str {
        &self.text[..self.base_len]
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> + Clone {
        self.base().split('.')
    }

    pub fn segment_count(&self) -> usize {
        self.base().split('.').count()
    }

    pub fn has_specs(&self) -> bool {
        self.base_len < self.text.len()
    }

    pub fn specs(&self) -> impl Iterator<Item = (&str, &str)> {
        let rest = if self.has_specs() {
            &self.text[self.base_len + 1..]
        } else {
            ""
        };
        rest.split(',')
            .filter(|p| !p.is_empty())
            .map(|p| p.split_once('=').unwrap_or((p, "")))
    }

    /// Raw text after `:`, if any.
    pub fn spec_text(&self) -> Option<&str> {
        self.has_specs().then(|| &self.text[self.base_len + 1..])
    }

    pub fn spec(&self, name: &str) -> Option<&str> {
        self.specs().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    /// Same segments with all specifications removed.
    pub fn without_specs(&self) -> DataKey {
        DataKey {
            text: self.base().into(),
            base_len: self.base_len,
        }
    }

    pub fn starts_with_segment(&self, first: &str) -> bool {
        self.segments().next() == Some(first)
    }
}

/// Canonical string form; `DataKey::parse(&render_key(k)) == Ok(k)`.
pub fn render_key(key: &DataKey) -> String {
    key.text.clone()
}

pub fn parse_key(text: &str) -> Result<DataKey, KeyError> {
    DataKey::parse(text)
}

impl fmt::Display for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DataKey({})", self.text)
    }
}

impl FromStr for DataKey {
    type Err = KeyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatternElem {
    Literal(String),
    /// `*`: exactly one segment.
    Any,
    /// `**`: zero or more trailing segments.
    Rest,
}

/// A key selector with optional `*` / trailing `**` wildcards.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyPattern {
    text: String,
    elems: Vec<PatternElem>,
}

impl KeyPattern {
    pub fn parse(text: &str) -> Result<Self, KeyError> {
        if text.is_empty() {
            return Err(KeyError::Empty);
        }
        if text.len() > MAX_KEY_LEN {
            return Err(KeyError::TooLong);
        }
        let (base, specs) = match text.find(':') {
            Some(i) => (&text[..i], Some(&text[i + 1..])),
            None => (text, None),
        };
        let parts: Vec<&str> = base.split('.').collect();
        let mut elems = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (i, seg) in parts.iter().enumerate() {
            let elem = match *seg {
                "" => return Err(KeyError::EmptySegment(i)),
                "*" => PatternElem::Any,
                "**" if i + 1 == parts.len() => PatternElem::Rest,
                "**" => return Err(KeyError::MisplacedMultiWildcard),
                lit => {
                    check_word(lit, offset)?;
                    PatternElem::Literal(lit.into())
                }
            };
            offset += seg.len() + 1;
            elems.push(elem);
        }
        if let Some(specs) = specs {
            check_specs(specs)?;
        }
        Ok(Self {
            text: text.into(),
            elems,
        })
    }

    /// The pattern that matches exactly `key` (ignoring its specs).
    pub fn exact(key: &DataKey) -> Self {
        Self {
            text: key.as_str().into(),
            elems: key
                .segments()
                .map(|s| PatternElem::Literal(s.into()))
                .collect(),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Raw text after `:`, if the pattern was written with specifications.
    pub fn spec_text(&self) -> Option<&str> {
        self.text.split_once(':').map(|(_, specs)| specs)
    }

    pub fn elems(&self) -> &[PatternElem] {
        &self.elems
    }

    pub fn is_literal(&self) -> bool {
        self.elems
            .iter()
            .all(|e| matches!(e, PatternElem::Literal(_)))
    }

    /// Segment text of a wildcard-free pattern; the exact-match index key.
    pub fn literal_base(&self) -> Option<&str> {
        if self.is_literal() {
            Some(self.text.split(':').next().unwrap_or(&self.text))
        } else {
            None
        }
    }

    /// The key this pattern names when it has no wildcards and at least two segments.
    pub fn to_key(&self) -> Option<DataKey> {
        if self.is_literal() {
            DataKey::parse(&self.text).ok()
        } else {
            None
        }
    }

    pub fn matches(&self, key: &DataKey) -> bool {
        matches_segments(&self.elems, key.segments())
    }

    /// Matches raw key text; text that is not a legal key never matches.
    pub fn matches_str(&self, key: &str) -> bool {
        DataKey::parse(key).is_ok_and(|k| self.matches(&k))
    }
}

/// Positional match of pattern elements against a segment sequence.
pub fn matches_segments<'a>(elems: &[PatternElem], segs: impl Iterator<Item = &'a str>) -> bool {
    let mut segs = segs;
    for elem in elems {
        match elem {
            PatternElem::Rest => return true,
            PatternElem::Any => {
                if segs.next().is_none() {
                    return false;
                }
            }
            PatternElem::Literal(lit) => match segs.next() {
                Some(s) if s == lit => {}
                _ => return false,
            },
        }
    }
    segs.next().is_none()
}

pub fn matches(pattern: &KeyPattern, key: &DataKey) -> bool {
    pattern.matches(key)
}

impl fmt::Display for KeyPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Debug for KeyPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPattern({})", self.text)
    }
}

impl FromStr for KeyPattern {
    type Err = KeyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl From<&DataKey> for KeyPattern {
    fn from(key: &DataKey) -> Self {
        KeyPattern::exact(key)
    }
}
