//! Option letters and ballots.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest option count supported by the benchmark schema.
pub const MAX_OPTIONS: usize = 5;
/// Smallest option count supported by the benchmark schema.
pub const MIN_OPTIONS: usize = 4;

/// Zero-based option index rendered as an uppercase letter (`A` = 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Letter(u8);

impl Letter {
    pub const A: Letter = Letter(0);
    pub const B: Letter = Letter(1);
    pub const C: Letter = Letter(2);
    pub const D: Letter = Letter(3);
    pub const E: Letter = Letter(4);

    pub fn new(index: usize) -> Option<Letter> {
        (index < MAX_OPTIONS).then_some(Letter(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }

    /// Parses a single letter, case-insensitive, limited to `option_count`.
    pub fn from_char(c: char, option_count: usize) -> Option<Letter> {
        let upper = c.to_ascii_uppercase();
        if !upper.is_ascii_uppercase() {
            return None;
        }
        let idx = (upper as u8 - b'A') as usize;
        (idx < option_count.min(MAX_OPTIONS)).then_some(Letter(idx as u8))
    }

    /// All letters valid for a question with `option_count` options.
    pub fn range(option_count: usize) -> impl Iterator<Item = Letter> {
        (0..option_count.min(MAX_OPTIONS)).map(|i| Letter(i as u8))
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Letter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Letter::from_char(c, MAX_OPTIONS).ok_or_else(|| format!("invalid option letter {s:?}"))
            }
            _ => Err(format!("invalid option letter {s:?}")),
        }
    }
}

impl Serialize for Letter {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One verified answer: a valid option letter or null.
///
/// Ordering puts letters alphabetically before `Null`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ballot {
    Valid(Letter),
    Null,
}

impl Ballot {
    pub fn letter(self) -> Option<Letter> {
        match self {
            Ballot::Valid(l) => Some(l),
            Ballot::Null => None,
        }
    }

    pub fn is_null(self) -> bool {
        matches!(self, Ballot::Null)
    }

    /// Slot in a `[_; MAX_OPTIONS + 1]` count array; null is the last slot.
    pub fn slot(self) -> usize {
        match self {
            Ballot::Valid(l) => l.index(),
            Ballot::Null => MAX_OPTIONS,
        }
    }
}

impl From<Letter> for Ballot {
    fn from(l: Letter) -> Self {
        Ballot::Valid(l)
    }
}

impl From<Option<Letter>> for Ballot {
    fn from(l: Option<Letter>) -> Self {
        l.map_or(Ballot::Null, Ballot::Valid)
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ballot::Valid(l) => write!(f, "{l}"),
            Ballot::Null => f.write_str("null"),
        }
    }
}

impl Serialize for Ballot {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.letter().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Ballot {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Option::<Letter>::deserialize(d)?.into())
    }
}
