//! The closed label sets: 28 letter identities and 4 positional forms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const NUM_LETTERS: usize = 28;
pub const NUM_POSITIONS: usize = 4;

/// Canonical romanised names in alphabetical (hijāʾī) order; index = class id.
pub const LETTER_NAMES: [&str; NUM_LETTERS] = [
    "Alef", "Baa", "Taa", "Thaa", "Jeem", "Haa", "Kha", "Dal", "Dhal", "Raa", "Zay", "Seen", "Sheen", "Saad", "Dad",
    "Ttaa", "Dhaa", "Ayn", "Ghyn", "Faa", "Qaf", "Kaf", "Lam", "Meem", "Noon", "Ha", "Waw", "Yaa",
];

/// Letters that never join to the following letter, so they have no B/M forms.
pub const NON_CONNECTING: [&str; 6] = ["Alef", "Dal", "Dhal", "Raa", "Zay", "Waw"];

/// One of the 28 letter classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LetterClass(u8);

impl LetterClass {
    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_LETTERS).then_some(Self(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        LETTER_NAMES[self.index()]
    }

    /// Case-insensitive lookup of a canonical name.
    pub fn from_name(name: &str) -> Option<Self> {
        LETTER_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| Self(i as u8))
    }

    pub fn all() -> impl Iterator<Item = LetterClass> {
        (0..NUM_LETTERS).map(|i| Self(i as u8))
    }

    pub fn is_connecting(self) -> bool {
        !NON_CONNECTING.contains(&self.name())
    }
}

impl fmt::Display for LetterClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LetterClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_name(s).ok_or_else(|| format!("unknown letter name {s:?}"))
    }
}

impl Serialize for LetterClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for LetterClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Positional form of a letter inside a word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PositionClass {
    Beginning,
    Middle,
    End,
    Isolated,
}

impl PositionClass {
    pub const ALL: [PositionClass; NUM_POSITIONS] = [Self::Beginning, Self::Middle, Self::End, Self::Isolated];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> char {
        match self {
            Self::Beginning => 'B',
            Self::Middle => 'M',
            Self::End => 'E',
            Self::Isolated => 'I',
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "B" => Some(Self::Beginning),
            "M" => Some(Self::Middle),
            "E" => Some(Self::End),
            "I" => Some(Self::Isolated),
            _ => None,
        }
    }
}

impl fmt::Display for PositionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

impl FromStr for PositionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_code(s).ok_or_else(|| format!("invalid position code {s:?}"))
    }
}

impl Serialize for PositionClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.code().to_string())
    }
}

impl<'de> Deserialize<'de> for PositionClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A composite (letter, position) label.
pub type Pair = (LetterClass, PositionClass);

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn name_mapping_is_a_bijection() {
        let names: HashSet<_> = LETTER_NAMES.iter().collect();
        assert_eq!(names.len(), NUM_LETTERS);
        for l in LetterClass::all() {
            assert_eq!(LetterClass::from_name(l.name()), Some(l));
        }
        assert_eq!(LetterClass::from_name("ghyn").unwrap().name(), "Ghyn");
        assert!(LetterClass::from_name("Omega").is_none());
        assert!(LetterClass::new(28).is_none());
    }

    #[test]
    fn position_codes_are_closed() {
        for p in PositionClass::ALL {
            assert_eq!(PositionClass::from_code(&p.code().to_string()), Some(p));
        }
        assert!(PositionClass::from_code("X").is_none());
        assert!(PositionClass::from_code("b").is_none());
    }
}
