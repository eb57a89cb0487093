use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::hashing::SaltedHash;

/// A string position that may have been replaced by its salted hash.
///
/// Serialized as a bare JSON string when plain, or as
/// `{"hidden": true, "hash": "<128 hex>"}` when hidden.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Plain(String),
    Hidden(SaltedHash),
}

impl Slot {
    pub fn plain(s: impl Into<String>) -> Self {
        Slot::Plain(s.into())
    }

    pub fn as_plain(&self) -> Option<&str> {
        match self {
            Slot::Plain(s) => Some(s),
            Slot::Hidden(_) => None,
        }
    }

    pub fn is_hidden(&self) -> bool {
        matches!(self, Slot::Hidden(_))
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Plain(s) => f.write_str(s),
            Slot::Hidden(_) => f.write_str("hidden text"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HiddenRepr {
    hidden: bool,
    hash: SaltedHash,
}

impl Serialize for Slot {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Slot::Plain(text) => s.serialize_str(text),
            Slot::Hidden(hash) => HiddenRepr {
                hidden: true,
                hash: hash.clone(),
            }
            .serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Slot {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Plain(String),
            Hidden(HiddenRepr),
        }
        match Repr::deserialize(d).map_err(|_| {
            serde::de::Error::custom("expected a string or {\"hidden\": true, \"hash\": <hex>}")
        })? {
            Repr::Plain(s) => Ok(Slot::Plain(s)),
            Repr::Hidden(HiddenRepr { hidden: true, hash }) => Ok(Slot::Hidden(hash)),
            Repr::Hidden(_) => Err(serde::de::Error::custom("hidden marker must set hidden: true")),
        }
    }
}
