//! Two-level hashing of information entries.
//!
//! Clients hash `(app context, content)` pairs with SHA-512 before anything
//! leaves the device. The aggregation server re-hashes the client digest with
//! a secret salt, so values that end up in shared scripts cannot be matched by
//! an attacker who enumerates candidate strings offline.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha512};
use thiserror::Error;

use crate::ui_model::AppContext;

/// ASCII unit separator placed between canonical fields.
pub const DELIMITER: u8 = 0x1F;
pub const SALT_LEN: usize = 64;
pub const HEX_LEN: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HashError {
    #[error("{field} contains the reserved delimiter byte 0x1F")]
    DelimiterInField { field: &'static str },
    #[error("invalid digest hex: expected {HEX_LEN} lowercase hex characters")]
    InvalidHex,
    #[error("invalid user id `{0}`: expected a canonical UUID")]
    InvalidUserId(String),
    #[error("salt must be exactly {SALT_LEN} bytes, got {0}")]
    SaltLength(usize),
    #[error("salt file {path}: {message}")]
    SaltFile { path: String, message: String },
}

fn is_digest_hex(s: &str) -> bool {
    s.len() == HEX_LEN && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

macro_rules! digest_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(String);

        impl $name {
            pub fn parse(hex: &str) -> Result<Self, HashError> {
                if is_digest_hex(hex) {
                    Ok(Self(hex.to_owned()))
                } else {
                    Err(HashError::InvalidHex)
                }
            }

            fn from_digest(bytes: &[u8]) -> Self {
                Self(hex::encode(bytes))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}..)", stringify!($name), &self.0[..12])
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::parse(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

digest_newtype!(
    /// Client-side SHA-512 digest of a canonical context or pair encoding.
    ClientHash
);
digest_newtype!(
    /// Server-side digest of a [`ClientHash`] keyed by the secret salt.
    SaltedHash
);

/// Secret server key. Never serialized.
#[derive(Clone, PartialEq, Eq)]
pub struct Salt([u8; SALT_LEN]);

impl fmt::Debug for Salt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Salt(<redacted>)")
    }
}

impl Salt {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HashError> {
        let arr: [u8; SALT_LEN] = bytes
            .try_into()
            .map_err(|_| HashError::SaltLength(bytes.len()))?;
        Ok(Self(arr))
    }

    /// Fresh salt from the operating system's CSPRNG.
    pub fn generate() -> Self {
        let mut buf = [0u8; SALT_LEN];
        getrandom::fill(&mut buf).expect("operating system randomness unavailable");
        Self(buf)
    }

    /// Reads the key file at `path`, creating it with a new salt if absent.
    pub fn load_or_create(path: &Path) -> Result<Self, HashError> {
        let err = |message: String| HashError::SaltFile {
            path: path.display().to_string(),
            message,
        };
        match fs::read(path) {
            Ok(bytes) => Self::from_bytes(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                let salt = Self::generate();
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
                }
                let mut opts = fs::OpenOptions::new();
                opts.write(true).create_new(true);
                #[cfg(unix)]
                {
                    use std::os::unix::fs::OpenOptionsExt;
                    opts.mode(0o600);
                }
                let mut f = opts.open(path).map_err(|e| err(e.to_string()))?;
                f.write_all(&salt.0).map_err(|e| err(e.to_string()))?;
                Ok(salt)
            }
            Err(e) => Err(err(e.to_string())),
        }
    }
}

/// Anonymous, resettable user identifier (canonical hyphenated UUID).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(String);

impl UserId {
    pub fn generate() -> Self {
        Self(uuid::Uuid::new_v4().hyphenated().to_string())
    }

    pub fn parse(s: &str) -> Result<Self, HashError> {
        match uuid::Uuid::try_parse(s) {
            Ok(u) if s.len() == 36 && u.hyphenated().to_string() == s.to_ascii_lowercase() => {
                Ok(Self(s.to_ascii_lowercase()))
            }
            _ => Err(HashError::InvalidUserId(s.to_owned())),
        }
    }

    /// Deterministic id for simulated populations.
    pub fn from_u128(n: u128) -> Self {
        Self(uuid::Uuid::from_u128(n).hyphenated().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for UserId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for UserId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

fn check_context(ctx: &AppContext) -> Result<(), HashError> {
    if ctx.package_name().as_bytes().contains(&DELIMITER) {
        return Err(HashError::DelimiterInField { field: "package_name" });
    }
    if ctx.activity_name().as_bytes().contains(&DELIMITER) {
        return Err(HashError::DelimiterInField { field: "activity_name" });
    }
    Ok(())
}

/// `package 0x1F activity`
pub fn canonical_context_bytes(ctx: &AppContext) -> Result<Vec<u8>, HashError> {
    check_context(ctx)?;
    let mut out = Vec::with_capacity(ctx.package_name().len() + ctx.activity_name().len() + 1);
    out.extend_from_slice(ctx.package_name().as_bytes());
    out.push(DELIMITER);
    out.extend_from_slice(ctx.activity_name().as_bytes());
    Ok(out)
}

/// `package 0x1F activity 0x1F content`
pub fn canonical_pair_bytes(ctx: &AppContext, content: &str) -> Result<Vec<u8>, HashError> {
    let mut out = canonical_context_bytes(ctx)?;
    out.push(DELIMITER);
    out.extend_from_slice(content.as_bytes());
    Ok(out)
}

pub fn sha512_hex(bytes: &[u8]) -> String {
    hex::encode(Sha512::digest(bytes))
}

pub fn client_hash_pair(ctx: &AppContext, content: &str) -> Result<ClientHash, HashError> {
    let bytes = canonical_pair_bytes(ctx, content)?;
    Ok(ClientHash::from_digest(&Sha512::digest(&bytes)))
}

pub fn client_hash_context(ctx: &AppContext) -> Result<ClientHash, HashError> {
    let bytes = canonical_context_bytes(ctx)?;
    Ok(ClientHash::from_digest(&Sha512::digest(&bytes)))
}

/// SHA-512 over `hex(client hash) 0x1F salt`.
pub fn salted_hash(hash: &ClientHash, salt: &Salt) -> SaltedHash {
    let mut hasher = Sha512::new();
    hasher.update(hash.as_str().as_bytes());
    hasher.update([DELIMITER]);
    hasher.update(salt.0);
    SaltedHash::from_digest(&hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(p: &str, a: &str) -> AppContext {
        AppContext::new(p, a).unwrap()
    }

    // Known-answer vectors computed with Python's hashlib.
    const SHA512_EMPTY: &str = "cf83e1357eefb8bdf1542850d66d8007d620e4050b5715dc83f4a921d36ce9ce47d0d13c5d85f2b0ff8318d2877eec2f63b931bd47417a81a538327af927da3e";
    const SHA512_ABC: &str = "ddaf35a193617abacc417349ae20413112e6fa4e89a97ea20a9eeee64b55d39a2192992a274fc1a836ba3c23a3feebbd454d4423643ce80e2a9ac94fa54ca49f";

    #[test]
    fn sha512_known_answers() {
        assert_eq!(sha512_hex(b""), SHA512_EMPTY);
        assert!(sha512_hex(b"").starts_with("cf83e1357eefb8bd"));
        assert_eq!(sha512_hex(b"abc"), SHA512_ABC);
    }

    #[test]
    fn canonical_bytes_layout() {
        let c = ctx("com.amex", "Pay");
        assert_eq!(canonical_pair_bytes(&c, "a").unwrap(), b"com.amex\x1FPay\x1Fa".to_vec());
        let empty = canonical_pair_bytes(&c, "").unwrap();
        assert_eq!(*empty.last().unwrap(), DELIMITER);
        assert_eq!(canonical_context_bytes(&c).unwrap(), b"com.amex\x1FPay".to_vec());
    }

    #[test]
    fn pair_hash_matches_reference() {
        // hashlib.sha512(b"com.amex\x1fPay\x1fa").hexdigest()
        let h = client_hash_pair(&ctx("com.amex", "Pay"), "a").unwrap();
        assert_eq!(
            h.as_str(),
            "f5c455a16554111e6707355a69704ee5e61163eefbb565bd96a6b5e2cabcee71a2246de8da2de16476a8efef4f40b7b94fc894f8e43f0ae6da6bccb59c737e6c"
        );
    }

    #[test]
    fn hashes_are_deterministic_and_context_sensitive() {
        let a = client_hash_pair(&ctx("com.example.bank", "Pay"), "…1234").unwrap();
        let b = client_hash_pair(&ctx("com.example.bank", "Pay"), "…1234").unwrap();
        let c = client_hash_pair(&ctx("com.example.ride", "Pay"), "…1234").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn field_boundaries_are_unambiguous() {
        let a = client_hash_pair(&ctx("ab", "c"), "d").unwrap();
        let b = client_hash_pair(&ctx("a", "bc"), "d").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn salted_hash_depends_on_salt() {
        let h = client_hash_context(&ctx("com.amex", "Pay")).unwrap();
        let s1 = Salt::from_bytes(&[1u8; 64]).unwrap();
        let s2 = Salt::from_bytes(&[2u8; 64]).unwrap();
        assert_eq!(salted_hash(&h, &s1), salted_hash(&h, &s1));
        assert_ne!(salted_hash(&h, &s1), salted_hash(&h, &s2));
        assert_ne!(salted_hash(&h, &s1).as_str(), h.as_str());
    }

    #[test]
    fn salt_length_is_enforced() {
        assert_eq!(Salt::from_bytes(&[0u8; 63]), Err(HashError::SaltLength(63)));
    }

    #[test]
    fn salt_file_created_then_reused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys/salt.key");
        let a = Salt::load_or_create(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), SALT_LEN);
        let b = Salt::load_or_create(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(format!("{a:?}"), "Salt(<redacted>)");
    }

    #[test]
    fn digest_parse_rejects_bad_hex() {
        assert!(ClientHash::parse(&"A".repeat(128)).is_err());
        assert!(ClientHash::parse(&"a".repeat(127)).is_err());
        assert!(SaltedHash::parse(&"0".repeat(128)).is_ok());
    }

    #[test]
    fn user_ids() {
        let u = UserId::generate();
        assert_eq!(u.as_str().len(), 36);
        assert_eq!(UserId::parse(u.as_str()).unwrap(), u);
        assert!(UserId::parse("not-a-uuid").is_err());
        assert!(UserId::parse("67e5504410b1426f9247bb680e5fe0c8").is_err());
    }

    proptest! {
        #[test]
        fn digests_are_lowercase_hex(p in "[a-z.]{1,12}", a in "[A-Za-z]{1,8}", c in "\\PC{0,40}",
                                     salt in proptest::collection::vec(any::<u8>(), 64)) {
            let cx = ctx(&p, &a);
            let h = client_hash_pair(&cx, &c).unwrap();
            let s = salted_hash(&h, &Salt::from_bytes(&salt).unwrap());
            for hex in [h.as_str(), s.as_str()] {
                prop_assert_eq!(hex.len(), HEX_LEN);
                prop_assert!(hex.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
            }
            prop_assert_ne!(h.as_str(), s.as_str());
        }
    }
}
